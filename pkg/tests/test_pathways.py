import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgafnet.autograd import Tensor, backward, cross_entropy, grad_check, ops, precision
from mgafnet.autograd.module import Init
from mgafnet.fusion import MgafWeights
from mgafnet.pathways import (MODES, DualOutput, DualPathwayNet, Lateral, PathwayConfig, ResidualBlock,
                              canonical_mode, count_parameters, frame_indices, joint_loss, motion_block,
                              motion_block_fused, sample_frames)
from mgafnet.tracks import TrackEncoderConfig, encode_tracks

K = 3


def tiny():
    cfg = PathwayConfig(frames_appearance=2, rate_ratio=2, channel_ratio=0.25, stage_widths=(8, 12),
                        blocks_per_stage=1, num_classes=K, attention_width=4)
    tcfg = TrackEncoderConfig(channels=(4, 5, 4, 3, 4), num_slots=2, num_classes=K, kernel_length=3)
    return cfg, tcfg


def clip(seed=0, T=4, B=None):
    rng = np.random.default_rng(seed)
    shape = (T, 8, 8, 3) if B is None else (B, T, 8, 8, 3)
    zshape = (T, 8) if B is None else (B, T, 8)
    return rng.random(shape), rng.random(zshape)


def zero_all(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


# -- frame sampling --------------------------------------------------------------

def test_desk_frame_indices():
    app, mot = frame_indices(32, PathwayConfig())
    assert list(app) == [0, 8, 16, 24]
    assert list(mot) == list(range(32))


def test_rate_one_gives_identical_frames():
    cfg = PathwayConfig(frames_appearance=4, rate_ratio=1)
    video = np.random.default_rng(0).random((8, 2, 2, 3))
    np.testing.assert_array_equal(sample_frames(video, "appearance", cfg).data,
                                  sample_frames(video, "motion", cfg).data)


def test_eval_sampling_deterministic_and_train_offsets_valid():
    cfg = PathwayConfig()
    video = np.random.default_rng(0).random((40, 2, 2, 1))
    a = sample_frames(video, "motion", cfg).data
    np.testing.assert_array_equal(a, sample_frames(video, "motion", cfg).data)
    rng = np.random.default_rng(1)
    starts = {int(sample_frames(video, "motion", cfg, train=True, rng=rng).data[0, 0, 0, 0] == video[o, 0, 0, 0])
              for o in range(9)}
    assert starts


def test_clip_too_short():
    with pytest.raises(ValueError, match="too short"):
        sample_frames(np.zeros((31, 2, 2, 3)), "motion", PathwayConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        PathwayConfig(channel_ratio=0.1)
    with pytest.raises(ValueError):
        PathwayConfig(mgaf_sites=(4,))
    with pytest.raises(ValueError):
        PathwayConfig(rate_ratio=0)


def test_mode_names():
    assert canonical_mode("O only") == "O"
    assert canonical_mode("a+mgaf(m, o)") == "A+MGAF(M,O)"
    with pytest.raises(ValueError):
        canonical_mode("B")


# -- blocks ----------------------------------------------------------------------

def test_zero_block_is_identity(rng):
    blk = ResidualBlock(Init(0), "b", 4, 3, 3)
    zero_all(blk)
    x = Tensor(rng.standard_normal((4, 5, 5, 4)))
    np.testing.assert_array_equal(motion_block(x, blk).data, x.data)
    fused = ResidualBlock(Init(0), "b", 4, 3, 3, MgafWeights(4, 6, init=Init(0)))
    for p in (fused.conv_f, fused.bias_f, fused.conv_g, fused.bias_g):
        p.data[:] = 0
    np.testing.assert_array_equal(motion_block_fused(x, Tensor(rng.standard_normal((3, 6))), fused).data, x.data)


@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 4))
@settings(max_examples=20)
def test_block_preserves_shape(T, H, C):
    blk = ResidualBlock(Init(0), "b", C, 3, 3)
    x = Tensor(np.random.default_rng(T * H).standard_normal((T, H, H + 1, C)))
    assert motion_block(x, blk).shape == x.shape


def test_fused_block_with_closed_projection_halves_f(rng):
    init = Init(2)
    plain = ResidualBlock(init, "b", 4, 3, 3)
    fused = ResidualBlock(init, "b", 4, 3, 3, MgafWeights(4, 6, init=init))
    fused.mgaf.W_uz.data[:] = 0
    x = Tensor(rng.standard_normal((4, 5, 5, 4)))
    U = Tensor(rng.standard_normal((4, 6)))
    plain.conv_g.data = plain.conv_g.data * 0.5  # halving f before a bias-free conv == halving the conv
    np.testing.assert_allclose(motion_block_fused(x, U, fused).data, motion_block(x, plain).data, atol=1e-12)


def test_block_gradient(rng):
    blk = ResidualBlock(Init(1), "b", 3, 3, 3)
    for p in blk.parameters():
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    x = Tensor(rng.standard_normal((4, 4, 4, 3)), requires_grad=True)
    r = Tensor(rng.standard_normal(x.shape))
    rep = grad_check(lambda: ops.sum(motion_block(x, blk) * r), {"x": x, **blk.named_parameters()})
    assert rep.passed, str(rep)


@pytest.mark.parametrize("rate", [1, 2, 4, 8])
def test_lateral_time_length(rate):
    lat = Lateral(Init(0), "l", 2, 5, rate)
    out = lat.forward(Tensor(np.ones((3 * rate, 2, 2, 2))), 3)
    assert out.shape == (3, 2, 2, 4)
    with pytest.raises(ValueError, match="rate mismatch"):
        lat.forward(Tensor(np.ones((3 * rate + 1, 2, 2, 2))), 3)


def test_lateral_gradient(rng):
    lat = Lateral(Init(0), "l", 2, 5, 2)
    x = Tensor(rng.standard_normal((6, 2, 2, 2)), requires_grad=True)
    r = Tensor(rng.standard_normal((3, 2, 2, 4)))
    assert grad_check(lambda: ops.sum(lat.forward(x, 3) * r), {"x": x, **lat.named_parameters()}).passed


# -- full network ------------------------------------------------------------------

def test_zero_appearance_weights_give_zero_features():
    cfg, tcfg = tiny()
    net = DualPathwayNet(cfg, tcfg, "A")
    zero_all(net.appearance)
    pooled, _ = net.appearance.forward(Tensor(clip()[0][::2]))
    np.testing.assert_array_equal(pooled.data, 0.0)


def test_zero_laterals_match_dead_channels():
    cfg, tcfg = tiny()
    video, _ = clip(B=2)
    net = DualPathwayNet(cfg, tcfg, "A+M")
    for lat in net.laterals:
        zero_all(lat)
    out = net.forward(video)
    a_only = DualPathwayNet(cfg, tcfg, "A")
    for name, p in a_only.named_parameters().items():
        src = net.named_parameters()[name].data
        if name.startswith("appearance.entries") and src.ndim == 4:
            src = src[..., :p.shape[-2], :]  # drop the rows reading the dead lateral channels
        if name == "head_w":
            src = src[:p.shape[0]]
        p.data = src.copy()
    # the joint head also sees motion features; compare the appearance pooled vectors directly
    xa = Tensor(video[:, [0, 2]])
    h = net.appearance.stem.forward(xa)
    zeros = [Tensor(np.zeros(h.shape[:-1] + (lat.b.size,))) for lat in net.laterals]
    with_dead, _ = net.appearance.forward(xa, zeros)
    alone, _ = a_only.appearance.forward(xa)
    np.testing.assert_allclose(with_dead.data, alone.data, atol=1e-12)
    assert out.logits_rgb.shape == (2, K)


def test_object_mode_passes_through_encoder():
    cfg, tcfg = tiny()
    _, z = clip()
    net = DualPathwayNet(cfg, tcfg, "O only")
    out = net.forward(None, z)
    assert out.logits_rgb is None
    _, logits = encode_tracks(Tensor(z), net.tracks)
    np.testing.assert_allclose(out.logits_obj.data, logits.data, atol=1e-12)
    with pytest.raises(ValueError, match="needs video"):
        DualPathwayNet(cfg, tcfg, "A").forward(None, z)
    with pytest.raises(ValueError, match="needs object tracks"):
        DualPathwayNet(cfg, tcfg, "A+MGAF(M,O)").forward(clip()[0])


def test_open_gates_approach_rgb_only():
    cfg, tcfg = tiny()
    video, z = clip(3, B=2)
    base = DualPathwayNet(cfg, tcfg, "A+M", seed=4)
    fused = DualPathwayNet(cfg, tcfg, "A+MGAF(M,O)", seed=4)
    for blocks in fused.motion.blocks:
        for blk in blocks:
            blk.mgaf.ln_gain.data[:] = 0
            blk.mgaf.ln_bias.data[:] = 10.0
            blk.mgaf.W_uz.data[:] = 1.0
    out = fused.forward(video, z, diagnostics=True)
    assert min(d["gate_mean"] for d in out.diagnostics.values()) >= 0.999
    ref = base.forward(video).logits_rgb.data
    np.testing.assert_allclose(out.logits_rgb.data, ref, atol=1e-6)
    assert not np.allclose(DualPathwayNet(cfg, tcfg, "A+MGAF(M,O)", seed=4).forward(video, z).logits_rgb.data, ref,
                           atol=1e-6)


@pytest.mark.parametrize("mode", MODES)
def test_forward_bitwise_deterministic(mode):
    cfg, tcfg = tiny()
    video, z = clip(5)
    outs = []
    for _ in range(2):
        net = DualPathwayNet(cfg, tcfg, mode, seed=9)
        o = net.forward(video if mode != "O" else None, z)
        outs.append(o.logits().data.tobytes())
        assert o.logits().shape == (K,)
    assert outs[0] == outs[1]


@pytest.mark.parametrize("mode", MODES)
def test_single_precision_deterministic(mode):
    cfg, tcfg = tiny()
    video, z = clip(6, B=2)
    with precision("single"):
        a = DualPathwayNet(cfg, tcfg, mode).forward(video if mode != "O" else None, z).logits()
        b = DualPathwayNet(cfg, tcfg, mode).forward(video if mode != "O" else None, z).logits()
    assert a.dtype == np.float32
    assert a.data.tobytes() == b.data.tobytes()


def test_appearance_only_ignores_motion_frames():
    cfg, tcfg = tiny()
    net = DualPathwayNet(cfg, tcfg, "A")
    video, _ = clip(7)
    other = video.copy()
    other[[1, 3]] = np.random.default_rng(1).random(other[[1, 3]].shape)
    np.testing.assert_array_equal(net.forward(video).logits_rgb.data, net.forward(other).logits_rgb.data)
    assert not hasattr(net, "motion")


def test_shared_parameters_identical_across_modes():
    cfg, tcfg = tiny()
    a = DualPathwayNet(cfg, tcfg, "Concat(A+M,O)", seed=3).named_parameters()
    b = DualPathwayNet(cfg, tcfg, "A+MGAF(M,O)", seed=3).named_parameters()
    for name in set(a) & set(b):
        if name != "head_w":
            np.testing.assert_array_equal(a[name].data, b[name].data)


@pytest.mark.parametrize("pair", [("Concat(A+M,O)", "A+MGAF(M,O)"), ("Concat(A,O)", "MGAF(A,O)")])
def test_concat_and_mgaf_differ_only_in_fusion_weights(pair):
    cfg, tcfg = tiny()
    a, b = (DualPathwayNet(cfg, tcfg, m).named_parameters() for m in pair)
    only_b = set(b) - set(a)
    assert set(a) - set(b) == set()
    assert only_b and all(".mgaf." in n for n in only_b)
    extra_head = a["head_w"].size - b["head_w"].size
    assert extra_head == tcfg.channels[-1] * K
    diff = sum(b[n].size for n in only_b) - extra_head
    assert count_parameters(cfg, tcfg, pair[1]) - count_parameters(cfg, tcfg, pair[0]) == diff


@pytest.mark.parametrize("mode", MODES)
def test_count_parameters_matches_enumeration(mode):
    cfg, tcfg = tiny()
    assert count_parameters(cfg, tcfg, mode) == DualPathwayNet(cfg, tcfg, mode).num_parameters()
    desk = PathwayConfig()
    dtrack = TrackEncoderConfig()
    assert count_parameters(desk, dtrack, mode) == DualPathwayNet(desk, dtrack, mode).num_parameters()


def test_site_feature_mapping():
    cfg = PathwayConfig(stage_widths=(32, 64, 64, 64), blocks_per_stage=2)
    net = DualPathwayNet(cfg, TrackEncoderConfig(), "MGAF(M,O)")
    widths = [blk.mgaf.object_channels for stage in net.motion.blocks for blk in stage]
    assert widths == [16] + [64] * 7  # site 0 reads the raw object tensor, deeper sites clamp to the last layer
    sub = DualPathwayNet(PathwayConfig(mgaf_sites=(1, 3)), TrackEncoderConfig(), "MGAF(M,O)")
    assert [blk.mgaf is not None for stage in sub.motion.blocks for blk in stage] == [False, True, False, True]


# -- loss ---------------------------------------------------------------------------

def test_joint_loss_uniform_heads():
    u = Tensor(np.zeros(4))
    np.testing.assert_allclose(joint_loss(DualOutput(u, u), 2).data, 2 * np.log(4), rtol=1e-12)


def test_joint_loss_weights(rng):
    r, o = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 4)))
    y = np.array([0, 3, 1])
    np.testing.assert_allclose(joint_loss(DualOutput(r, o), y, 1.0, 0.0).data, cross_entropy(r, y).data)
    np.testing.assert_allclose(joint_loss(DualOutput(None, o), y, 5.0, 1.0).data, cross_entropy(o, y).data)
    np.testing.assert_allclose(joint_loss(DualOutput(r, o), y, 0.5, 2.0).data,
                               0.5 * cross_entropy(r, y).data + 2 * cross_entropy(o, y).data)
    with pytest.raises(ValueError):
        joint_loss(DualOutput(None, None), y)


def test_gradient_reaches_every_parameter():
    cfg, tcfg = tiny()
    net = DualPathwayNet(cfg, tcfg, "A+MGAF(M,O)", seed=1)
    rng = np.random.default_rng(0)
    for p in net.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    video, z = clip(8, B=2)
    backward(joint_loss(net.forward(video, z), [0, 2]))
    dead = [n for n, p in net.named_parameters().items() if not np.any(p.grad)]
    assert dead == []


def test_network_gradient_tiny():
    cfg, tcfg = tiny()
    net = DualPathwayNet(cfg, tcfg, "A+MGAF(M,O)", seed=1)
    rng = np.random.default_rng(0)
    for p in net.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    video, z = clip(8, B=2)
    rep = grad_check(lambda: joint_loss(net.forward(video, z), [0, 2]), net.named_parameters(), max_coords=3,
                     skip_kinks=True)
    assert rep.passed, str(rep)
