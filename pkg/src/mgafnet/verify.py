"""Finite-difference verification suite covering every differentiable op and composed module.

Each case builds small double-precision inputs, reduces the output to a scalar
with a fixed random projection and runs :func:`grad_check`. The composed
network case samples a subset of coordinates per parameter tensor.
"""
from __future__ import annotations

import time

import numpy as np

from .autograd import Tensor, grad_check, precision
from .autograd import ops
from .autograd.module import Init
from .fusion import MgafWeights, attend, gate, mgaf_forward
from .pathways import ConvNormAct, DualPathwayNet, Lateral, Pathway, PathwayConfig, ResidualBlock, joint_loss
from .tracks import TrackEncoder, TrackEncoderConfig

EPS = 1e-5
TOL = 1e-4


def _t(rng, *shape, scale=1.0, positive=False):
    a = rng.standard_normal(shape) * scale
    if positive:
        a = np.abs(a) + 0.5
    return Tensor(a, requires_grad=True)


def _proj(out, seed=123):
    """Scalar <out, R> with a fixed random R, so every output coordinate matters."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return ops.sum(ops.mul(out, Tensor(r)))


def _case(fn, inputs):
    return lambda: _proj(fn(*inputs.values())), inputs


def op_cases(seed=0):
    """name -> (scalar function, inputs dict) for each primitive op."""
    rng = np.random.default_rng(seed)
    c = {}

    def add(name, fn, **inputs):
        c[name] = _case(fn, inputs)

    add("add_broadcast", ops.add, a=_t(rng, 3, 4), b=_t(rng, 4))
    add("sub", ops.sub, a=_t(rng, 2, 3), b=_t(rng, 2, 1))
    add("mul_broadcast", ops.mul, a=_t(rng, 2, 3, 4), b=_t(rng, 3, 1))
    add("div", lambda a, b: a / b, a=_t(rng, 3, 3), b=_t(rng, 3, 3, positive=True))
    add("neg", lambda a: -a, a=_t(rng, 5))
    add("reciprocal", ops.reciprocal, a=_t(rng, 4, positive=True))
    add("power", lambda a: ops.power(a, 3), a=_t(rng, 4))
    add("exp", ops.exp, a=_t(rng, 3, 2, scale=0.5))
    add("log", ops.log, a=_t(rng, 6, positive=True))
    add("relu", ops.relu, a=Tensor(rng.choice([-1, 1], (4, 5)) * (0.1 + rng.random((4, 5))), requires_grad=True))
    add("sigmoid", ops.sigmoid, a=_t(rng, 3, 4, scale=2.0))
    add("pointwise_sigmoid", lambda a: ops.pointwise(a, "sigmoid"), a=_t(rng, 3, 3))
    add("reshape", lambda a: ops.reshape(a, (6, 2)), a=_t(rng, 3, 4))
    add("transpose", lambda a: ops.transpose(a, (2, 0, 1)), a=_t(rng, 2, 3, 4))
    add("swap_last", ops.swap_last, a=_t(rng, 2, 3, 4))
    add("getitem_fancy", lambda a: ops.getitem(a, (slice(None), [0, 2, 2])), a=_t(rng, 3, 4))
    add("concat", lambda a, b: ops.concat([a, b], axis=-1), a=_t(rng, 2, 3), b=_t(rng, 2, 2))
    add("broadcast_to", lambda a: ops.broadcast_to(a, (3, 2, 4)), a=_t(rng, 2, 1))
    add("sum_axis", lambda a: ops.sum(a, axis=1, keepdims=True), a=_t(rng, 3, 4, 2))
    add("mean_axis", lambda a: ops.mean(a, axis=(0, 2)), a=_t(rng, 3, 4, 2))
    add("matmul_batched", ops.matmul, a=_t(rng, 2, 3, 4), b=_t(rng, 4, 5))
    add("matmul_batched_both", ops.matmul, a=_t(rng, 2, 3, 4), b=_t(rng, 2, 4, 2))
    add("linear", ops.linear, x=_t(rng, 5, 3), w=_t(rng, 3, 2), b=_t(rng, 2))
    add("softmax", lambda a: ops.softmax(a, axis=-1), a=_t(rng, 3, 5))
    add("softmax_axis0", lambda a: ops.softmax(a, axis=0), a=_t(rng, 4, 3))
    add("log_softmax", ops.log_softmax, a=_t(rng, 3, 5))
    add("layer_norm", ops.layer_norm, x=_t(rng, 2, 3, 6), g=_t(rng, 6), b=_t(rng, 6))
    add("layer_norm_plain", ops.layer_norm, x=_t(rng, 4, 5))
    labels = rng.integers(0, 4, size=5)
    logits = _t(rng, 5, 4)
    c["cross_entropy"] = (lambda: ops.cross_entropy(logits, labels), {"z": logits})
    add("conv_temporal", lambda x, w, b: ops.conv_temporal(x, w, b), x=_t(rng, 2, 7, 3), w=_t(rng, 3, 3, 4),
        b=_t(rng, 4))
    add("conv_temporal_video_axis", lambda x, w: ops.conv_temporal(x, w, axis=-4),
        x=_t(rng, 5, 2, 2, 2), w=_t(rng, 3, 2, 3))
    add("conv_temporal_strided", lambda x, w, b: ops.conv_temporal(x, w, b, stride=2, padding=2),
        x=_t(rng, 8, 3), w=_t(rng, 5, 3, 2), b=_t(rng, 2))
    add("conv_spatial", lambda x, w, b: ops.conv_spatial(x, w, b), x=_t(rng, 2, 5, 5, 2), w=_t(rng, 3, 3, 2, 3),
        b=_t(rng, 3))
    add("conv_spatial_stride2", lambda x, w: ops.conv_spatial(x, w, stride=2), x=_t(rng, 1, 6, 6, 2),
        w=_t(rng, 3, 3, 2, 2))
    add("conv_spatial_1x1", lambda x, w: ops.conv_spatial(x, w), x=_t(rng, 3, 4, 4, 3), w=_t(rng, 1, 1, 3, 2))
    add("pool_spatial_avg", lambda x: ops.pool(x, "spatial_avg"), x=_t(rng, 2, 3, 4, 4, 2))
    add("pool_spatial_window", lambda x: ops.pool(x, "spatial_avg", window=(2, 2)), x=_t(rng, 2, 4, 4, 2))
    add("pool_global_avg", lambda x: ops.pool(x, "global_avg"), x=_t(rng, 2, 3, 4, 4, 2))
    add("resample_time", lambda x: ops.resample_time(x, 7), x=_t(rng, 2, 4, 3))
    return c


def module_cases(seed=0):
    """Track encoder, MGAF and pathway building blocks with all parameters checked."""
    rng = np.random.default_rng(seed)
    init = Init(seed)
    c = {}

    tcfg = TrackEncoderConfig(channels=(4, 5, 3), layers=3, num_classes=3, num_slots=2, kernel_length=3)
    enc = TrackEncoder(tcfg, init)
    _randomize(enc, rng)
    z = _t(rng, 2, 6, tcfg.in_dim)

    def track_loss():
        feats, logits = enc.forward(z)
        return ops.add(_proj(logits), _proj(feats[1], seed=7))
    c["track_encoder"] = (track_loss, {"z": z, **_named(enc)})

    w = MgafWeights(4, 5, width=3, init=init)
    _randomize(w, rng)
    f = _t(rng, 2, 4, 3, 3, 4)
    U = _t(rng, 2, 4, 5)
    q = _t(rng, 2, 4, 4)
    c["mgaf_attend"] = (lambda: _proj(attend(q, U, w)), {"q": q, "U": U, **_named(w)})
    c["mgaf_gate"] = (lambda: _proj(gate(q, U, w)), {"q": q, "U": U, **_named(w)})
    c["mgaf_forward"] = (lambda: _proj(mgaf_forward(f, U, w)), {"f": f, "U": U, **_named(w)})
    U6 = _t(rng, 2, 6, 5)
    c["mgaf_forward_resampled"] = (lambda: _proj(mgaf_forward(f, U6, w)), {"f": f, "U": U6, **_named(w)})

    plain = ResidualBlock(init, "plain", 3, 3, 3)
    _randomize(plain, rng)
    xp = _t(rng, 1, 4, 4, 4, 3)
    c["residual_block"] = (lambda: _proj(plain.forward(xp)), {"x": xp, **_named(plain)})

    blk = ResidualBlock(init, "blk", 3, 3, 3, mgaf=MgafWeights(3, 5, init=init, name="blk.mgaf"))
    _randomize(blk, rng)
    x = _t(rng, 1, 4, 4, 4, 3)
    Ub = _t(rng, 1, 4, 5)
    c["residual_block_mgaf"] = (lambda: _proj(blk.forward(x, Ub)), {"x": x, "U": Ub, **_named(blk)})

    cna = ConvNormAct(init, "cna", 2, 3, 3, 2)
    _randomize(cna, rng)
    xc = _t(rng, 2, 6, 6, 2)
    c["conv_norm_act"] = (lambda: _proj(cna.forward(xc)), {"x": xc, **_named(cna)})

    lat = Lateral(init, "lat", 2, 5, 4)
    _randomize(lat, rng)
    xl = _t(rng, 8, 2, 2, 2)
    c["lateral"] = (lambda: _proj(lat.forward(xl, 2)), {"x": xl, **_named(lat)})

    pcfg = PathwayConfig(frames_appearance=2, stage_widths=(4, 6), blocks_per_stage=1, channel_ratio=0.5)
    path = Pathway(init, "app", pcfg, pcfg.stage_widths, lateral_channels=[4, 4])
    _randomize(path, rng, scale=0.2)
    xa = _t(rng, 1, 2, 8, 8, 3)
    lats = [_t(rng, 1, 2, 4, 4, 4), _t(rng, 1, 2, 4, 4, 4)]
    c["appearance_pathway"] = (lambda: _proj(path.forward(xa, lats)[0]),
                               {"x": xa, "lateral0": lats[0], "lateral1": lats[1], **_named(path)})
    return c


def _named(module):
    return dict(module.named_parameters())


def _randomize(module, rng, scale=0.5):
    """Move zero/one initialised biases and norm parameters off their defaults."""
    for p in module.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)


def network_case(seed=0, cfg=None, track_cfg=None, mode="A+MGAF(M,O)", batch=2):
    """The full composed network on the desk configuration, under the joint loss."""
    rng = np.random.default_rng(seed)
    cfg = cfg or PathwayConfig()
    track_cfg = track_cfg or TrackEncoderConfig()
    net = DualPathwayNet(cfg, track_cfg, mode, seed=seed)
    _randomize(net, rng, scale=0.1)
    video = Tensor(rng.random((batch, cfg.frames_motion, 32, 32, 3)))
    z = Tensor(rng.random((batch, cfg.frames_motion, track_cfg.in_dim)))
    labels = rng.integers(0, cfg.num_classes, size=batch)

    def f():
        return joint_loss(net.forward(video, z), labels)
    return f, _named(net)


def run_suite(max_coords=6, seed=0, include_network=True, log=None):
    """Run every case; returns a list of ``(name, report, seconds)``."""
    results = []
    with precision("double"):
        cases = {**op_cases(seed), **module_cases(seed)}
        for name, (fn, inputs) in cases.items():
            t0 = time.perf_counter()
            rep = grad_check(fn, inputs, eps=EPS, tol=TOL, skip_kinks=True)
            results.append((name, rep, time.perf_counter() - t0))
            if log:
                log(f"{name}: {rep}")
        if include_network:
            t0 = time.perf_counter()
            fn, inputs = network_case(seed)
            rep = grad_check(fn, inputs, eps=EPS, tol=TOL, max_coords=max_coords, seed=seed, skip_kinks=True)
            results.append(("network:A+MGAF(M,O)", rep, time.perf_counter() - t0))
            if log:
                log(f"network:A+MGAF(M,O): {rep}")
    return results
