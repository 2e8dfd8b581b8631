import numpy as np
import pytest
from hypothesis import given, strategies as st

from mgafnet.autograd import Tensor, grad_check, ops
from mgafnet.autograd.module import Init
from mgafnet.tracks import (Detection, TrackEncoder, TrackEncoderConfig, TrackFileError,
                            build_object_tensor, count_parameters, encode_tracks, read_track_file,
                            write_track_file)


def det(frame, cat="object", box=(0.1, 0.2, 0.3, 0.4), score=0.9, tid=None):
    return Detection(frame, cat, box, score, tid)


# -- Detection ----------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    dict(bbox=(0.5, 0.2, 0.3, 0.4)),
    dict(bbox=(0.1, 0.2, 0.3, 1.2)),
    dict(score=1.5),
    dict(frame_index=-1),
    dict(category="person"),
])
def test_detection_invariants(kwargs):
    base = dict(frame_index=0, category="object", bbox=(0.1, 0.2, 0.3, 0.4), score=0.5)
    with pytest.raises(ValueError):
        Detection(**{**base, **kwargs})


# -- builder ------------------------------------------------------------------------

def test_single_detection_layout():
    z = build_object_tensor([det(0)], T=2, D=2).values
    np.testing.assert_array_equal(z[0], [0.1, 0.2, 0.3, 0.4, 0, 0, 0, 0])
    np.testing.assert_array_equal(z[1], np.zeros(8))


def test_lowest_confidence_track_dropped():
    boxes = {1: (0.1, 0.1, 0.2, 0.2), 2: (0.3, 0.3, 0.4, 0.4), 3: (0.5, 0.5, 0.6, 0.6)}
    scores = {1: 0.9, 2: 0.8, 3: 0.7}
    dets = [det(t, box=boxes[k], score=scores[k], tid=k) for k in (3, 1, 2) for t in range(3)]
    ot = build_object_tensor(dets, T=3, D=2)
    assert ot.slot_map == [("object", 1), ("object", 2)]
    assert not np.any(np.isclose(ot.values, 0.5))


def test_empty_detections_zero():
    np.testing.assert_array_equal(build_object_tensor([], 5, 3).values, np.zeros((5, 12)))


def test_hands_before_objects():
    dets = [det(0, "object", score=1.0, tid=0), det(0, "hand", box=(0.5, 0.5, 0.6, 0.6), score=0.1, tid=7)]
    ot = build_object_tensor(dets, 1, 2)
    assert ot.slot_map[0] == ("hand", 7)
    np.testing.assert_array_equal(ot.values[0, :4], [0.5, 0.5, 0.6, 0.6])


def test_missing_frames_are_zero_rows_and_slot_is_stable():
    dets = [det(0, tid=1), det(2, box=(0.2, 0.2, 0.5, 0.5), tid=1)]
    z = build_object_tensor(dets, 3, 1).values
    np.testing.assert_array_equal(z[1], np.zeros(4))
    np.testing.assert_array_equal(z[2], [0.2, 0.2, 0.5, 0.5])


def test_tie_goes_to_smaller_track_id():
    dets = [det(0, box=(0.1, 0.1, 0.2, 0.2), score=0.5, tid=4), det(0, box=(0.3, 0.3, 0.4, 0.4), score=0.5, tid=2)]
    assert build_object_tensor(dets, 1, 1).slot_map == [("object", 2)]


def test_builder_errors():
    with pytest.raises(ValueError):
        build_object_tensor([det(3)], T=3, D=1)
    with pytest.raises(ValueError):
        build_object_tensor([det(0, tid=1), det(0, tid=1)], T=1, D=1)


tracks_strategy = st.lists(
    st.tuples(st.sampled_from(["hand", "object"]), st.integers(0, 5),
              st.lists(st.tuples(st.integers(0, 5), st.floats(0, 1)), min_size=1, max_size=6,
                       unique_by=lambda x: x[0])),
    max_size=4, unique_by=lambda x: x[1])


def _dets(spec):
    out = []
    for cat, tid, frames in spec:
        for f, s in frames:
            box = (0.05 * tid, 0.05 * f, 0.05 * tid + 0.1, 0.05 * f + 0.1)
            out.append(Detection(f, cat, box, s, tid))
    return out


@given(tracks_strategy, st.integers(1, 4), st.randoms())
def test_builder_permutation_invariant_and_deterministic(spec, D, rnd):
    dets = _dets(spec)
    a = build_object_tensor(dets, 6, D)
    shuffled = list(dets)
    rnd.shuffle(shuffled)
    b = build_object_tensor(shuffled, 6, D)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.slot_map == b.slot_map


@given(tracks_strategy, st.integers(1, 4), st.floats(-0.04, 0.04))
def test_builder_translation_passthrough(spec, D, delta):
    dets = _dets(spec)
    base = build_object_tensor(dets, 6, D)
    moved = [Detection(d.frame_index, d.category, tuple(c + 0.045 + delta for c in d.bbox), d.score, d.track_id)
             for d in dets]
    shifted = build_object_tensor(moved, 6, D)
    mask = base.values != 0
    np.testing.assert_allclose(shifted.values[mask], base.values[mask] + 0.045 + delta, atol=1e-12)
    assert base.slot_map == shifted.slot_map


# -- track files ----------------------------------------------------------------------

def test_track_file_round_trip(tmp_path):
    rows = [("v1", det(0, tid=3)), ("v1", det(1, "hand", score=0.25)), ("v2", det(4, box=(0, 0, 1, 1)))]
    path = tmp_path / "tracks.csv"
    write_track_file(path, rows)
    back = read_track_file(path)
    assert back == {"v1": [rows[0][1], rows[1][1]], "v2": [rows[2][1]]}


@pytest.mark.parametrize("line,needle", [
    ("v1,0,object,1,0.5,0.2,0.3,0.4,0.9", "x1 <= x2"),
    ("v1,0,person,1,0.1,0.2,0.3,0.4,0.9", "category"),
    ("v1,0,object,1,0.1,0.2,0.3", "expected 9 fields"),
    ("v1,zero,object,1,0.1,0.2,0.3,0.4,0.9", "invalid literal"),
])
def test_track_file_errors_name_the_line(tmp_path, line, needle):
    path = tmp_path / "bad.csv"
    path.write_text("video_id,frame_index,category,track_id,x1,y1,x2,y2,score\n"
                    "v1,1,object,1,0.1,0.2,0.3,0.4,0.9\n" + line + "\n")
    with pytest.raises(TrackFileError, match=r":3: .*" + needle):
        read_track_file(path)


def test_track_file_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n")
    with pytest.raises(TrackFileError, match=":1:"):
        read_track_file(path)


# -- encoder --------------------------------------------------------------------------

def _zero_weights(enc):
    for p in enc.parameters():
        p.data = np.zeros_like(p.data)


def test_encoder_zero_weights_zero_everything(rng):
    enc = TrackEncoder(TrackEncoderConfig(num_slots=2, num_classes=3))
    _zero_weights(enc)
    feats, logits = encode_tracks(Tensor(np.zeros((7, 8))), enc)
    assert all(np.all(f.data == 0) for f in feats)
    np.testing.assert_array_equal(logits.data, np.zeros(3))
    _, logits = encode_tracks(Tensor(rng.random((7, 8))), enc)
    np.testing.assert_array_equal(logits.data, np.zeros(3))


@given(st.integers(1, 64))
def test_encoder_preserves_time_per_layer(t):
    enc = TrackEncoder(TrackEncoderConfig(channels=(3, 4, 2, 5, 3), num_slots=1, num_classes=2))
    feats, logits = enc.forward(Tensor(np.linspace(0, 1, 4 * t).reshape(t, 4)))
    assert [f.shape for f in feats] == [(t, c) for c in (3, 4, 2, 5, 3)]
    assert logits.shape == (2,)


def test_encoder_gradient_T12_D2(rng):
    cfg = TrackEncoderConfig(channels=(6, 6, 5, 5, 4), num_slots=2, num_classes=3)
    enc = TrackEncoder(cfg, Init(3))
    for p in enc.parameters():
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    z = Tensor(rng.random((12, 8)))
    r = Tensor(rng.standard_normal(3))
    rep = grad_check(lambda: ops.sum(enc.forward(z)[1] * r), {"z": z, **enc.named_parameters()})
    assert rep.passed, str(rep)


def test_encoder_rejects_wrong_width():
    enc = TrackEncoder(TrackEncoderConfig(num_slots=2))
    with pytest.raises(ValueError):
        enc.forward(Tensor(np.zeros((4, 12))))


def test_config_validation():
    with pytest.raises(ValueError):
        TrackEncoderConfig(kernel_length=8)
    with pytest.raises(ValueError):
        TrackEncoderConfig(channels=(4, 4), layers=5)


def test_count_parameters_closed_form():
    cfg = TrackEncoderConfig(channels=(4,), layers=1, num_slots=2, num_classes=2)
    assert count_parameters(cfg) == 9 * 8 * 4 + 4 + 4 * 2 + 2 == 302


@pytest.mark.parametrize("cfg", [TrackEncoderConfig(), TrackEncoderConfig(channels=(16, 32, 64, 32, 8), num_classes=9),
                                 TrackEncoderConfig(channels=(4,), layers=1, num_slots=2, num_classes=2)])
def test_count_parameters_matches_enumeration(cfg):
    enc = TrackEncoder(cfg)
    assert count_parameters(cfg) == sum(p.data.size for p in enc.parameters())
    assert count_parameters(cfg) == count_parameters(cfg)
