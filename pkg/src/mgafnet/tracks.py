"""Object-detection time series and the temporal-convolution track encoder."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autograd import Module, Tensor, conv_temporal, default_dtype, layer_norm, matmul, pool, relu
from .autograd.module import Init, zeros

CATEGORIES = ("hand", "object")
TRACK_FIELDS = ("video_id", "frame_index", "category", "track_id", "x1", "y1", "x2", "y2", "score")


@dataclass(frozen=True)
class Detection:
    frame_index: int
    category: str
    bbox: tuple
    score: float = 1.0
    track_id: Optional[int] = None

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError(f"negative frame index {self.frame_index}")
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if len(self.bbox) != 4:
            raise ValueError(f"bbox needs 4 coordinates, got {self.bbox!r}")
        x1, y1, x2, y2 = self.bbox
        if not all(0.0 <= c <= 1.0 for c in self.bbox):
            raise ValueError(f"bbox {self.bbox} outside [0, 1]")
        if x1 > x2 or y1 > y2:
            raise ValueError(f"malformed bbox {self.bbox}: need x1 <= x2 and y1 <= y2")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class ObjectTensor:
    """``values`` is the T x 4D matrix; ``slot_map[d]`` is (category, track id) or None."""

    values: np.ndarray
    slot_map: list = field(default_factory=list)

    @property
    def num_slots(self):
        return self.values.shape[1] // 4

    def to_tensor(self):
        return Tensor(self.values)


def _track_key(det):
    # untracked detections become singleton tracks keyed by their content
    if det.track_id is not None:
        return (det.category, 0, det.track_id)
    return (det.category, 1, (det.frame_index, det.bbox, det.score))


def build_object_tensor(detections, T, D):
    """Lay out up to ``D`` tracks as a ``T x 4D`` matrix of box coordinates.

    Hands fill slots before objects. Within a category, tracks are ranked by
    mean confidence over the clip (missing frames count as zero), descending,
    ties going to the smaller track id. A frame where an assigned track has no
    detection stays zero.
    """
    if D < 1:
        raise ValueError("D must be at least 1")
    if T < 1:
        raise ValueError("T must be at least 1")
    tracks = defaultdict(dict)
    for det in detections:
        if det.frame_index >= T:
            raise ValueError(f"frame index {det.frame_index} >= T={T}")
        key = _track_key(det)
        if det.frame_index in tracks[key]:
            raise ValueError(f"track {key[0]}:{det.track_id} has two detections in frame {det.frame_index}")
        tracks[key][det.frame_index] = det

    def rank(key):
        cat, untracked, ident = key
        mean_score = sum(d.score for d in tracks[key].values()) / T
        return (CATEGORIES.index(cat), -mean_score, untracked, ident)

    chosen = sorted(tracks, key=rank)[:D]
    values = np.zeros((T, 4 * D))
    slot_map = [None] * D
    for slot, key in enumerate(chosen):
        slot_map[slot] = (key[0], key[2] if key[1] == 0 else None)
        for t, det in tracks[key].items():
            values[t, 4 * slot:4 * slot + 4] = det.bbox
    return ObjectTensor(values, slot_map)


# -- track files -------------------------------------------------------------

class TrackFileError(ValueError):
    pass


def write_track_file(path, records):
    """Write ``records`` = iterable of (video_id, Detection) as CSV with header."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_FIELDS)
        for vid, d in records:
            w.writerow([vid, d.frame_index, d.category, "" if d.track_id is None else d.track_id,
                        *(repr(float(c)) for c in d.bbox), repr(float(d.score))])


def read_track_file(path):
    """Return {video_id: [Detection, ...]}; errors name the offending line."""
    out = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRACK_FIELDS:
            raise TrackFileError(f"{path}:1: expected header {','.join(TRACK_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(TRACK_FIELDS):
                raise TrackFileError(f"{path}:{lineno}: expected {len(TRACK_FIELDS)} fields, got {len(row)}")
            try:
                vid, frame, cat, tid, *coords, score = row
                det = Detection(int(frame), cat, tuple(float(c) for c in coords), float(score),
                                int(tid) if tid.strip() else None)
            except ValueError as exc:
                raise TrackFileError(f"{path}:{lineno}: {exc}") from None
            out[vid].append(det)
    return dict(out)


# -- encoder -------------------------------------------------------------------

# Classifier heads start small so initial predictions are near uniform; large
# initial logits on un-centred pooled features make SGD unstable.
HEAD_GAIN = 0.1

@dataclass
class TrackEncoderConfig:
    channels: tuple = (64, 64, 64, 64, 64)
    num_classes: int = 6
    num_slots: int = 4
    kernel_length: int = 9
    stride: int = 1
    layers: int = 5

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.kernel_length % 2 == 0:
            raise ValueError("kernel length must be odd")
        if self.stride != 1:
            raise ValueError("the track encoder keeps the time axis; stride must be 1")
        if len(self.channels) != self.layers:
            raise ValueError(f"{len(self.channels)} channel widths for {self.layers} layers")
        if any(c < 1 for c in self.channels) or self.num_classes < 1 or self.num_slots < 1:
            raise ValueError("widths, class count and slot count must be positive")

    @property
    def in_dim(self):
        return 4 * self.num_slots


def count_parameters(cfg):
    widths = (cfg.in_dim,) + cfg.channels
    convs = sum(cfg.kernel_length * a * b + b for a, b in zip(widths[:-1], widths[1:]))
    return convs + widths[-1] * cfg.num_classes + cfg.num_classes


class TrackEncoder(Module):
    """Stack of (temporal conv -> layer norm -> ReLU) over ``(..., T, 4D)`` input.

    Layer norm here has no affine parameters, so the parameter count is exactly
    the conv and head weights.
    """

    def __init__(self, cfg, init=None, name="tracks"):
        self.cfg = cfg
        init = init or Init(0)
        widths = (cfg.in_dim,) + cfg.channels
        k = cfg.kernel_length
        self.conv_w = [init.he(f"{name}.conv_w.{i}", (k, a, b), k * a)
                       for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        self.conv_b = [zeros(b) for b in widths[1:]]
        self.head_w = init.xavier(f"{name}.head_w", (widths[-1], cfg.num_classes), widths[-1], cfg.num_classes,
                                  gain=HEAD_GAIN)
        self.head_b = zeros(cfg.num_classes)

    def features(self, z):
        """Per-layer features U_1..U_L, each ``(..., T, C_l)``."""
        if z.shape[-1] != self.cfg.in_dim:
            raise ValueError(f"object tensor width {z.shape[-1]} != 4D = {self.cfg.in_dim}")
        feats = []
        h = z
        for w, b in zip(self.conv_w, self.conv_b):
            h = relu(layer_norm(conv_temporal(h, w, b, axis=-2)))
            feats.append(h)
        return feats

    def head(self, u_last):
        pooled = pool(u_last, "global_avg", keep_axes=u_last.ndim - 2)
        return matmul(pooled.reshape(-1, pooled.shape[-1]), self.head_w) + self.head_b, pooled

    def forward(self, z):
        feats = self.features(z)
        logits, _ = self.head(feats[-1])
        if z.ndim == 2:
            logits = logits.reshape(self.cfg.num_classes)
        return feats, logits


def encode_tracks(z, encoder):
    """Run the track encoder on an ObjectTensor/array/Tensor; returns (U_1..U_L, logits)."""
    if isinstance(z, ObjectTensor):
        z = z.values
    if not isinstance(z, Tensor):
        z = Tensor(np.asarray(z, dtype=default_dtype()))
    return encoder.forward(z)
