"""Procedural interaction clips with exact object tracks and a compositional split.

A clip shows a hand marker and one object sprite. The verb decides how the
two move; the noun decides only what the object looks like. Trajectories are
drawn from the sample seed alone, so the same seed gives the same boxes for
every noun.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tracks import Detection

VERBS = ("lift", "drop", "shake", "approach-hand", "rotate-around", "slide-behind")


@dataclass(frozen=True)
class Noun:
    name: str
    shape: str  # square | circle | triangle | diamond
    color: tuple
    texture: str  # solid | striped


NOUNS = (
    Noun("red-square", "square", (0.9, 0.15, 0.15), "solid"),
    Noun("blue-circle", "circle", (0.15, 0.3, 0.95), "striped"),
    Noun("green-triangle", "triangle", (0.15, 0.8, 0.2), "solid"),
    Noun("yellow-diamond", "diamond", (0.95, 0.9, 0.1), "striped"),
    Noun("magenta-circle", "circle", (0.85, 0.2, 0.85), "solid"),
    Noun("cyan-square", "square", (0.1, 0.85, 0.9), "striped"),
    Noun("orange-diamond", "diamond", (1.0, 0.55, 0.05), "solid"),
    Noun("white-triangle", "triangle", (0.95, 0.95, 0.95), "striped"),
)

HAND_COLOR = (0.55, 0.35, 0.25)
HAND_SIZE = 6.0


@dataclass(frozen=True)
class Vocabulary:
    verbs: tuple = VERBS
    nouns: tuple = NOUNS


@dataclass(frozen=True)
class RenderConfig:
    frames: int = 32
    height: int = 32
    width: int = 32
    supersample: int = 4
    pixel_noise: float = 0.02


@dataclass
class CompositionalSplit:
    train_pairs: frozenset
    test_pairs: frozenset

    def split_of(self, pair):
        if pair in self.train_pairs:
            return "train"
        if pair in self.test_pairs:
            return "test"
        raise KeyError(pair)


@dataclass
class SyntheticSample:
    video: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    tracks: list
    verb: int
    noun: int
    seed: int
    split: Optional[str] = None
    noisy_tracks: Optional[list] = None
    alphas: Optional[dict] = field(default=None, repr=False)


def make_split(vocab=Vocabulary(), seed=None):
    """Verbs split into halves 1/2 and nouns into A/B; train 1A+2B, test 1B+2A.

    ``seed=None`` keeps vocabulary order; otherwise both lists are shuffled
    first with that seed.
    """
    nv, nn = len(vocab.verbs), len(vocab.nouns)
    if nv < 2 or nn < 2:
        raise ValueError("need at least 2 verbs and 2 nouns for a compositional split")
    verbs, nouns = np.arange(nv), np.arange(nn)
    if seed is not None:
        rng = np.random.default_rng(seed)
        verbs, nouns = rng.permutation(verbs), rng.permutation(nouns)
    v1, v2 = verbs[: nv // 2], verbs[nv // 2:]
    na, nb = nouns[: nn // 2], nouns[nn // 2:]
    pairs = lambda vs, ns: {(int(v), int(n)) for v in vs for n in ns}  # noqa: E731
    return CompositionalSplit(frozenset(pairs(v1, na) | pairs(v2, nb)),
                              frozenset(pairs(v1, nb) | pairs(v2, na)))


# -- trajectories ---------------------------------------------------------------

def _smooth(t):
    return t * t * (3.0 - 2.0 * t)


def trajectory(verb, rng, cfg=RenderConfig()):
    """Per-frame (object centre, hand centre, object size) in pixel units."""
    T = cfg.frames
    t = np.linspace(0.0, 1.0, T)
    size = rng.uniform(7.0, 9.0)
    half = size / 2.0
    name = VERBS[verb] if isinstance(verb, (int, np.integer)) else verb
    side = rng.choice([-1.0, 1.0])
    if name == "lift":
        cx = np.full(T, rng.uniform(10.0, 22.0))
        dy = rng.uniform(10.0, 13.0)
        cy = rng.uniform(21.0, 25.0) - dy * _smooth(t)
        hx, hy = cx + side * (half + 3.5), cy.copy()
    elif name == "drop":
        cx = np.full(T, rng.uniform(10.0, 22.0))
        dy = rng.uniform(10.0, 13.0)
        cy = rng.uniform(7.0, 11.0) + dy * t ** 2
        hx, hy = cx + side * (half + 3.5), np.full(T, cy[0])
    elif name == "shake":
        amp = rng.uniform(3.5, 5.0)
        cycles = rng.choice([2.0, 3.0])
        phase = rng.uniform(0.0, 2 * np.pi)
        cx = rng.uniform(11.0, 21.0) + amp * np.sin(2 * np.pi * cycles * t + phase)
        cy = np.full(T, rng.uniform(11.0, 21.0))
        hx, hy = cx.copy(), cy + half + 3.5
    elif name == "approach-hand":
        cx = np.full(T, rng.uniform(12.0, 20.0))
        cy = np.full(T, rng.uniform(12.0, 20.0))
        start = rng.uniform(12.0, 14.0)
        stop = half + 3.5
        d = start + (stop - start) * _smooth(np.clip(t / 0.8, 0.0, 1.0))
        hx, hy = cx + side * d, cy.copy()
    elif name == "rotate-around":
        r = rng.uniform(5.0, 7.0)
        ox, oy = rng.uniform(13.0, 19.0), rng.uniform(13.0, 19.0)
        ang = rng.uniform(0.0, 2 * np.pi) + side * 2 * np.pi * t
        cx, cy = ox + r * np.cos(ang), oy + r * np.sin(ang)
        hx, hy = np.full(T, ox), np.full(T, oy)
    elif name == "slide-behind":
        dx = rng.uniform(10.0, 13.0)
        x0 = 16.0 - side * dx / 2.0
        cx = x0 + side * dx * t
        cy = np.full(T, rng.uniform(11.0, 21.0))
        hx, hy = cx - side * (half + 3.5), cy.copy()
    else:
        raise ValueError(f"unknown verb {verb!r}")
    lim = lambda a, h, n: np.clip(a, h, n - h)  # noqa: E731
    cx, cy = lim(cx, half, cfg.width), lim(cy, half, cfg.height)
    hs = HAND_SIZE / 2.0
    hx, hy = lim(hx, hs, cfg.width), lim(hy, hs, cfg.height)
    return np.stack([cx, cy], 1), np.stack([hx, hy], 1), size


# -- rasterisation --------------------------------------------------------------

def _coverage(shape, centers, size, cfg):
    """Anti-aliased coverage (T, H, W) of a shape inscribed in a size x size box."""
    s = cfg.supersample
    ys = (np.arange(cfg.height * s) + 0.5) / s
    xs = (np.arange(cfg.width * s) + 0.5) / s
    cx = centers[:, 0][:, None, None]
    cy = centers[:, 1][:, None, None]
    u = (xs[None, None, :] - cx) / (size / 2.0)  # in [-1, 1] inside the box
    v = (ys[None, :, None] - cy) / (size / 2.0)
    inside_box = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    if shape == "square":
        m = inside_box
    elif shape == "circle":
        m = u * u + v * v <= 1.0
    elif shape == "diamond":
        m = np.abs(u) + np.abs(v) <= 1.0
    elif shape == "triangle":
        # apex at top centre, base along the bottom edge
        m = inside_box & (np.abs(u) <= (v + 1.0) / 2.0)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    T = centers.shape[0]
    cov = m.reshape(T, cfg.height, s, cfg.width, s).mean(axis=(2, 4))
    return cov, u, v


def _pattern(texture, centers, size, cfg):
    if texture == "solid":
        return 1.0
    s = cfg.supersample
    ys = (np.arange(cfg.height * s) + 0.5) / s
    xs = (np.arange(cfg.width * s) + 0.5) / s
    # diagonal stripes fixed to the object frame
    lx = xs[None, None, :] - centers[:, 0][:, None, None]
    ly = ys[None, :, None] - centers[:, 1][:, None, None]
    band = (np.floor((lx + ly) / 2.0) % 2 == 0).astype(float)
    T = centers.shape[0]
    shade = 1.0 - 0.5 * band
    return shade.reshape(T, cfg.height, s, cfg.width, s).mean(axis=(2, 4))


def _box(center, size, cfg):
    h = size / 2.0
    x1 = (center[0] - h) / cfg.width
    y1 = (center[1] - h) / cfg.height
    x2 = (center[0] + h) / cfg.width
    y2 = (center[1] + h) / cfg.height
    return tuple(float(np.clip(c, 0.0, 1.0)) for c in (x1, y1, x2, y2))


def render_sample(verb, noun, seed, cfg=RenderConfig(), vocab=Vocabulary(), keep_alphas=False):
    """Render one clip; deterministic in (verb, noun, seed)."""
    if not 0 <= verb < len(vocab.verbs) or not 0 <= noun < len(vocab.nouns):
        raise ValueError(f"(verb={verb}, noun={noun}) outside the vocabulary")
    spec = vocab.nouns[noun]
    motion_rng = np.random.default_rng([seed, 1])
    pixel_rng = np.random.default_rng([seed, 2])
    obj_c, hand_c, size = trajectory(vocab.verbs[verb], motion_rng, cfg)

    T, H, W = cfg.frames, cfg.height, cfg.width
    bg = pixel_rng.uniform(0.15, 0.35)
    video = np.full((T, H, W, 3), bg)
    hand_a, _, _ = _coverage("square", hand_c, HAND_SIZE, cfg)
    obj_a, _, _ = _coverage(spec.shape, obj_c, size, cfg)
    shade = _pattern(spec.texture, obj_c, size, cfg)
    obj_rgb = np.asarray(spec.color)[None, None, None, :] * np.asarray(shade)[..., None] if spec.texture != "solid" \
        else np.broadcast_to(np.asarray(spec.color), (T, H, W, 3))
    video = video * (1 - hand_a[..., None]) + np.asarray(HAND_COLOR) * hand_a[..., None]
    video = video * (1 - obj_a[..., None]) + obj_rgb * obj_a[..., None]
    if cfg.pixel_noise:
        video = video + pixel_rng.normal(0.0, cfg.pixel_noise, size=video.shape)
    video = np.clip(video, 0.0, 1.0).astype(np.float32)

    tracks = []
    for t in range(T):
        tracks.append(Detection(t, "hand", _box(hand_c[t], HAND_SIZE, cfg), 1.0, 0))
        tracks.append(Detection(t, "object", _box(obj_c[t], size, cfg), 1.0, 1))
    alphas = {"hand": hand_a, "object": obj_a} if keep_alphas else None
    return SyntheticSample(video, tracks, verb, noun, int(seed), alphas=alphas)


def jitter_tracks(tracks, sigma_pos=0.02, p_drop=0.1, seed=0):
    """Gaussian coordinate noise and random drop-out, imitating detector output."""
    if sigma_pos < 0 or not 0 <= p_drop < 1:
        raise ValueError("need sigma_pos >= 0 and 0 <= p_drop < 1")
    rng = np.random.default_rng(seed)
    out = []
    for det in tracks:
        drop = rng.random() < p_drop
        noise = rng.normal(0.0, sigma_pos, size=4) if sigma_pos > 0 else np.zeros(4)
        if drop:
            continue
        if sigma_pos == 0:
            out.append(det)
            continue
        x1, y1, x2, y2 = np.clip(np.asarray(det.bbox) + noise, 0.0, 1.0)
        bbox = (float(min(x1, x2)), float(min(y1, y2)), float(max(x1, x2)), float(max(y1, y2)))
        out.append(Detection(det.frame_index, det.category, bbox, det.score, det.track_id))
    return out


# -- datasets -------------------------------------------------------------------

MANIFEST_FIELDS = ("sample_id", "verb", "noun", "split", "seed")


@dataclass(frozen=True)
class ManifestRecord:
    sample_id: str
    verb: int
    noun: int
    split: str
    seed: int


def sample_seed(root_seed, verb, noun, index):
    return int(np.random.SeedSequence([root_seed, verb, noun, index]).generate_state(1)[0])


def generate_dataset(vocab=Vocabulary(), split=None, n_per_pair=4, seed=0, n_test_per_pair=None):
    """Balanced manifest over the split's pairs; samples are rendered on demand.

    Each record's seed depends only on (root seed, pair, index), so records can
    be produced in any order or in parallel.
    """
    if n_per_pair < 1:
        raise ValueError("n_per_pair must be >= 1")
    split = split or make_split(vocab)
    n_test = n_test_per_pair or n_per_pair
    records = []
    for name, pairs, n in (("train", split.train_pairs, n_per_pair), ("test", split.test_pairs, n_test)):
        for verb, noun in sorted(pairs):
            for i in range(n):
                sid = f"{name}-v{verb}-n{noun}-{i:04d}"
                records.append(ManifestRecord(sid, verb, noun, name, sample_seed(seed, verb, noun, i)))
    return records


def realize(record, cfg=RenderConfig(), vocab=Vocabulary(), noise=None):
    """Render a manifest record; ``noise`` = (sigma_pos, p_drop) adds jittered tracks."""
    s = render_sample(record.verb, record.noun, record.seed, cfg, vocab)
    s.split = record.split
    if noise is not None:
        s.noisy_tracks = jitter_tracks(s.tracks, noise[0], noise[1], seed=[record.seed, 3])
    return s


def write_manifest(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            w.writerow([r.sample_id, r.verb, r.noun, r.split, r.seed])


def read_manifest(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_FIELDS:
            raise ValueError(f"{path}:1: expected header {','.join(MANIFEST_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sid, verb, noun, split, seed = row
                if split not in ("train", "test"):
                    raise ValueError(f"unknown split {split!r}")
                out.append(ManifestRecord(sid, int(verb), int(noun), split, int(seed)))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def write_raw_tensor(path, array):
    """Flat binary: uint32 rank, uint32 extents, then float32 values in row-major order."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        fh.write(arr.tobytes())


def read_raw_tensor(path):
    with open(path, "rb") as fh:
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: {data.size} values for shape {shape}")
    return data.reshape(shape)
