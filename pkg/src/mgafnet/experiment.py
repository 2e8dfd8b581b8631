"""Experiment harness: configuration, seeded runs, the ablation matrix, ensembles and checkpoints.

Configuration files are flat ``section.key = <JSON value>`` lines; lines starting
with ``#`` are comments. Every key has a default and unknown keys are rejected.

Seeding: the root ``seed`` is expanded with ``numpy.random.SeedSequence(seed).spawn(2)``
into a data stream (dataset generation and track jitter) and a model stream
(passed to the classifier as ``random_state``, which splits it again into
weight-init and mini-batch shuffle streams). Data therefore depends only on
the seed, never on the mode, so modes trained with one seed see identical
samples.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import struct
import time
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import synth
from .estimator import InteractionClassifier
from .metrics import compute_metrics
from .pathways import MODES, PathwayConfig, canonical_mode, count_parameters, mode_spec
from .tracks import TrackEncoderConfig, build_object_tensor, read_track_file

log = logging.getLogger(__name__)

ENSEMBLE = "ensemble"


# -- configuration -------------------------------------------------------------

@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | manifest
    manifest: str = ""
    track_file: str = ""  # optional; defaults to rendered ground truth
    video_dir: str = ""  # optional raw-tensor dir; defaults to re-rendering from seeds
    n_per_pair: int = 40
    n_test_per_pair: int = 20
    split_seed: Optional[int] = None
    frames: int = 32
    height: int = 32
    width: int = 32
    num_slots: int = 4
    track_noise: bool = False
    sigma_pos: float = 0.02
    p_drop: float = 0.1
    test_on_train: bool = False
    max_train: Optional[int] = None


@dataclass
class OptimConfig:
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    max_grad_norm: Optional[float] = 5.0
    epochs: int = 12
    batch_size: int = 16
    schedule: str = "cosine"  # cosine | constant
    target_train_accuracy: Optional[float] = None
    check_every: int = 5


@dataclass
class LossConfig:
    lambda_rgb: float = 1.0
    lambda_obj: float = 1.0


@dataclass
class EnsembleConfig:
    members: tuple = ("A+M", "O")


@dataclass
class ExperimentConfig:
    mode: str = "A+MGAF(M,O)"
    seed: int = 0
    precision: str = "double"
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    pathway: PathwayConfig = field(default_factory=PathwayConfig)
    tracks: TrackEncoderConfig = field(default_factory=TrackEncoderConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)

    def __post_init__(self):
        if self.mode != ENSEMBLE:
            self.mode = canonical_mode(self.mode)
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be 'single' or 'double', got {self.precision!r}")
        self.ensemble.members = tuple(canonical_mode(m) for m in self.ensemble.members)

    def to_flat(self):
        return config_to_flat(self)

    def replace(self, **overrides):
        """Copy with dotted-key overrides, e.g. ``replace(**{"optim.lr": 0.1})``."""
        flat = self.to_flat()
        for key, value in overrides.items():
            if key not in flat:
                raise KeyError(f"unknown config key {key!r}")
            flat[key] = value
        return config_from_flat(flat)


_SECTIONS = ("data", "pathway", "tracks", "optim", "loss", "ensemble")


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def config_to_flat(cfg):
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sf in fields(v):
                out[f"{f.name}.{sf.name}"] = _jsonable(getattr(v, sf.name))
        else:
            out[f.name] = _jsonable(v)
    return out


def config_from_flat(flat):
    defaults = config_to_flat(ExperimentConfig())
    unknown = sorted(set(flat) - set(defaults))
    if unknown:
        raise KeyError(f"unknown config keys: {', '.join(unknown)}")
    merged = {**defaults, **flat}
    top, sections = {}, {s: {} for s in _SECTIONS}
    for key, value in merged.items():
        if "." in key:
            sec, name = key.split(".", 1)
            sections[sec][name] = tuple(value) if isinstance(value, list) else value
        else:
            top[key] = value
    types = {f.name: f.default_factory for f in fields(ExperimentConfig) if f.name in _SECTIONS}
    built = {s: type(types[s]())(**sections[s]) for s in _SECTIONS}
    return ExperimentConfig(**top, **built)


def parse_value(text):
    """JSON value, falling back to a bare string (so ``mode = A+M`` works)."""
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def dumps_config(cfg):
    lines = [f"{k} = {json.dumps(v)}" for k, v in cfg.to_flat().items()]
    return "\n".join(lines) + "\n"


def loads_config(text, source="<config>"):
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        flat[key.strip()] = parse_value(value)
    try:
        return config_from_flat(flat)
    except (KeyError, TypeError, ValueError) as exc:
        msg = exc.args[0] if exc.args else str(exc)
        raise ValueError(f"{source}: {msg}") from None


def load_config(path, overrides=()):
    """Read a config file (or defaults when ``path`` is None) and apply ``key=value`` overrides."""
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path) as fh:
            cfg = loads_config(fh.read(), path)
    else:
        cfg = ExperimentConfig()
    if overrides:
        flat = cfg.to_flat()
        for item in overrides:
            if "=" not in item:
                raise ValueError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            flat[key.strip()] = parse_value(value)
        cfg = config_from_flat(flat)
    return cfg


# -- seeding and data ----------------------------------------------------------

def seed_streams(seed):
    """Root seed -> (data seed, model seed)."""
    data_ss, model_ss = np.random.SeedSequence(int(seed)).spawn(2)
    return int(data_ss.generate_state(1)[0]), int(model_ss.generate_state(1)[0])


@dataclass
class Dataset:
    videos: np.ndarray
    tracks: np.ndarray
    labels: np.ndarray
    ids: list
    num_classes: int

    def X(self):
        return self.videos, self.tracks

    def __len__(self):
        return len(self.labels)


def _render_cfg(dc):
    return synth.RenderConfig(frames=dc.frames, height=dc.height, width=dc.width)


def _object_tensors(track_lists, dc):
    return np.stack([build_object_tensor(dets, dc.frames, dc.num_slots).values for dets in track_lists])


def _records(cfg):
    dc = cfg.data
    data_seed, _ = seed_streams(cfg.seed)
    vocab = synth.Vocabulary()
    if dc.source == "synthetic":
        split = synth.make_split(vocab, dc.split_seed)
        return synth.generate_dataset(vocab, split, dc.n_per_pair, data_seed, dc.n_test_per_pair), data_seed
    if dc.source == "manifest":
        if not dc.manifest or not os.path.exists(dc.manifest):
            raise FileNotFoundError(f"manifest not found: {dc.manifest or '<unset>'}")
        return synth.read_manifest(dc.manifest), data_seed
    raise ValueError(f"unknown data.source {dc.source!r}")


def _round_robin(records):
    """Reorder so each (verb, noun) pair contributes its k-th record before any pair's (k+1)-th."""
    seen = {}
    keyed = []
    for pos, r in enumerate(records):
        k = seen.get((r.verb, r.noun), 0)
        seen[(r.verb, r.noun)] = k + 1
        keyed.append((k, pos, r))
    return [r for _, _, r in sorted(keyed, key=lambda x: x[:2])]


_CACHE = {}


def _data_key(cfg):
    flat = cfg.to_flat()
    return json.dumps({k: v for k, v in flat.items() if k.startswith("data.")} | {"seed": cfg.seed},
                      sort_keys=True)


def build_datasets(cfg):
    """(train, test) datasets for ``cfg``; the most recent result is cached in memory.

    Synthetic records are rendered from their seeds. With ``data.video_dir``
    set, clips are read as raw tensors named ``<sample_id>.bin`` instead, and
    tracks come from ``data.track_file`` (no tracks if unset).
    """
    key = _data_key(cfg)
    if key in _CACHE:
        return _CACHE[key]
    dc = cfg.data
    records, data_seed = _records(cfg)
    if dc.track_file and not os.path.exists(dc.track_file):
        raise FileNotFoundError(f"track file not found: {dc.track_file}")
    if dc.video_dir and not os.path.isdir(dc.video_dir):
        raise FileNotFoundError(f"video directory not found: {dc.video_dir}")
    track_map = read_track_file(dc.track_file) if dc.track_file else None
    rcfg = _render_cfg(dc)
    K = len(synth.Vocabulary().verbs)
    out = []
    for name in ("train", "test"):
        recs = [r for r in records if r.split == name]
        if name == "train" and dc.max_train is not None:
            recs = _round_robin(recs)[:dc.max_train]
        if not recs:
            raise ValueError(f"no {name} records in dataset")
        if dc.video_dir:
            videos = np.stack([synth.read_raw_tensor(os.path.join(dc.video_dir, f"{r.sample_id}.bin"))
                               for r in recs])
            track_lists = None
        else:
            samples = [synth.render_sample(r.verb, r.noun, r.seed, rcfg) for r in recs]
            videos = np.stack([s.video for s in samples])
            track_lists = [s.tracks for s in samples]
        if track_map is not None:
            track_lists = [track_map.get(r.sample_id, []) for r in recs]
        tracks = None
        if track_lists is not None:
            if dc.track_noise:
                # jitter is drawn from the data stream, so every mode sees the same noisy tracks
                track_lists = [synth.jitter_tracks(t, dc.sigma_pos, dc.p_drop, seed=[data_seed, r.seed, 3])
                               for t, r in zip(track_lists, recs)]
            tracks = _object_tensors(track_lists, dc)
        out.append(Dataset(videos, tracks, np.array([r.verb for r in recs]), [r.sample_id for r in recs], K))
    train, test = out
    if dc.test_on_train:
        test = train
    _CACHE.clear()
    _CACHE[key] = (train, test)
    return train, test


# -- training and evaluation ---------------------------------------------------

def make_classifier(cfg, mode=None):
    _, model_seed = seed_streams(cfg.seed)
    o = cfg.optim
    return InteractionClassifier(
        mode=mode or cfg.mode, pathway=cfg.pathway, track_encoder=cfg.tracks,
        lambda_rgb=cfg.loss.lambda_rgb, lambda_obj=cfg.loss.lambda_obj, lr=o.lr,
        momentum=o.momentum, weight_decay=o.weight_decay, max_grad_norm=o.max_grad_norm, epochs=o.epochs,
        batch_size=o.batch_size, schedule=o.schedule, precision=cfg.precision,
        random_state=model_seed, target_train_accuracy=o.target_train_accuracy,
        check_every=o.check_every)


def _check_modality(mode, dataset):
    spec = mode_spec(mode)
    if spec.objects and dataset.tracks is None:
        raise ValueError(f"mode {mode} needs object tracks but the dataset has none (set data.track_file)")


def evaluate(model, dataset):
    logits = model.decision_function(dataset.X())
    labels = np.searchsorted(model.classes_, dataset.labels)
    if not np.array_equal(model.classes_[labels], dataset.labels):
        raise ValueError("test labels contain classes unseen in training")
    return compute_metrics(logits, labels), logits


def write_metrics(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("metric", "value"))
        w.writerows(report.rows())


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return dict(rows)


def _write_run(cfg, report, model=None):
    if not cfg.out_dir:
        return
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.txt"), "w") as fh:
        fh.write(dumps_config(cfg))
    write_metrics(os.path.join(cfg.out_dir, "metrics.csv"), report)
    with open(os.path.join(cfg.out_dir, "timing.csv"), "w") as fh:
        fh.write(f"metric,value\nwall_clock_seconds,{report.wall_clock:.3f}\n")
    if model is not None:
        save_checkpoint(os.path.join(cfg.out_dir, "model.ckpt"), model, cfg)


def train_model(cfg, mode=None, train=None):
    mode = mode or cfg.mode
    if train is None:
        train, _ = build_datasets(cfg)
    _check_modality(mode, train)
    model = make_classifier(cfg, mode)
    model.fit(train.X(), train.labels)
    return model


def run_experiment(cfg):
    """Train ``cfg.mode`` on the train split, evaluate on the test split, write artifacts."""
    start = time.perf_counter()
    train, test = build_datasets(cfg)
    if cfg.mode == ENSEMBLE:
        members = [train_model(cfg, m, train) for m in cfg.ensemble.members]
        report = ensemble_predict(members, test)
        report.loss_curve = [x for m in members for x in m.loss_curve_]
        report.param_count = sum(m.net_.num_parameters() for m in members)
        model = None
        if cfg.out_dir:
            for m in members:
                os.makedirs(cfg.out_dir, exist_ok=True)
                save_checkpoint(os.path.join(cfg.out_dir, f"model-{_slug(m.mode)}.ckpt"), m,
                                cfg.replace(mode=m.mode))
    else:
        model = train_model(cfg, cfg.mode, train)
        report, _ = evaluate(model, test)
        report.loss_curve = list(model.loss_curve_)
        report.param_count = model.net_.num_parameters()
    report.wall_clock = time.perf_counter() - start
    _write_run(cfg, report, model)
    log.info("%s seed %d: top1 %.4f", cfg.mode, cfg.seed, report.top1)
    return report


def _slug(mode):
    return "".join(c if c.isalnum() else "_" for c in mode).strip("_")


MATRIX_FIELDS = ("mode", "seeds", "top1_mean", "top1_min", "top1_max", "top5_mean",
                 "macro_mean", "macro_min", "macro_max", "param_count")


def run_matrix(base_cfg, modes, seeds, table_path=None):
    """Run every (mode, seed) cell; return rows of mean and range per mode, in ``modes`` order.

    Cells run sequentially seed-major so each seed's dataset is generated once.
    The comma-delimited table is written to ``table_path`` (default
    ``<out_dir>/matrix.csv`` when ``out_dir`` is set).
    """
    if not modes or not seeds:
        raise ValueError("run_matrix needs at least one mode and one seed")
    modes = [m if m == ENSEMBLE else canonical_mode(m) for m in modes]
    results = {m: [] for m in modes}
    for seed in seeds:
        for mode in modes:
            out = os.path.join(base_cfg.out_dir, _slug(mode), f"seed{seed}") if base_cfg.out_dir else ""
            cfg = base_cfg.replace(mode=mode, seed=int(seed), out_dir=out)
            results[mode].append(run_experiment(cfg))
    rows = []
    for mode in modes:
        reps = results[mode]
        top1 = np.array([r.top1 for r in reps])
        macro = np.array([r.macro for r in reps])
        rows.append({
            "mode": mode, "seeds": len(reps),
            "top1_mean": float(top1.mean()), "top1_min": float(top1.min()), "top1_max": float(top1.max()),
            "top5_mean": float(np.mean([r.top5 for r in reps])),
            "macro_mean": float(macro.mean()), "macro_min": float(macro.min()), "macro_max": float(macro.max()),
            "param_count": reps[0].param_count,
        })
    if table_path is None and base_cfg.out_dir:
        os.makedirs(base_cfg.out_dir, exist_ok=True)
        table_path = os.path.join(base_cfg.out_dir, "matrix.csv")
    if table_path:
        with open(table_path, "w") as fh:
            fh.write(format_table(rows))
    return rows


def format_table(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MATRIX_FIELDS)
    for r in rows:
        w.writerow([r[k] if not isinstance(r[k], float) else f"{r[k]:.6f}" for k in MATRIX_FIELDS])
    return buf.getvalue()


# -- ensembles -------------------------------------------------------------------

def ensemble_predict(models, dataset):
    """Average member softmax probabilities, then score. ``models`` are fitted classifiers or checkpoint paths."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    members = [load_checkpoint(m)[0] if isinstance(m, (str, os.PathLike)) else m for m in models]
    classes = members[0].classes_
    for m in members[1:]:
        if len(m.classes_) != len(classes) or not np.array_equal(m.classes_, classes):
            raise ValueError(f"class mismatch: {len(classes)} vs {len(m.classes_)} classes")
    probs = np.mean([m.predict_proba(dataset.X()) for m in members], axis=0)
    labels = np.searchsorted(classes, dataset.labels)
    return compute_metrics(probs, labels)


# -- checkpoints ------------------------------------------------------------------

MAGIC = b"MGAFCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, cfg=None):
    """Versioned container: magic, uint32 version, uint64 header length, JSON header, raw tensors.

    Tensors are stored little-endian, in the model's precision and in header order.
    """
    named = list(model.net_.named_parameters().items())
    dtype = np.dtype(named[0][1].data.dtype).newbyteorder("<")
    header = {
        "config": (cfg or ExperimentConfig(mode=model.mode)).to_flat(),
        "mode": canonical_mode(model.mode),
        "classes": [_jsonable(c) for c in model.classes_.tolist()],
        "dtype": dtype.str,
        "params": [[name, list(p.shape)] for name, p in named],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, p in named:
            fh.write(np.ascontiguousarray(p.data, dtype=dtype).tobytes())


def load_checkpoint(path):
    """Return ``(classifier, config)``; parameter names must match the config's network exactly."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        header = json.loads(fh.read(hlen))
        payload = fh.read()
    cfg = config_from_flat(header["config"])
    if cfg.mode == ENSEMBLE:
        cfg = cfg.replace(mode=header["mode"])
    model = make_classifier(cfg, header["mode"])
    model.classes_ = np.array(header["classes"])
    model.net_ = model._build(len(model.classes_))
    dtype = np.dtype(header["dtype"])
    expected = dict(model.net_.named_parameters())
    stored = [(name, tuple(shape)) for name, shape in header["params"]]
    missing = sorted(set(expected) - {n for n, _ in stored})
    extra = sorted({n for n, _ in stored} - set(expected))
    if missing or extra:
        parts = []
        if missing:
            parts.append("missing parameters: " + ", ".join(missing))
        if extra:
            parts.append("unexpected parameters: " + ", ".join(extra))
        raise CheckpointError(f"{path}: " + "; ".join(parts))
    offset = 0
    for name, shape in stored:
        p = expected[name]
        if tuple(p.shape) != shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {shape}, model expects {tuple(p.shape)}")
        n = int(np.prod(shape)) * dtype.itemsize
        if offset + n > len(payload):
            raise CheckpointError(f"{path}: truncated data for parameter {name}")
        p.data = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape) \
            .astype(dtype.newbyteorder("="), copy=True)
        offset += n
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes")
    model.precision = "single" if dtype.itemsize == 4 else "double"
    model.loss_curve_ = []
    model.n_epochs_ = 0
    return model, cfg


def parameter_report(cfg):
    """Analytic vs enumerated parameter counts for each mode."""
    from .pathways import DualPathwayNet
    rows = []
    for mode in MODES:
        net = DualPathwayNet(cfg.pathway, cfg.tracks, mode, seed=0)
        rows.append((mode, count_parameters(cfg.pathway, cfg.tracks, mode), net.num_parameters()))
    return rows
