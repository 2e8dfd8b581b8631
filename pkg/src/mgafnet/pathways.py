"""Appearance and motion video pathways, lateral fusion, heads and the joint loss.

A network is assembled for one of the ablation modes in :data:`MODES`; every
mode shares parameter names with the others, so modes built from the same
seed start from identical shared weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tracks as track_model
from .autograd import (Module, Tensor, concat, conv_spatial, conv_temporal, cross_entropy,
                       default_dtype, layer_norm, matmul, pool, relu)
from .autograd.module import Init, ones, zeros
from .fusion import MgafWeights, mgaf_forward
from .tracks import TrackEncoder, TrackEncoderConfig

MODES = (
    "A", "M", "A+M",
    "O", "Concat(A,O)", "Concat(A+M,O)",
    "MGAF(A,O)", "MGAF(M,O)", "M+MGAF(A,O)", "A+MGAF(M,O)",
)


@dataclass(frozen=True)
class ModeSpec:
    appearance: bool
    motion: bool
    objects: bool
    fusion: str = "none"  # none | concat | mgaf
    host: Optional[str] = None  # pathway carrying MGAF blocks: "A" or "M"

    @property
    def rgb(self):
        return self.appearance or self.motion

    @property
    def laterals(self):
        return self.appearance and self.motion


_SPECS = {
    "A": ModeSpec(True, False, False),
    "M": ModeSpec(False, True, False),
    "A+M": ModeSpec(True, True, False),
    "O": ModeSpec(False, False, True),
    "Concat(A,O)": ModeSpec(True, False, True, "concat"),
    "Concat(A+M,O)": ModeSpec(True, True, True, "concat"),
    "MGAF(A,O)": ModeSpec(True, False, True, "mgaf", "A"),
    "MGAF(M,O)": ModeSpec(False, True, True, "mgaf", "M"),
    "M+MGAF(A,O)": ModeSpec(True, True, True, "mgaf", "A"),
    "A+MGAF(M,O)": ModeSpec(True, True, True, "mgaf", "M"),
}


def canonical_mode(name):
    """Normalise spelling: case, spaces and an optional trailing ' only'."""
    key = name.strip()
    if key.lower().endswith(" only"):
        key = key[:-5]
    key = key.replace(" ", "")
    for mode in MODES:
        if mode.lower() == key.lower():
            return mode
    raise ValueError(f"unknown mode {name!r}; choose from {', '.join(MODES)}")


def mode_spec(name):
    return _SPECS[canonical_mode(name)]


@dataclass
class PathwayConfig:
    frames_appearance: int = 4
    rate_ratio: int = 8
    channel_ratio: float = 0.125
    stage_widths: tuple = (32, 64)
    blocks_per_stage: int = 2
    temporal_kernel: int = 3
    spatial_kernel: int = 3
    stem_stride: int = 2
    lateral_kernel: int = 5
    mgaf_sites: Optional[tuple] = None
    attention_width: Optional[int] = None
    num_classes: int = 6
    in_channels: int = 3

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        if self.mgaf_sites is not None:
            self.mgaf_sites = tuple(int(s) for s in self.mgaf_sites)
        if int(self.rate_ratio) != self.rate_ratio or self.rate_ratio < 1:
            raise ValueError("rate_ratio must be an integer >= 1")
        for w in self.stage_widths:
            m = w * self.channel_ratio
            if m != int(m) or m < 1:
                raise ValueError(f"channel_ratio {self.channel_ratio} gives non-integral width for {w}")
        for k in (self.temporal_kernel, self.spatial_kernel, self.lateral_kernel):
            if k % 2 == 0:
                raise ValueError("kernel sizes must be odd")
        if self.mgaf_sites is not None:
            bad = [s for s in self.mgaf_sites if not 0 <= s < self.num_blocks]
            if bad:
                raise ValueError(f"mgaf_sites {bad} outside block range [0, {self.num_blocks})")

    @property
    def motion_widths(self):
        return tuple(int(w * self.channel_ratio) for w in self.stage_widths)

    @property
    def frames_motion(self):
        return self.rate_ratio * self.frames_appearance

    @property
    def num_blocks(self):
        return len(self.stage_widths) * self.blocks_per_stage

    def sites(self):
        return tuple(range(self.num_blocks)) if self.mgaf_sites is None else self.mgaf_sites


# -- frame sampling ------------------------------------------------------------

def frame_indices(T, cfg, offset=0):
    """Appearance and motion frame indices for a clip of ``T`` frames."""
    stride_m = max(1, T // cfg.frames_motion)
    span = (cfg.frames_motion - 1) * stride_m + 1
    if T < span:
        raise ValueError(f"clip of {T} frames too short for {cfg.frames_motion} motion frames")
    if not 0 <= offset <= T - span:
        raise ValueError(f"offset {offset} outside [0, {T - span}]")
    motion = offset + stride_m * np.arange(cfg.frames_motion)
    appearance = offset + stride_m * cfg.rate_ratio * np.arange(cfg.frames_appearance)
    return appearance, motion


def sample_frames(video, pathway, cfg, train=False, rng=None):
    """Uniform-stride subsample of ``video`` (``..., T, H, W, C``) for one pathway.

    Eval mode always starts at frame 0; train mode draws a random start among
    the offsets that keep the motion window inside the clip.
    """
    data = video.data if isinstance(video, Tensor) else np.asarray(video)
    T = data.shape[-4]
    offset = 0
    if train:
        stride_m = max(1, T // cfg.frames_motion)
        slack = T - ((cfg.frames_motion - 1) * stride_m + 1)
        rng = rng if rng is not None else np.random.default_rng()
        offset = int(rng.integers(0, slack + 1)) if slack > 0 else 0
    app, mot = frame_indices(T, cfg, offset)
    idx = {"appearance": app, "motion": mot}[pathway]
    return Tensor(np.take(data, idx, axis=-4))


# -- building blocks -----------------------------------------------------------

def frame_norm(x, gain, bias):
    """Layer norm over each frame's full ``H x W x C`` map, per-channel affine.

    Normalising per pixel instead lets the uniform background dominate the
    pooled features and clips become nearly indistinguishable.
    """
    return layer_norm(x, gain, bias, axis=(-3, -2, -1))


class ConvNormAct(Module):
    """Spatial conv -> layer norm (channels) -> ReLU."""

    def __init__(self, init, name, cin, cout, k, stride):
        self.stride = stride
        self.w = init.he(f"{name}.w", (k, k, cin, cout), k * k * cin)
        self.b = zeros(cout)
        self.ln_gain = ones(cout)
        self.ln_bias = zeros(cout)

    def forward(self, x):
        return relu(frame_norm(conv_spatial(x, self.w, self.b, self.stride), self.ln_gain, self.ln_bias))


class ResidualBlock(Module):
    """Temporal conv then spatial conv, each followed by layer norm + ReLU, plus identity.

    With ``mgaf`` set, the temporal-conv output is gated by object features
    before the spatial conv.
    """

    def __init__(self, init, name, channels, t, k, mgaf=None):
        self.conv_f = init.he(f"{name}.conv_f", (t, channels, channels), t * channels)
        self.bias_f = zeros(channels)
        self.ln_f_gain = ones(channels)
        self.ln_f_bias = zeros(channels)
        self.conv_g = init.he(f"{name}.conv_g", (k, k, channels, channels), k * k * channels)
        self.bias_g = zeros(channels)
        self.ln_g_gain = ones(channels)
        self.ln_g_bias = zeros(channels)
        self.mgaf = mgaf

    def forward(self, x, U=None, diagnostics=None):
        f = relu(frame_norm(conv_temporal(x, self.conv_f, self.bias_f, axis=-4), self.ln_f_gain, self.ln_f_bias))
        if self.mgaf is not None:
            if U is None:
                raise ValueError("fused block needs object features")
            f = mgaf_forward(f, U, self.mgaf, diagnostics)
        g = relu(frame_norm(conv_spatial(f, self.conv_g, self.bias_g), self.ln_g_gain, self.ln_g_bias))
        return x + g


def motion_block(M_prev, block):
    """Plain residual block (no fusion)."""
    return block.forward(M_prev)


def motion_block_fused(M_prev, U, block):
    return block.forward(M_prev, U)


class Lateral(Module):
    """Time-strided temporal conv carrying motion features into the appearance rate."""

    def __init__(self, init, name, channels, kernel, stride):
        self.stride = stride
        self.kernel = kernel
        self.w = init.he(f"{name}.w", (kernel, channels, 2 * channels), kernel * channels)
        self.b = zeros(2 * channels)

    def forward(self, x, frames_out):
        T = x.shape[-4]
        if T != self.stride * frames_out:
            raise ValueError(f"lateral rate mismatch: {T} motion frames vs {frames_out} x {self.stride}")
        return conv_temporal(x, self.w, self.b, stride=self.stride, axis=-4, padding=self.kernel // 2)


def lateral_fuse(motion_stage, lateral, frames_appearance):
    return lateral.forward(motion_stage, frames_appearance)


class Pathway(Module):
    """Stem, then stages of (entry conv, residual blocks), then global average pool.

    Stage 0's entry is a 1x1 projection; later entries downsample 2x with a
    k x k conv. Lateral inputs are concatenated on the channel axis at stage
    entries.
    """

    def __init__(self, init, name, cfg, widths, lateral_channels=None, mgaf_sites=(),
                 object_widths=None):
        k, t = cfg.spatial_kernel, cfg.temporal_kernel
        lateral_channels = lateral_channels or [0] * len(widths)
        self.stem = ConvNormAct(init, f"{name}.stem", cfg.in_channels, widths[0], k, cfg.stem_stride)
        self.entries = []
        self.blocks = []
        prev = widths[0]
        index = 0
        for s, w in enumerate(widths):
            ke, stride = (1, 1) if s == 0 else (k, 2)
            self.entries.append(ConvNormAct(init, f"{name}.entries.{s}", prev + lateral_channels[s], w, ke, stride))
            stage = []
            for b in range(cfg.blocks_per_stage):
                mg = None
                if index in mgaf_sites:
                    level = min(index, len(object_widths) - 1)
                    mg = MgafWeights(w, object_widths[level], cfg.attention_width, init,
                                     f"{name}.blocks.{s}.{b}.mgaf")
                stage.append(ResidualBlock(init, f"{name}.blocks.{s}.{b}", w, t, k, mg))
                index += 1
            self.blocks.append(stage)
            prev = w

    def forward(self, x, laterals=None, object_levels=None, diagnostics=None):
        """Return (pooled vector, list of stage-entry inputs)."""
        h = self.stem.forward(x)
        entry_inputs = []
        index = 0
        for s, (entry, stage) in enumerate(zip(self.entries, self.blocks)):
            entry_inputs.append(h)
            if laterals is not None:
                h = concat([h, laterals[s]], axis=-1)
            h = entry.forward(h)
            for block in stage:
                U = None
                if block.mgaf is not None:
                    U = object_levels[min(index, len(object_levels) - 1)]
                site = {} if diagnostics is not None and block.mgaf is not None else None
                h = block.forward(h, U, site)
                if site:
                    diagnostics[f"block{index}"] = site
                index += 1
        pooled = pool(h, "global_avg", keep_axes=h.ndim - 4)
        return pooled, entry_inputs


def appearance_forward(x_a, pathway, laterals=None):
    return pathway.forward(x_a, laterals)[0]


# -- full network ----------------------------------------------------------------

@dataclass
class DualOutput:
    logits_rgb: Optional[Tensor]
    logits_obj: Optional[Tensor]
    diagnostics: dict = field(default_factory=dict)

    def logits(self):
        """Prediction logits: the RGB head when present, else the object head."""
        return self.logits_rgb if self.logits_rgb is not None else self.logits_obj


class DualPathwayNet(Module):
    def __init__(self, cfg=None, track_cfg=None, mode="A+MGAF(M,O)", seed=0):
        self.cfg = cfg = cfg or PathwayConfig()
        self.track_cfg = track_cfg = track_cfg or TrackEncoderConfig(num_classes=cfg.num_classes)
        if track_cfg.num_classes != cfg.num_classes:
            raise ValueError("pathway and track encoder disagree on the class count")
        self.mode = canonical_mode(mode)
        spec = self.spec = mode_spec(self.mode)
        init = Init(seed)
        object_widths = (track_cfg.in_dim,) + track_cfg.channels
        sites = cfg.sites() if spec.fusion == "mgaf" else ()
        aw, mw = cfg.stage_widths, cfg.motion_widths

        if spec.objects:
            self.tracks = TrackEncoder(track_cfg, init, "tracks")
        if spec.motion:
            self.motion = Pathway(init, "motion", cfg, mw, mgaf_sites=sites if spec.host == "M" else (),
                                  object_widths=object_widths)
        if spec.laterals:
            lat_in = [mw[0]] + list(mw[:-1])
            self.laterals = [Lateral(init, f"laterals.{s}", c, cfg.lateral_kernel, cfg.rate_ratio)
                             for s, c in enumerate(lat_in)]
            lat_ch = [2 * c for c in lat_in]
        else:
            lat_ch = None
        if spec.appearance:
            self.appearance = Pathway(init, "appearance", cfg, aw, lat_ch,
                                      mgaf_sites=sites if spec.host == "A" else (),
                                      object_widths=object_widths)
        if spec.rgb:
            dim = (aw[-1] if spec.appearance else 0) + (mw[-1] if spec.motion else 0)
            if spec.fusion == "concat":
                dim += track_cfg.channels[-1]
            self.head_w = init.xavier("head_w", (dim, cfg.num_classes), dim, cfg.num_classes,
                                      gain=track_model.HEAD_GAIN)
            self.head_b = zeros(cfg.num_classes)

    def forward(self, video, z=None, train=False, rng=None, diagnostics=False):
        spec, cfg = self.spec, self.cfg
        dtype = default_dtype()
        diag = {} if diagnostics else None
        if video is None:
            if spec.rgb:
                raise ValueError(f"mode {self.mode} needs video input")
            vdata = None
            zd0 = z.values if isinstance(z, track_model.ObjectTensor) else getattr(z, "data", z)
            single = np.ndim(zd0) == 2
        else:
            vdata = video.data if isinstance(video, Tensor) else np.asarray(video)
            single = vdata.ndim == 4
            if single:
                vdata = vdata[None]
        app_idx = mot_idx = None
        if spec.rgb:
            T = vdata.shape[1]
            offset = 0
            if train:
                stride_m = max(1, T // cfg.frames_motion)
                slack = T - ((cfg.frames_motion - 1) * stride_m + 1)
                if slack > 0:
                    offset = int((rng or np.random.default_rng()).integers(0, slack + 1))
            app_idx, mot_idx = frame_indices(T, cfg, offset)

        logits_obj = None
        object_levels = None
        pooled_obj = None
        if spec.objects:
            if z is None:
                raise ValueError(f"mode {self.mode} needs object tracks")
            zd = z.values if isinstance(z, track_model.ObjectTensor) else (z.data if isinstance(z, Tensor) else np.asarray(z))
            if single:
                zd = zd[None]
            if mot_idx is not None and zd.shape[1] == vdata.shape[1]:
                zd = zd[:, mot_idx]
            zt = Tensor(zd.astype(dtype, copy=False))
            feats = self.tracks.features(zt)
            logits_obj, pooled_obj = self.tracks.head(feats[-1])
            object_levels = [zt] + feats

        logits_rgb = None
        if spec.rgb:
            pooled = []
            laterals = None
            if spec.motion:
                xm = Tensor(vdata[:, mot_idx].astype(dtype, copy=False))
                pm, motion_inputs = self.motion.forward(
                    xm, object_levels=object_levels if spec.host == "M" else None,
                    diagnostics=diag)
                if spec.laterals:
                    laterals = [lat.forward(h, cfg.frames_appearance)
                                for lat, h in zip(self.laterals, motion_inputs)]
            if spec.appearance:
                xa = Tensor(vdata[:, app_idx].astype(dtype, copy=False))
                pa, _ = self.appearance.forward(
                    xa, laterals, object_levels=object_levels if spec.host == "A" else None,
                    diagnostics=diag)
                pooled.append(pa)
            if spec.motion:
                pooled.append(pm)
            if spec.fusion == "concat":
                pooled.append(pooled_obj)
            feat = pooled[0] if len(pooled) == 1 else concat(pooled, axis=-1)
            logits_rgb = matmul(feat, self.head_w) + self.head_b

        if single:
            k = cfg.num_classes
            logits_rgb = logits_rgb.reshape(k) if logits_rgb is not None else None
            logits_obj = logits_obj.reshape(k) if logits_obj is not None else None
        return DualOutput(logits_rgb, logits_obj, diag or {})


def dual_forward(video, tracks, net, train=False, rng=None):
    return net.forward(video, tracks, train=train, rng=rng)


def joint_loss(out, labels, lambda_rgb=1.0, lambda_obj=1.0):
    """``lambda_rgb * CE(rgb head) + lambda_obj * CE(object head)``; absent heads add nothing."""
    if out.logits_rgb is None and out.logits_obj is None:
        raise ValueError("joint_loss: both heads are missing")
    labels = np.atleast_1d(np.asarray(labels))
    terms = []
    for logits, lam in ((out.logits_rgb, lambda_rgb), (out.logits_obj, lambda_obj)):
        if logits is None:
            continue
        lg = logits.reshape(1, -1) if logits.ndim == 1 else logits
        terms.append(cross_entropy(lg, labels) * lam)
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss


# -- analytic parameter count ----------------------------------------------------

def _pathway_count(cfg, widths, lateral_channels, sites, object_widths):
    k, t = cfg.spatial_kernel, cfg.temporal_kernel
    conv_norm = lambda cin, cout, ke: ke * ke * cin * cout + cout + 2 * cout  # noqa: E731
    n = conv_norm(cfg.in_channels, widths[0], k)
    prev = widths[0]
    index = 0
    for s, w in enumerate(widths):
        n += conv_norm(prev + lateral_channels[s], w, 1 if s == 0 else k)
        for _ in range(cfg.blocks_per_stage):
            n += t * w * w + 3 * w + k * k * w * w + 3 * w
            if index in sites:
                cu = object_widths[min(index, len(object_widths) - 1)]
                c = cfg.attention_width or min(w, cu)
                n += w * c + cu * c + c * w + 2 * c
            index += 1
        prev = w
    return n


def count_parameters(cfg, track_cfg, mode):
    """Closed-form parameter count of ``DualPathwayNet(cfg, track_cfg, mode)``."""
    spec = mode_spec(mode)
    object_widths = (track_cfg.in_dim,) + track_cfg.channels
    sites = cfg.sites() if spec.fusion == "mgaf" else ()
    aw, mw = cfg.stage_widths, cfg.motion_widths
    n = 0
    if spec.objects:
        n += track_model.count_parameters(track_cfg)
    lat = [0] * len(aw)
    if spec.laterals:
        lat_in = [mw[0]] + list(mw[:-1])
        n += sum(cfg.lateral_kernel * c * 2 * c + 2 * c for c in lat_in)
        lat = [2 * c for c in lat_in]
    if spec.motion:
        n += _pathway_count(cfg, mw, [0] * len(mw), sites if spec.host == "M" else (), object_widths)
    if spec.appearance:
        n += _pathway_count(cfg, aw, lat, sites if spec.host == "A" else (), object_widths)
    if spec.rgb:
        dim = (aw[-1] if spec.appearance else 0) + (mw[-1] if spec.motion else 0)
        if spec.fusion == "concat":
            dim += track_cfg.channels[-1]
        n += dim * cfg.num_classes + cfg.num_classes
    return n
