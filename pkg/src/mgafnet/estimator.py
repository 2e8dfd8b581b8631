"""scikit-learn style wrappers around the dual-pathway network."""
from __future__ import annotations

import dataclasses
import logging

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autograd import SGD, backward, no_grad, precision
from .pathways import DualPathwayNet, PathwayConfig, canonical_mode, joint_loss, mode_spec
from .tracks import TrackEncoderConfig, build_object_tensor

log = logging.getLogger(__name__)


class TrackTensorizer(TransformerMixin, BaseEstimator):
    """Turn per-clip detection lists into stacked ``(N, T, 4D)`` object tensors."""

    def __init__(self, frames=32, num_slots=4):
        self.frames = frames
        self.num_slots = num_slots

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.stack([build_object_tensor(dets, self.frames, self.num_slots).values for dets in X])


def check_clips(X, require_tracks=True):
    """Validate model input; returns ``(videos, object_tensors or None)``.

    Accepts a ``(videos, tracks)`` pair, a dict with ``video``/``tracks`` keys,
    or a sequence of synthetic samples (tracks are tensorised with 4 slots).
    """
    if isinstance(X, dict):
        videos, tracks = X.get("video"), X.get("tracks")
    elif isinstance(X, tuple) and len(X) == 2:
        videos, tracks = X
    elif isinstance(X, (list, tuple)) and X and hasattr(X[0], "video"):
        videos = np.stack([s.video for s in X])
        T = videos.shape[1]
        tracks = np.stack([build_object_tensor(s.noisy_tracks if s.noisy_tracks is not None else s.tracks,
                                               T, 4).values for s in X])
    else:
        raise ValueError("X must be (videos, tracks), a dict, or a list of samples")
    if videos is not None:
        videos = np.asarray(videos)
        if videos.ndim != 5:
            raise ValueError(f"videos must be N x T x H x W x C, got shape {videos.shape}")
        if not np.all(np.isfinite(videos)):
            raise ValueError("videos contain NaN or Inf")
    if tracks is not None:
        tracks = np.asarray(tracks, dtype=float)
        if tracks.ndim != 3 or tracks.shape[-1] % 4:
            raise ValueError(f"tracks must be N x T x 4D, got shape {tracks.shape}")
        if videos is not None and tracks.shape[0] != videos.shape[0]:
            raise ValueError(f"{videos.shape[0]} videos but {tracks.shape[0]} track tensors")
    elif require_tracks:
        raise ValueError("this mode needs object tracks")
    if videos is None and tracks is None:
        raise ValueError("no input data")
    return videos, tracks


def _n_samples(videos, tracks):
    return (videos if videos is not None else tracks).shape[0]


def _rows(arr, idx):
    return None if arr is None else arr[idx]


class InteractionClassifier(ClassifierMixin, BaseEstimator):
    """Dual-pathway interaction classifier trained with the joint two-head loss.

    ``mode`` selects one ablation variant (see ``mgafnet.pathways.MODES``).
    ``random_state`` seeds both weight initialisation and mini-batch order.
    ``max_grad_norm`` clips the global gradient norm before each step (None disables).
    """

    def __init__(self, mode="A+MGAF(M,O)", pathway=None, track_encoder=None, lambda_rgb=1.0,
                 lambda_obj=1.0, lr=0.03, momentum=0.9, weight_decay=1e-4, max_grad_norm=5.0,
                 epochs=12, batch_size=16, schedule="cosine", precision="double", random_state=0,
                 target_train_accuracy=None, check_every=5):
        self.mode = mode
        self.pathway = pathway
        self.track_encoder = track_encoder
        self.lambda_rgb = lambda_rgb
        self.lambda_obj = lambda_obj
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.epochs = epochs
        self.batch_size = batch_size
        self.schedule = schedule
        self.precision = precision
        self.random_state = random_state
        self.target_train_accuracy = target_train_accuracy
        self.check_every = check_every

    def _streams(self):
        init_ss, shuffle_ss = np.random.SeedSequence(int(self.random_state)).spawn(2)
        return int(init_ss.generate_state(1)[0]), np.random.default_rng(shuffle_ss)

    def _build(self, n_classes):
        pathway = dataclasses.replace(self.pathway or PathwayConfig(), num_classes=n_classes)
        tcfg = dataclasses.replace(self.track_encoder or TrackEncoderConfig(), num_classes=n_classes)
        init_seed, _ = self._streams()
        with precision(self.precision):
            return DualPathwayNet(pathway, tcfg, self.mode, seed=init_seed)

    def fit(self, X, y):
        spec = mode_spec(self.mode)
        videos, tracks = check_clips(X, require_tracks=spec.objects)
        if spec.rgb and videos is None:
            raise ValueError(f"mode {canonical_mode(self.mode)} needs videos")
        y = np.asarray(y)
        n = _n_samples(videos, tracks)
        if y.shape[0] != n:
            raise ValueError(f"{y.shape[0]} labels for {n} samples")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.net_ = self._build(len(self.classes_))
        _, shuffle = self._streams()
        params = self.net_.parameters()
        opt = SGD(params, self.lr, self.momentum, self.weight_decay, self.max_grad_norm)
        steps_per_epoch = int(np.ceil(n / self.batch_size))
        total = self.epochs * steps_per_epoch
        self.loss_curve_ = []
        self.n_epochs_ = 0
        step = 0
        with precision(self.precision):
            for epoch in range(self.epochs):
                order = shuffle.permutation(n)
                losses, peak = [], 0.0
                for b in range(steps_per_epoch):
                    idx = np.sort(order[b * self.batch_size:(b + 1) * self.batch_size])
                    if self.schedule == "cosine":
                        opt.lr = 0.5 * self.lr * (1 + np.cos(np.pi * step / total))
                    opt.zero_grad()
                    out = self.net_.forward(_rows(videos, idx) if spec.rgb else None,
                                            _rows(tracks, idx), train=True, rng=shuffle)
                    loss = joint_loss(out, y_idx[idx], self.lambda_rgb, self.lambda_obj)
                    backward(loss)
                    opt.step()
                    peak = max(peak, opt.last_grad_norm)
                    losses.append(loss.item() * len(idx))
                    step += 1
                self.loss_curve_.append(sum(losses) / n)
                self.n_epochs_ = epoch + 1
                log.info("epoch %d loss %.4f max grad norm %.3g", epoch + 1, self.loss_curve_[-1], peak)
                if (self.target_train_accuracy is not None and (epoch + 1) % self.check_every == 0
                        and self.score(X, y) >= self.target_train_accuracy):
                    break
        return self

    def decision_function(self, X, batch_size=None):
        check_is_fitted(self, "net_")
        spec = self.net_.spec
        videos, tracks = check_clips(X, require_tracks=spec.objects)
        n = _n_samples(videos, tracks)
        bs = batch_size or max(self.batch_size, 32)
        chunks = []
        with precision(self.precision), no_grad():
            for start in range(0, n, bs):
                idx = np.arange(start, min(n, start + bs))
                out = self.net_.forward(_rows(videos, idx) if spec.rgb else None, _rows(tracks, idx))
                chunks.append(out.logits().data.reshape(len(idx), -1))
        return np.concatenate(chunks)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
