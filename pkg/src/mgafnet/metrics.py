"""Classification metrics: top-k, micro accuracy and macro (mean per-class) recall."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricsReport:
    top1: float
    top5: float
    micro: float
    macro: float
    per_class_recall: list
    n: int
    loss_curve: list = field(default_factory=list)
    param_count: int = 0
    wall_clock: float = 0.0

    def rows(self):
        """Deterministic (key, value) rows; wall-clock is excluded on purpose."""
        out = [
            ("n", str(self.n)),
            ("top1", repr(float(self.top1))),
            ("top5", repr(float(self.top5))),
            ("micro", repr(float(self.micro))),
            ("macro", repr(float(self.macro))),
            ("per_class_recall", ";".join(repr(float(r)) for r in self.per_class_recall)),
            ("param_count", str(self.param_count)),
            ("loss_curve", ";".join(repr(float(x)) for x in self.loss_curve)),
        ]
        return out


def true_class_rank(logits, labels):
    """0-based rank of each true class; ties go to the smaller class index."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    true = logits[np.arange(n), labels][:, None]
    idx = np.arange(k)[None, :]
    better = (logits > true) | ((logits == true) & (idx < labels[:, None]))
    return better.sum(axis=1)


def compute_metrics(logits, labels, k=5):
    logits = np.asarray(getattr(logits, "data", logits), dtype=float)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("compute_metrics needs a non-empty N x K logit matrix")
    n, K = logits.shape
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for {n} predictions")
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    rank = true_class_rank(logits, labels)
    correct = rank == 0
    top1 = float(correct.mean())
    topk = float((rank < min(k, K)).mean())
    recalls = np.full(K, np.nan)
    for c in range(K):
        mask = labels == c
        if mask.any():
            recalls[c] = correct[mask].mean()
    macro = float(np.nanmean(recalls))
    return MetricsReport(top1=top1, top5=topk, micro=top1, macro=macro,
                         per_class_recall=recalls.tolist(), n=n)
