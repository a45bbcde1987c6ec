"""LogLoss, Inverse Dual Loss and the T-CE / R-CE denoising baselines.

All functions take clamped probabilities, never logits. Gradients are handled
by :mod:`invlearn.model`; the helpers named ``*_weights`` turn each loss into
the per-instance ``(w_pos, w_neg)`` pair the model's weighted LogLoss expects,
with the weights held constant.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from invlearn.errors import ConfigError, EmptyInputError, NumericError
from invlearn.model import EPS

METHODS = ("none", "ns", "tce", "rce", "idl", "ig")


class DualWeights(NamedTuple):
    w_pos: np.ndarray
    w_neg: np.ndarray


@dataclass
class DenoiseConfig:
    method: str = "ig"
    tce_max_drop: float = 0.1
    tce_warmup_steps: int = 10_000
    rce_beta: float = 0.25

    def __post_init__(self):
        self.method = self.method.lower().replace("-", "")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not 0 <= self.tce_max_drop <= 0.5:
            raise ConfigError("tce_max_drop must lie in [0, 0.5]")
        if self.tce_warmup_steps < 0:
            raise ConfigError("tce_warmup_steps must be >= 0")
        if self.rce_beta < 0:
            raise ConfigError("rce_beta must be >= 0")


def _check_probs(pred) -> np.ndarray:
    p = np.asarray(pred, dtype=float)
    if not np.all((p >= EPS) & (p <= 1 - EPS)):
        raise NumericError(f"predictions must lie in [{EPS}, 1 - {EPS}]")
    return p


def logloss(pred, label):
    """Binary cross-entropy ``-(y log p + (1 - y) log(1 - p))``, elementwise."""
    p = _check_probs(pred)
    y = np.asarray(label, dtype=float)
    out = -(y * np.log(p) + (1 - y) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def dual_weights(pred) -> DualWeights:
    """Soft annotation of an unlabeled pair from its two one-sided losses.

    With ``a = l(p, 1)`` and ``b = l(p, 0)`` the positive weight is
    ``b^2 / (a^2 + b^2)`` and the negative weight ``a^2 / (a^2 + b^2)``:
    the label whose loss is smaller receives the larger weight.
    """
    p = _check_probs(pred)
    a = -np.log(p)
    b = -np.log1p(-p)
    a2, b2 = a * a, b * b
    s = a2 + b2
    return DualWeights(b2 / s, a2 / s)


def dual_weights_ratio_form(pred) -> DualWeights:
    """Same weights computed literally as ratios with the ``b/a + a/b`` normaliser.

    Kept as an independent cross-check of :func:`dual_weights`.
    """
    p = _check_probs(pred)
    a = -np.log(p)
    b = -np.log1p(-p)
    z = b / a + a / b
    return DualWeights(b / (z * a), a / (z * b))


def dual_loss(preds) -> tuple[float, DualWeights]:
    """Mean of ``w_pos * l(p, 1) + w_neg * l(p, 0)`` and the weights used."""
    p = np.asarray(preds, dtype=float).reshape(-1)
    if p.size == 0:
        raise EmptyInputError("dual_loss needs a nonempty batch")
    w = dual_weights(p)
    per = w.w_pos * logloss(p, 1) + w.w_neg * logloss(p, 0)
    return float(np.mean(per)), w


def tce_drop_rate(step: int, cfg: DenoiseConfig) -> float:
    if cfg.tce_warmup_steps == 0:
        return cfg.tce_max_drop
    return cfg.tce_max_drop * min(1.0, step / cfg.tce_warmup_steps)


def tce_weights(preds, labels, step: int, cfg: DenoiseConfig) -> DualWeights:
    """Per-instance weights realising truncated cross-entropy.

    The highest-loss ``drop(step)`` fraction of positives gets weight zero and
    the rest are rescaled so the batch mean equals the mean over kept rows.
    """
    p = np.asarray(preds, dtype=float).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if p.size == 0:
        raise EmptyInputError("truncated_ce needs a nonempty batch")
    keep = np.ones(p.size, dtype=bool)
    pos = np.flatnonzero(y == 1)
    n_drop = int(np.floor(tce_drop_rate(step, cfg) * len(pos) + 1e-9))
    if n_drop:
        pos_loss = logloss(p[pos], 1)
        # stable sort so equal losses drop deterministically
        order = np.argsort(-pos_loss, kind="stable")
        keep[pos[order[:n_drop]]] = False
    scale = p.size / keep.sum()
    w_pos = np.where(keep & (y == 1), scale, 0.0)
    w_neg = np.where(keep & (y == 0), scale, 0.0)
    return DualWeights(w_pos, w_neg)


def truncated_ce(preds, labels, step: int, cfg: DenoiseConfig) -> float:
    p = _check_probs(np.asarray(preds, dtype=float).reshape(-1))
    w = tce_weights(p, labels, step, cfg)
    return float(np.mean(w.w_pos * logloss(p, 1) + w.w_neg * logloss(p, 0)))


def rce_weights(preds, labels, cfg: DenoiseConfig) -> DualWeights:
    """Positives weighted by ``p^beta``, negatives by ``(1 - p)^beta``."""
    p = np.asarray(preds, dtype=float).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    return DualWeights(np.where(y == 1, p**cfg.rce_beta, 0.0),
                       np.where(y == 0, (1 - p) ** cfg.rce_beta, 0.0))


def reweighted_ce(preds, labels, cfg: DenoiseConfig) -> float:
    p = _check_probs(np.asarray(preds, dtype=float).reshape(-1))
    if p.size == 0:
        raise EmptyInputError("reweighted_ce needs a nonempty batch")
    w = rce_weights(p, labels, cfg)
    return float(np.mean(w.w_pos * logloss(p, 1) + w.w_neg * logloss(p, 0)))


WEIGHT_TRACE_HEADER = ["epoch", "step", "pred", "w_pos", "w_neg", "oracle_label"]


def write_weight_trace(path: str | Path, trace: dict[str, np.ndarray]) -> int:
    """Dump the soft-annotation trace; the oracle column is written only when present."""
    has_oracle = trace.get("oracle_label") is not None
    header = WEIGHT_TRACE_HEADER if has_oracle else WEIGHT_TRACE_HEADER[:-1]
    cols = [np.asarray(trace[k]) for k in header]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in zip(*(c.tolist() for c in cols)):
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return len(cols[0]) if cols else 0
