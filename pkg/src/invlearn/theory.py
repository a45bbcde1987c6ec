"""Numerical checks of the direction-ordering theorem and the dual-weight identity.

The theorem concerns logistic regression ``p = sigmoid(theta . x)`` with a
single unlabeled instance ``x_u`` and a single labeled instance ``(x_l, y)``.
Stepping ``theta`` against / along the dual-loss gradient at ``x_u`` moves the
labeled logit by ``-/+ alpha * grad . x_l``; since the labeled LogLoss is
monotone in that logit, the keep loss must sit strictly between the other two.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from invlearn import loss as L
from invlearn.data import derive_seed
from invlearn.errors import ConfigError
from invlearn.model import _sigmoid_clamped

DEGENERATE_TOL = 1e-12
STRICT_TOL = 1e-10
_NS = 0x7E0

_TRIALS, _BATCH, _WEIGHTS = 1, 2, 3


@dataclass
class OrderingReport:
    trials: int
    ascending_count: int  # L(theta_d) < L(theta) < L(theta_i)
    descending_count: int  # L(theta_d) > L(theta) > L(theta_i)
    degenerate_count: int  # |alpha * grad . x_l| below DEGENERATE_TOL
    violations: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BatchOrderingReport:
    """How often the ordering survives when both sides are small batches.

    Measured only: nothing guarantees it beyond one instance per side.
    """

    trials: int
    batch_size: int
    ordered_count: int
    degenerate_count: int

    @property
    def ordered_fraction(self) -> float:
        live = self.trials - self.degenerate_count
        return self.ordered_count / live if live else float("nan")

    def to_dict(self) -> dict:
        return {**asdict(self), "ordered_fraction": self.ordered_fraction}


class WeightIdentityReport(NamedTuple):
    samples: int
    sum_deviation: float  # max |w_pos + w_neg - 1|
    form_deviation: float  # max |closed form - ratio form| over both weights


def labeled_loss(z, y) -> np.ndarray:
    """LogLoss of ``sigmoid(z)`` against ``y`` as ``softplus(-(2y - 1) z)``.

    This form keeps full relative precision when the loss is tiny, which the
    relative strictness test below relies on.
    """
    s = 2.0 * np.asarray(y, dtype=float) - 1.0
    return np.logaddexp(0.0, -s * np.asarray(z, dtype=float))


def strictly_greater(a, b, tol: float = STRICT_TOL) -> np.ndarray:
    """``a > b`` with a margin relative to the larger magnitude."""
    a, b = np.asarray(a), np.asarray(b)
    return a - b > tol * np.maximum(np.abs(a), np.abs(b))


def dual_upstream(z_unlabeled) -> np.ndarray:
    """d(dual loss)/d(logit) with weights frozen: ``(w1 + w0) p - w1``."""
    p, active = _sigmoid_clamped(np.asarray(z_unlabeled, dtype=float))
    w = L.dual_weights(p)
    # the clamp zeroes the gradient of a saturated prediction
    return np.where(active, (w.w_pos + w.w_neg) * p - w.w_pos, 0.0)


def classify_orderings(loss_d, loss_k, loss_i, shift) -> tuple[int, int, int, int]:
    """(ascending, descending, degenerate, violations) over aligned arrays."""
    degenerate = np.abs(shift) < DEGENERATE_TOL
    asc = strictly_greater(loss_k, loss_d) & strictly_greater(loss_i, loss_k)
    desc = strictly_greater(loss_d, loss_k) & strictly_greater(loss_k, loss_i)
    asc &= ~degenerate
    desc &= ~degenerate
    viol = ~(degenerate | asc | desc)
    return int(asc.sum()), int(desc.sum()), int(degenerate.sum()), int(viol.sum())


def verify_theorem1(trials: int = 10_000, dim: int = 5, alpha: float = 0.01, seed: int = 0) -> OrderingReport:
    """Count strict orderings of the three labeled losses over random trials."""
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    if dim < 1:
        raise ConfigError(f"dim must be >= 1, got {dim}")
    if alpha == 0 or not np.isfinite(alpha):
        raise ConfigError(f"alpha must be finite and nonzero, got {alpha}")
    rng = np.random.default_rng(derive_seed(seed, _NS, _TRIALS))
    theta = rng.standard_normal((trials, dim))
    x_u = rng.standard_normal((trials, dim))
    x_l = rng.standard_normal((trials, dim))
    y = rng.integers(0, 2, size=trials)

    grad = dual_upstream(np.einsum("td,td->t", theta, x_u))[:, None] * x_u
    z = np.einsum("td,td->t", theta, x_l)
    shift = alpha * np.einsum("td,td->t", grad, x_l)
    asc, desc, deg, viol = classify_orderings(
        labeled_loss(z - shift, y), labeled_loss(z, y), labeled_loss(z + shift, y), shift
    )
    return OrderingReport(trials, asc, desc, deg, viol)


def measure_batch_ordering(trials: int = 2_000, dim: int = 5, alpha: float = 0.01, batch_size: int = 4,
                           seed: int = 0) -> BatchOrderingReport:
    """Same experiment with ``batch_size`` unlabeled and labeled instances per trial.

    The dual gradient and the labeled loss are batch means. Degenerate here
    means the gradient step has norm below ``DEGENERATE_TOL``.
    """
    if trials < 1 or batch_size < 1 or dim < 1:
        raise ConfigError("trials, batch_size and dim must all be >= 1")
    if alpha == 0 or not np.isfinite(alpha):
        raise ConfigError(f"alpha must be finite and nonzero, got {alpha}")
    rng = np.random.default_rng(derive_seed(seed, _NS, _BATCH))
    theta = rng.standard_normal((trials, dim))
    x_u = rng.standard_normal((trials, batch_size, dim))
    x_l = rng.standard_normal((trials, batch_size, dim))
    y = rng.integers(0, 2, size=(trials, batch_size))

    up = dual_upstream(np.einsum("td,tbd->tb", theta, x_u))
    step = alpha * np.einsum("tb,tbd->td", up, x_u) / batch_size

    def mean_loss(th):
        return labeled_loss(np.einsum("td,tbd->tb", th, x_l), y).mean(axis=1)

    asc, desc, deg, _ = classify_orderings(
        mean_loss(theta - step), mean_loss(theta), mean_loss(theta + step), np.linalg.norm(step, axis=1)
    )
    return BatchOrderingReport(trials, batch_size, asc + desc, deg)


def verify_weight_identity(samples: int = 1_000_000, seed: int = 0, low: float = 1e-6) -> WeightIdentityReport:
    """Max deviations of the dual weights from summing to one and between their two forms."""
    if samples < 1:
        raise ConfigError(f"samples must be >= 1, got {samples}")
    rng = np.random.default_rng(derive_seed(seed, _NS, _WEIGHTS))
    p = rng.uniform(low, 1.0 - low, size=samples)
    closed = L.dual_weights(p)
    ratio = L.dual_weights_ratio_form(p)
    sum_dev = float(np.max(np.abs(closed.w_pos + closed.w_neg - 1.0)))
    form_dev = float(max(np.max(np.abs(closed.w_pos - ratio.w_pos)), np.max(np.abs(closed.w_neg - ratio.w_neg))))
    return WeightIdentityReport(samples, sum_dev, form_dev)
