"""Inverse Gradient training loop and the baseline method roster.

Inverse Gradient (IG) pre-trains on the training-train split, then for every
step builds two candidates from the dual-loss gradient on a fresh batch of
unlabeled pairs, ``theta - alpha * g`` (direct) and ``theta + alpha * g``
(inverse), keeps whichever of {direct, current, inverse} has the lowest
LogLoss on a training-test batch, and finally takes one Adam step on that
training-test batch.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from invlearn import loss as L
from invlearn.data import DatasetBundle, Interactions, derive_seed, sample_unlabeled
from invlearn.errors import ConfigError, EmptyInputError, InsufficientDataError
from invlearn.metrics import MetricsReport, auc, evaluate
from invlearn.model import ModelParams, forward, init_params, label_weights, loss_and_grad
from invlearn.optim import AdamState, adam_step, preconditioned, raw_step

log = logging.getLogger(__name__)

DIRECT, KEEP, INVERSE = "direct", "pass", "inverse"
TIE_TOL = 1e-12

# RNG stream ids under a namespace disjoint from the data generators'
_NS = 0x7EA1
_INIT, _ORDER, _UNLABELED, _TEST_BATCH = 0, 1, 2, 3


@dataclass
class TrainConfig:
    backbone: str = "gmf"
    gamma: float = 1e-3
    alpha_ratio: float = 0.1
    # explicit dual-loss step size; overrides alpha_ratio * gamma when set
    alpha: float | None = None
    batch_size: int = 1024
    # rows drawn with replacement from training-test per step; None means batch_size
    test_batch_size: int | None = None
    embedding_dim: int = 32
    mlp_layers: tuple[int, ...] | None = None
    sampling_rate: float = 1.0
    # "adam": candidate steps use Adam's second-moment scaling (read-only);
    # "raw": plain theta -/+ alpha * grad
    explore_step: str = "adam"
    pretrain_epochs: int = 10
    meta_epochs: int = 30
    early_stop_patience: int = 5
    repeat_pretrain: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if self.alpha is not None and self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.alpha_ratio < 0:
            raise ConfigError("alpha_ratio must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.test_batch_size is not None and self.test_batch_size < 1:
            raise ConfigError("test_batch_size must be >= 1")
        if self.sampling_rate < 0:
            raise ConfigError("sampling_rate must be >= 0")
        if min(self.pretrain_epochs, self.meta_epochs, self.early_stop_patience) < 0:
            raise ConfigError("epoch counts and patience must be >= 0")
        if self.explore_step not in ("adam", "raw"):
            raise ConfigError(f"explore_step must be 'adam' or 'raw', got {self.explore_step!r}")
        if self.mlp_layers is not None:
            self.mlp_layers = tuple(int(x) for x in self.mlp_layers)

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.alpha is not None else self.alpha_ratio * self.gamma

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_layers"] = list(self.mlp_layers) if self.mlp_layers is not None else None
        return d


@dataclass
class StepTrace:
    epoch: int
    step: int
    direction: str
    loss_direct: float
    loss_keep: float
    loss_inverse: float
    committed_test_loss: float


@dataclass
class WeightLog:
    """Soft annotations of every unlabeled pair seen during the meta phase."""

    oracle: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    chunks: list[tuple] = field(default_factory=list)

    def record(self, epoch: int, step: int, users, items, preds, weights: L.DualWeights) -> None:
        n = len(preds)
        oracle = None if self.oracle is None else np.asarray(self.oracle(users, items))
        self.chunks.append((np.full(n, epoch), np.full(n, step), preds, weights.w_pos,
                            weights.w_neg, oracle))

    def as_columns(self) -> dict[str, np.ndarray | None]:
        names = ["epoch", "step", "pred", "w_pos", "w_neg", "oracle_label"]
        if not self.chunks:
            return {k: np.zeros(0) for k in names[:-1]} | {"oracle_label": None}
        cols = {k: np.concatenate([c[j] for c in self.chunks]) for j, k in enumerate(names[:-1])}
        cols["oracle_label"] = None if self.oracle is None else np.concatenate([c[5] for c in self.chunks])
        return cols


@dataclass
class TrainResult:
    method: str
    params: ModelParams
    test: MetricsReport
    validation: MetricsReport
    traces: list[StepTrace]
    weights: dict
    history: list[dict]
    best_epoch: int


def test_loss(params: ModelParams, batch: Interactions) -> float:
    w_pos, w_neg = label_weights(batch.labels)
    p = forward(params, batch.users, batch.items)
    return float(np.mean(-w_pos * np.log(p) - w_neg * np.log1p(-p)))


def dual_gradient(params: ModelParams, users, items, precondition: AdamState | None = None):
    """Dual loss gradient with weights frozen at the current predictions.

    With ``precondition`` the gradient is rescaled per coordinate the way an
    Adam step from that state would be, without advancing the state.
    """
    preds = forward(params, users, items)
    w = L.dual_weights(preds)
    _, grad = loss_and_grad(params, users, items, w.w_pos, w.w_neg)
    if precondition is not None:
        grad = preconditioned(grad, precondition)
    return grad, preds, w


def choose_direction(loss_direct: float, loss_keep: float, loss_inverse: float,
                     tol: float = TIE_TOL) -> str:
    if loss_direct < loss_keep - tol and loss_direct < loss_inverse - tol:
        return DIRECT
    if loss_inverse < loss_keep - tol and loss_inverse < loss_direct - tol:
        return INVERSE
    return KEEP


def explore_directions(params: ModelParams, unlabeled, test_batch: Interactions, alpha: float,
                       epoch: int = 0, step: int = 0, precondition: AdamState | None = None):
    """Evaluate theta - alpha*g, theta, theta + alpha*g on ``test_batch``.

    ``unlabeled`` is an ``(n, 2)`` array of (user, item). Returns the winning
    parameters, the filled ``StepTrace`` and ``(preds, DualWeights)`` of the
    unlabeled batch. Neither ``params`` nor ``precondition`` is modified.
    """
    unlabeled = np.asarray(unlabeled, dtype=np.int64).reshape(-1, 2)
    if len(unlabeled) == 0 or len(test_batch) == 0:
        raise EmptyInputError("explore_directions needs nonempty unlabeled and test batches")
    grad, preds, w = dual_gradient(params, unlabeled[:, 0], unlabeled[:, 1], precondition)
    cand = {
        DIRECT: raw_step(params, grad, alpha),
        KEEP: params,
        INVERSE: raw_step(params, grad, -alpha),
    }
    losses = {k: test_loss(p, test_batch) for k, p in cand.items()}
    direction = choose_direction(losses[DIRECT], losses[KEEP], losses[INVERSE])
    trace = StepTrace(epoch, step, direction, losses[DIRECT], losses[KEEP], losses[INVERSE],
                      losses[direction])
    return cand[direction], trace, (preds, w)


def _check_nonempty(part: Interactions, name: str) -> None:
    if len(part) == 0:
        raise InsufficientDataError(f"split {name!r} is empty")


def _unlabeled_count(batch_len: int, cfg: TrainConfig) -> int:
    return int(round(batch_len * cfg.sampling_rate))


def _labeled_step(params, adam, batch: Interactions, method: str, denoise: L.DenoiseConfig,
                  global_step: int):
    if method == "tce":
        p = forward(params, batch.users, batch.items)
        w_pos, w_neg = L.tce_weights(p, batch.labels, global_step, denoise)
    elif method == "rce":
        p = forward(params, batch.users, batch.items)
        w_pos, w_neg = L.rce_weights(p, batch.labels, denoise)
    else:
        w_pos, w_neg = label_weights(batch.labels)
    _, grad = loss_and_grad(params, batch.users, batch.items, w_pos, w_neg)
    return adam_step(params, grad, adam)


def supervised_epoch(params: ModelParams, adam: AdamState, data: Interactions, cfg: TrainConfig,
                     order_rng: np.random.Generator, method: str = "none",
                     denoise: L.DenoiseConfig | None = None, bundle: DatasetBundle | None = None,
                     unl_rng: np.random.Generator | None = None, global_step: int = 0):
    """One shuffled mini-batch pass of LogLoss (or T-CE / R-CE) with Adam.

    For every method except ``none`` each labeled batch is extended with
    ``sampling_rate * batch`` sampled unlabeled pairs labeled 0.
    """
    denoise = denoise or L.DenoiseConfig(method="none")
    perm = order_rng.permutation(len(data))
    for lo in range(0, len(data), cfg.batch_size):
        batch = data.take(perm[lo : lo + cfg.batch_size])
        count = _unlabeled_count(len(batch), cfg) if method != "none" else 0
        if count:
            pairs = sample_unlabeled(bundle.num_users, bundle.num_items, bundle.labeled_codes,
                                     count, unl_rng)
            batch = Interactions.concat([batch, Interactions(pairs[:, 0], pairs[:, 1], np.zeros(count))])
        params, adam = _labeled_step(params, adam, batch, method, denoise, global_step)
        global_step += 1
    return params, adam, global_step


def pretrain(params: ModelParams, train_train: Interactions, cfg: TrainConfig, adam: AdamState,
             order_rng: np.random.Generator | None = None):
    """``cfg.pretrain_epochs`` Adam passes of LogLoss over training-train data."""
    _check_nonempty(train_train, "train_train")
    order_rng = order_rng or np.random.default_rng(derive_seed(cfg.seed, _NS, _ORDER))
    for _ in range(cfg.pretrain_epochs):
        params, adam, _ = supervised_epoch(params, adam, train_train, cfg, order_rng)
    return params, adam


def ig_epoch(params: ModelParams, adam: AdamState, bundle: DatasetBundle, cfg: TrainConfig,
             epoch: int = 0, unl_rng: np.random.Generator | None = None,
             test_rng: np.random.Generator | None = None, force_direct: bool = False,
             weight_log: WeightLog | None = None):
    """One pass of the exploration loop: T = ceil(|train_train| / batch) steps.

    With ``force_direct`` the direct candidate is always committed and no
    ``StepTrace`` is produced (the plain Inverse Dual Loss ablation).
    """
    _check_nonempty(bundle.train_train, "train_train")
    _check_nonempty(bundle.train_test, "train_test")
    unl_rng = unl_rng or np.random.default_rng(derive_seed(cfg.seed, _NS, _UNLABELED, epoch))
    test_rng = test_rng or np.random.default_rng(derive_seed(cfg.seed, _NS, _TEST_BATCH, epoch))
    alpha = cfg.effective_alpha
    n_steps = math.ceil(len(bundle.train_train) / cfg.batch_size)
    count = max(1, _unlabeled_count(cfg.batch_size, cfg))
    test_size = cfg.test_batch_size or cfg.batch_size
    traces: list[StepTrace] = []
    for step in range(n_steps):
        pairs = sample_unlabeled(bundle.num_users, bundle.num_items, bundle.labeled_codes, count, unl_rng)
        test_batch = bundle.train_test.take(test_rng.integers(0, len(bundle.train_test), test_size))
        precond = adam if cfg.explore_step == "adam" else None
        if force_direct:
            grad, preds, w = dual_gradient(params, pairs[:, 0], pairs[:, 1], precond)
            params = raw_step(params, grad, alpha)
        else:
            params, trace, (preds, w) = explore_directions(params, pairs, test_batch, alpha, epoch, step,
                                                           precond)
            traces.append(trace)
        if weight_log is not None:
            weight_log.record(epoch, step, pairs[:, 0], pairs[:, 1], preds, w)
        _, grad = loss_and_grad(params, test_batch.users, test_batch.items, *label_weights(test_batch.labels))
        params, adam = adam_step(params, grad, adam)
    return params, adam, traces


def validation_auc(params: ModelParams, split: Interactions) -> float:
    return auc(forward(params, split.users, split.items), split.labels)


def evaluate_split(params: ModelParams, split: Interactions) -> MetricsReport:
    scores = forward(params, split.users, split.items)
    return evaluate(scores, split.users, split.items, split.labels)


class _EarlyStopper:
    def __init__(self, patience: int):
        self.patience = patience
        self.best_auc = -np.inf
        self.best_params: ModelParams | None = None
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, params: ModelParams, val_auc: float) -> bool:
        """Record an epoch; True means stop."""
        if val_auc > self.best_auc:
            self.best_auc, self.best_params, self.best_epoch = val_auc, params.copy(), epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def train(method: str, bundle: DatasetBundle, cfg: TrainConfig,
          denoise: L.DenoiseConfig | None = None,
          oracle: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None) -> TrainResult:
    """Train one method end to end and report metrics at the best validation epoch.

    ``none``/``ns``/``tce``/``rce`` run up to ``pretrain_epochs + meta_epochs``
    epochs over the full training split. ``idl``/``ig`` pre-train on
    training-train for ``pretrain_epochs`` and then run up to ``meta_epochs``
    exploration epochs. Every method stops early on validation AUC.
    """
    denoise = denoise or L.DenoiseConfig(method=method)
    method = L.DenoiseConfig(method=method).method
    for name in ("train_train", "train_test", "validation", "test"):
        _check_nonempty(getattr(bundle, name), name)

    params = init_params(cfg.backbone, bundle.num_users, bundle.num_items, cfg.embedding_dim,
                         derive_seed(cfg.seed, _NS, _INIT), cfg.mlp_layers)
    adam = AdamState.for_params(params, cfg.gamma)
    order_rng = np.random.default_rng(derive_seed(cfg.seed, _NS, _ORDER))
    unl_rng = np.random.default_rng(derive_seed(cfg.seed, _NS, _UNLABELED))
    test_rng = np.random.default_rng(derive_seed(cfg.seed, _NS, _TEST_BATCH))
    stopper = _EarlyStopper(cfg.early_stop_patience)
    history: list[dict] = []
    traces: list[StepTrace] = []
    weight_log = WeightLog(oracle)

    def checkpoint(epoch: int, phase: str) -> bool:
        val = validation_auc(params, bundle.validation)
        history.append({"epoch": epoch, "phase": phase, "val_auc": val})
        log.debug("%s epoch %d (%s): val auc %.4f", method, epoch, phase, val)
        return stopper.update(epoch, params, val)

    if method in ("idl", "ig"):
        params, adam = pretrain(params, bundle.train_train, cfg, adam, order_rng)
        checkpoint(0, "pretrain")
        for epoch in range(1, cfg.meta_epochs + 1):
            if cfg.repeat_pretrain and epoch > 1:
                params, adam, _ = supervised_epoch(params, adam, bundle.train_train, cfg, order_rng)
            params, adam, step_traces = ig_epoch(
                params, adam, bundle, cfg, epoch, unl_rng, test_rng,
                force_direct=(method == "idl"), weight_log=weight_log,
            )
            traces.extend(step_traces)
            if checkpoint(epoch, "meta"):
                break
    else:
        train_split = bundle.train
        global_step = 0
        checkpoint(0, "init")
        for epoch in range(1, cfg.pretrain_epochs + cfg.meta_epochs + 1):
            params, adam, global_step = supervised_epoch(
                params, adam, train_split, cfg, order_rng, method, denoise, bundle, unl_rng, global_step,
            )
            if checkpoint(epoch, "train"):
                break

    best = stopper.best_params
    return TrainResult(
        method=method,
        params=best,
        test=evaluate_split(best, bundle.test),
        validation=evaluate_split(best, bundle.validation),
        traces=traces,
        weights=weight_log.as_columns(),
        history=history,
        best_epoch=stopper.best_epoch,
    )


TRACE_HEADER = ["epoch", "step", "direction", "loss_direct", "loss_keep", "loss_inverse",
                "committed_test_loss"]


def write_step_trace(path: str | Path, traces: list[StepTrace]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for t in traces:
            writer.writerow([t.epoch, t.step, t.direction, repr(t.loss_direct), repr(t.loss_keep),
                             repr(t.loss_inverse), repr(t.committed_test_loss)])


def direction_fractions(traces: list[StepTrace]) -> dict[str, float]:
    n = len(traces)
    if n == 0:
        return {DIRECT: 0.0, KEEP: 0.0, INVERSE: 0.0}
    return {d: sum(t.direction == d for t in traces) / n for d in (DIRECT, KEEP, INVERSE)}
