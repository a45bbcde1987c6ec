"""GMF, NeuMF and logistic-regression backbones with analytic LogLoss gradients.

Parameters live in a plain ``dict[str, np.ndarray]``; gradients use the same
keys and shapes. Every backbone exposes the same three entry points:
``forward`` (probabilities), ``loss_and_grad`` (weighted two-sided LogLoss and
its gradient) and ``apply_step`` (a fresh ``theta - scale * grad``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from invlearn.errors import ConfigError, NumericError, ShapeError

EPS = 1e-7
KINDS = ("gmf", "neumf", "logistic")

Grads = dict[str, np.ndarray]


@dataclass
class ModelParams:
    kind: str
    num_users: int
    num_items: int
    dim: int
    weights: dict[str, np.ndarray]
    # fixed inputs of the logistic kind; never touched by updates
    features: dict[str, np.ndarray] = field(default_factory=dict)
    mlp_layers: tuple[int, ...] = ()

    def copy(self) -> ModelParams:
        return ModelParams(
            self.kind, self.num_users, self.num_items, self.dim,
            {k: v.copy() for k, v in self.weights.items()},
            self.features, self.mlp_layers,
        )

    def zeros_like(self) -> Grads:
        return {k: np.zeros_like(v) for k, v in self.weights.items()}

    def num_parameters(self) -> int:
        return sum(v.size for v in self.weights.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights[k].ravel() for k in sorted(self.weights)])

    def with_flat(self, vec: np.ndarray) -> ModelParams:
        out = self.copy()
        offset = 0
        for k in sorted(out.weights):
            size = out.weights[k].size
            out.weights[k] = vec[offset : offset + size].reshape(out.weights[k].shape).copy()
            offset += size
        return out


def init_params(
    kind: str,
    num_users: int,
    num_items: int,
    dim: int,
    seed: int | np.random.Generator = 0,
    mlp_layers: tuple[int, ...] | None = None,
    emb_std: float = 0.01,
    out_std: float = 0.1,
) -> ModelParams:
    """Gaussian init: embeddings N(0, emb_std), dense layers N(0, out_std).

    For NeuMF the MLP tower defaults to ``2d -> d -> d/2``. For the logistic
    kind ``dim`` is the feature width per side; fixed Gaussian user and item
    features are drawn and concatenated into ``x_ui``.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown backbone {kind!r}; expected one of {KINDS}")
    if dim < 1:
        raise ConfigError("embedding dim must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w: dict[str, np.ndarray] = {}
    features: dict[str, np.ndarray] = {}
    layers: tuple[int, ...] = ()
    if kind == "gmf":
        w["user_emb"] = rng.normal(0, emb_std, (num_users, dim))
        w["item_emb"] = rng.normal(0, emb_std, (num_items, dim))
        w["h"] = rng.normal(0, out_std, dim)
    elif kind == "neumf":
        layers = tuple(mlp_layers) if mlp_layers is not None else (dim, max(dim // 2, 1))
        w["user_emb"] = rng.normal(0, emb_std, (num_users, dim))
        w["item_emb"] = rng.normal(0, emb_std, (num_items, dim))
        w["user_emb_mlp"] = rng.normal(0, emb_std, (num_users, dim))
        w["item_emb_mlp"] = rng.normal(0, emb_std, (num_items, dim))
        fan_in = 2 * dim
        for k, width in enumerate(layers):
            w[f"W{k}"] = rng.normal(0, out_std, (fan_in, width))
            w[f"b{k}"] = np.zeros(width)
            fan_in = width
        w["h"] = rng.normal(0, out_std, dim + fan_in)
    else:
        features["user"] = rng.standard_normal((num_users, dim))
        features["item"] = rng.standard_normal((num_items, dim))
        w["theta"] = rng.normal(0, out_std, 2 * dim)
    return ModelParams(kind, num_users, num_items, dim, w, features, layers)


def logistic_params(theta: np.ndarray, user_features: np.ndarray, item_features: np.ndarray) -> ModelParams:
    """Logistic model over explicit features; ``theta`` spans both feature blocks."""
    user_features = np.atleast_2d(np.asarray(user_features, dtype=float))
    item_features = np.atleast_2d(np.asarray(item_features, dtype=float))
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.size != user_features.shape[1] + item_features.shape[1]:
        raise ShapeError("theta must match the concatenated feature width")
    return ModelParams(
        "logistic", len(user_features), len(item_features), user_features.shape[1],
        {"theta": theta.copy()}, {"user": user_features, "item": item_features},
    )


def _check_ids(params: ModelParams, users: np.ndarray, items: np.ndarray) -> None:
    if users.shape != items.shape:
        raise ShapeError("users and items must have the same length")
    if users.size == 0:
        return
    if users.min() < 0 or users.max() >= params.num_users:
        raise IndexError(f"user id out of range [0, {params.num_users})")
    if items.min() < 0 or items.max() >= params.num_items:
        raise IndexError(f"item id out of range [0, {params.num_items})")


def _logits(params: ModelParams, users: np.ndarray, items: np.ndarray):
    """Pre-sigmoid scores plus whatever the backward pass needs."""
    w = params.weights
    if params.kind == "gmf":
        pu, qi = w["user_emb"][users], w["item_emb"][items]
        inter = pu * qi
        return inter @ w["h"], (pu, qi, inter)
    if params.kind == "neumf":
        pu, qi = w["user_emb"][users], w["item_emb"][items]
        gmf = pu * qi
        acts = [np.concatenate([w["user_emb_mlp"][users], w["item_emb_mlp"][items]], axis=1)]
        for k in range(len(params.mlp_layers)):
            acts.append(np.maximum(acts[-1] @ w[f"W{k}"] + w[f"b{k}"], 0.0))
        top = np.concatenate([gmf, acts[-1]], axis=1)
        return top @ w["h"], (pu, qi, acts, top)
    x = np.concatenate([params.features["user"][users], params.features["item"][items]], axis=1)
    return x @ w["theta"], (x,)


def _sigmoid_clamped(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    raw = expit(z)
    active = (raw > EPS) & (raw < 1 - EPS)
    return np.clip(raw, EPS, 1 - EPS), active


def forward(params: ModelParams, users, items) -> np.ndarray:
    """Predicted probabilities, clamped to [EPS, 1 - EPS]."""
    users = np.asarray(users, dtype=np.int64).reshape(-1)
    items = np.asarray(items, dtype=np.int64).reshape(-1)
    _check_ids(params, users, items)
    z, _ = _logits(params, users, items)
    return _sigmoid_clamped(z)[0]


def label_weights(labels) -> tuple[np.ndarray, np.ndarray]:
    """Hard labels expressed as (w_pos, w_neg) = (y, 1 - y)."""
    y = np.asarray(labels, dtype=float)
    return y, 1.0 - y


def loss_and_grad(params: ModelParams, users, items, w_pos, w_neg) -> tuple[float, Grads]:
    """Batch mean of ``w_pos * l(p, 1) + w_neg * l(p, 0)`` and its gradient.

    Weights are constants (no gradient flows through them). The derivative
    w.r.t. the logit is ``(w_pos + w_neg) * p - w_pos``; it is zero wherever
    the probability clamp is active.
    """
    users = np.asarray(users, dtype=np.int64).reshape(-1)
    items = np.asarray(items, dtype=np.int64).reshape(-1)
    _check_ids(params, users, items)
    n = len(users)
    w_pos = np.broadcast_to(np.asarray(w_pos, dtype=float), (n,))
    w_neg = np.broadcast_to(np.asarray(w_neg, dtype=float), (n,))
    if not (np.isfinite(w_pos).all() and np.isfinite(w_neg).all()):
        raise NumericError("loss weights must be finite")
    if (w_pos < 0).any() or (w_neg < 0).any():
        raise NumericError("loss weights must be non-negative")
    grads = params.zeros_like()
    if n == 0:
        return 0.0, grads

    z, cache = _logits(params, users, items)
    p, active = _sigmoid_clamped(z)
    loss = float(np.mean(-w_pos * np.log(p) - w_neg * np.log1p(-p)))
    dz = np.where(active, (w_pos + w_neg) * p - w_pos, 0.0) / n

    w = params.weights
    if params.kind == "gmf":
        pu, qi, inter = cache
        grads["h"] = inter.T @ dz
        d_inter = dz[:, None] * w["h"]
        np.add.at(grads["user_emb"], users, d_inter * qi)
        np.add.at(grads["item_emb"], items, d_inter * pu)
    elif params.kind == "neumf":
        pu, qi, acts, top = cache
        d = params.dim
        grads["h"] = top.T @ dz
        d_top = dz[:, None] * w["h"]
        d_gmf = d_top[:, :d]
        np.add.at(grads["user_emb"], users, d_gmf * qi)
        np.add.at(grads["item_emb"], items, d_gmf * pu)
        delta = d_top[:, d:]
        for k in reversed(range(len(params.mlp_layers))):
            delta = delta * (acts[k + 1] > 0)
            grads[f"W{k}"] = acts[k].T @ delta
            grads[f"b{k}"] = delta.sum(axis=0)
            delta = delta @ w[f"W{k}"].T
        np.add.at(grads["user_emb_mlp"], users, delta[:, :d])
        np.add.at(grads["item_emb_mlp"], items, delta[:, d:])
    else:
        (x,) = cache
        grads["theta"] = x.T @ dz
    return loss, grads


def backward(params: ModelParams, users, items, w_pos, w_neg=None) -> Grads:
    """Gradient only. With ``w_neg`` omitted, ``w_pos`` is read as hard labels."""
    if w_neg is None:
        w_pos, w_neg = label_weights(w_pos)
    return loss_and_grad(params, users, items, w_pos, w_neg)[1]


def apply_step(params: ModelParams, grad: Grads, scale: float) -> ModelParams:
    """New parameters ``theta - scale * grad``; ``params`` is left untouched."""
    if not np.isfinite(scale):
        raise NumericError(f"step scale must be finite, got {scale}")
    if grad.keys() != params.weights.keys():
        raise ShapeError("gradient keys do not match parameters")
    out = params.copy()
    for k, g in grad.items():
        if g.shape != out.weights[k].shape:
            raise ShapeError(f"gradient for {k!r} has shape {g.shape}, expected {out.weights[k].shape}")
        if scale != 0.0:
            out.weights[k] -= scale * g
    return out


def grads_finite(grad: Grads) -> bool:
    return all(np.isfinite(g).all() for g in grad.values())


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    header = {
        "format": "invlearn-params",
        "version": 1,
        "kind": params.kind,
        "num_users": params.num_users,
        "num_items": params.num_items,
        "dim": params.dim,
        "mlp_layers": list(params.mlp_layers),
        "weights": sorted(params.weights),
        "features": sorted(params.features),
    }
    arrays = {f"w/{k}": v for k, v in params.weights.items()}
    arrays.update({f"f/{k}": v for k, v in params.features.items()})
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path) -> ModelParams:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format") != "invlearn-params":
            raise ConfigError(f"{path} is not an invlearn checkpoint")
        weights = {k: data[f"w/{k}"].copy() for k in header["weights"]}
        features = {k: data[f"f/{k}"].copy() for k in header["features"]}
    return ModelParams(
        header["kind"], header["num_users"], header["num_items"], header["dim"],
        weights, features, tuple(header["mlp_layers"]),
    )
