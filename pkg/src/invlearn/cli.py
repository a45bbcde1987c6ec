"""Command line front end: ``synth``, ``train``, ``eval``, ``compare``, ``verify-theorem``.

Every run is described by one flat :class:`RunConfig`. Values come from the
built-in defaults, then a JSON config file (``--config``), then command line
flags, later sources winning.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from invlearn import loss as L
from invlearn import theory
from invlearn.data import (
    DatasetBundle,
    generate_synthetic,
    load_movielens,
    make_bundle,
    read_interactions_csv,
    read_oracle_csv,
    write_interactions_csv,
    write_oracle_csv,
)
from invlearn.errors import ConfigError, DataError, InvLearnError
from invlearn.meta import TrainConfig, TrainResult, direction_fractions, evaluate_split, train, write_step_trace
from invlearn.model import KINDS, load_checkpoint, save_checkpoint

log = logging.getLogger("invlearn")

SCHEMA_VERSION = 1
THREADS_ENV = "INVLEARN_THREADS"

_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
_DENOISE_KEYS = ("tce_max_drop", "tce_warmup_steps", "rce_beta")


@dataclass
class RunConfig:
    # data source; synthetic data is generated when ``data`` is unset
    data: str | None = None
    data_format: str = "csv"
    oracle: str | None = None
    pos_threshold: int = 4
    neg_threshold: int = 2
    users: int = 300
    items: int = 300
    latent_dim: int = 8
    label_density: float = 0.03
    flip_rate: float = 0.0
    factor_decay: float = 0.5
    # training
    method: str = "ig"
    methods: tuple[str, ...] = ("none", "ns", "idl", "ig")
    backbones: tuple[str, ...] = ("gmf",)
    seeds: tuple[int, ...] = (0,)
    backbone: str = "gmf"
    gamma: float = 1e-3
    alpha_ratio: float = 0.1
    alpha: float | None = None
    batch_size: int = 1024
    test_batch_size: int | None = None
    embedding_dim: int = 32
    mlp_layers: tuple[int, ...] | None = None
    sampling_rate: float = 1.0
    explore_step: str = "adam"
    pretrain_epochs: int = 10
    meta_epochs: int = 30
    early_stop_patience: int = 5
    repeat_pretrain: bool = False
    seed: int = 0
    tce_max_drop: float = 0.1
    tce_warmup_steps: int = 10_000
    rce_beta: float = 0.25
    # theorem check
    trials: int = 10_000
    dim: int = 5
    theorem_alpha: float = 0.01
    batch_trials: int = 2_000
    theorem_batch: int = 4
    # artifacts
    out: str = "runs"
    params: str | None = None

    def __post_init__(self):
        if self.data_format not in ("csv", "movielens"):
            raise ConfigError(f"data_format must be 'csv' or 'movielens', got {self.data_format!r}")
        for name in ("methods", "backbones", "seeds"):
            value = tuple(getattr(self, name))
            if not value:
                raise ConfigError(f"{name} must not be empty")
            setattr(self, name, value)
        self.seeds = tuple(int(s) for s in self.seeds)
        for m in (self.method, *self.methods):
            L.DenoiseConfig(method=m)
        for b in (self.backbone, *self.backbones):
            if b not in KINDS:
                raise ConfigError(f"unknown backbone {b!r}; expected one of {KINDS}")
        self.train_config()
        self.denoise_config()

    @classmethod
    def from_mapping(cls, values: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)

    def replace(self, **changes) -> RunConfig:
        return RunConfig.from_mapping({**asdict(self), **changes})

    def train_config(self, **override) -> TrainConfig:
        kw = {k: getattr(self, k) for k in _TRAIN_KEYS}
        kw.update(override)
        return TrainConfig(**kw)

    def denoise_config(self, method: str | None = None) -> L.DenoiseConfig:
        return L.DenoiseConfig(method=method or self.method, **{k: getattr(self, k) for k in _DENOISE_KEYS})

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


# Acceptance scenario: 300 x 300 synthetic PU data, rank 8, 3% labeled, no flips.
SCENARIO = dict(
    users=300, items=300, latent_dim=8, label_density=0.03, flip_rate=0.0, factor_decay=0.5,
    backbone="gmf", gamma=0.003, alpha_ratio=0.1, batch_size=64, embedding_dim=32,
    pretrain_epochs=10, meta_epochs=60, early_stop_patience=10, seeds=(0, 1, 2, 3, 4),
)


def scenario_config(**changes) -> RunConfig:
    return RunConfig.from_mapping({**SCENARIO, **changes})


# ---------------------------------------------------------------- data / runs


def load_bundle(rc: RunConfig, seed: int) -> tuple[DatasetBundle, Callable | None]:
    """Dataset for one run plus an oracle-label lookup when ground truth is known."""
    if rc.data is None:
        bundle, truth = generate_synthetic(rc.users, rc.items, rc.latent_dim, rc.label_density,
                                           rc.flip_rate, seed, rc.factor_decay)
        return bundle, truth.oracle_label
    if rc.data_format == "movielens":
        num_users, num_items, rows = load_movielens(rc.data, rc.pos_threshold, rc.neg_threshold)
    else:
        rows = read_interactions_csv(rc.data)
        num_users, num_items = int(rows.users.max()) + 1, int(rows.items.max()) + 1
    oracle = None
    if rc.oracle is not None:
        matrix = read_oracle_csv(rc.oracle)
        if matrix.shape[0] < num_users or matrix.shape[1] < num_items:
            raise DataError(f"oracle grid {matrix.shape} does not cover the dataset ({num_users}, {num_items})")
        num_users, num_items = matrix.shape

        def oracle(users, items):
            return matrix[np.asarray(users), np.asarray(items)]

    return make_bundle(num_users, num_items, rows, seed), oracle


def run_cell(rc: RunConfig, method: str, backbone: str, seed: int) -> TrainResult:
    bundle, oracle = load_bundle(rc, seed)
    cfg = rc.train_config(backbone=backbone, seed=seed)
    return train(method, bundle, cfg, rc.denoise_config(method), oracle)


def metrics_document(rc: RunConfig, result: TrainResult, backbone: str, seed: int) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "method": result.method,
        "backbone": backbone,
        "seed": seed,
        "config": rc.replace(method=result.method, backbone=backbone, seed=seed).to_dict(),
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history) - 1,
        "validation": result.validation.to_dict(),
        "test": result.test.to_dict(),
        "history": result.history,
    }
    if result.traces:
        doc["directions"] = direction_fractions(result.traces)
    return doc


def dump_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(rc: RunConfig) -> Path:
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_synth(rc: RunConfig) -> int:
    out = _out_dir(rc)
    bundle, truth = generate_synthetic(rc.users, rc.items, rc.latent_dim, rc.label_density,
                                       rc.flip_rate, rc.seed, rc.factor_decay)
    rows = bundle.all_labeled
    rows = rows.take(np.lexsort((rows.items, rows.users)))
    write_interactions_csv(out / "dataset.csv", rows)
    n_grid = write_oracle_csv(out / "oracle.csv", truth)
    disagree = int(np.sum(truth.oracle_label(rows.users, rows.items) != rows.labels))
    print(f"dataset.csv: {len(rows)} rows ({int(rows.labels.sum())} positive), "
          f"{disagree} disagree with the oracle")
    print(f"oracle.csv: {n_grid} rows ({rc.users} users x {rc.items} items)")
    return 0


def cmd_train(rc: RunConfig) -> int:
    out = _out_dir(rc)
    result = run_cell(rc, rc.method, rc.backbone, rc.seed)
    doc = metrics_document(rc, result, rc.backbone, rc.seed)
    dump_json(out / "metrics.json", doc)
    write_step_trace(out / "trace.csv", result.traces)
    L.write_weight_trace(out / "weight_trace.csv", result.weights)
    save_checkpoint(out / "params.npz", result.params)
    t = result.test
    print(f"{result.method} ({rc.backbone}, seed {rc.seed}): best epoch {result.best_epoch}, "
          f"test auc {t.auc:.4f} gauc {t.gauc:.4f} ndcg@10 {t.ndcg_at_10:.4f} mrr {t.mrr:.4f}")
    return 0


def cmd_eval(rc: RunConfig) -> int:
    if rc.params is None:
        raise ConfigError("eval needs --params pointing at a saved checkpoint")
    out = _out_dir(rc)
    params = load_checkpoint(rc.params)
    bundle, _ = load_bundle(rc, rc.seed)
    if (params.num_users, params.num_items) != (bundle.num_users, bundle.num_items):
        raise DataError(f"checkpoint is for {params.num_users} x {params.num_items}, "
                        f"dataset is {bundle.num_users} x {bundle.num_items}")
    doc = {
        "schema_version": SCHEMA_VERSION,
        "params": str(rc.params),
        "seed": rc.seed,
        "validation": evaluate_split(params, bundle.validation).to_dict(),
        "test": evaluate_split(params, bundle.test).to_dict(),
    }
    dump_json(out / "eval.json", doc)
    print(f"test auc {doc['test']['auc']:.4f} gauc {doc['test']['gauc']:.4f}")
    return 0


COMPARE_METRICS = ("auc", "gauc", "ndcg_at_10", "mrr")


def _compare_cell(args) -> dict:
    rc, backbone, method, seed = args
    result = run_cell(rc, method, backbone, seed)
    return {"backbone": backbone, "method": result.method, "seed": seed, **result.test.to_dict()}


def worker_count(cells: int) -> int:
    raw = os.environ.get(THREADS_ENV)
    try:
        n = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, min(n, cells))


def compare_rows(cells: list[dict]) -> list[dict]:
    """Mean and population std over seeds for each (backbone, method)."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for c in cells:
        groups.setdefault((c["backbone"], c["method"]), []).append(c)
    rows = []
    for (backbone, method), members in groups.items():
        row = {"backbone": backbone, "method": method, "seeds": len(members)}
        for m in COMPARE_METRICS:
            vals = np.array([c[m] for c in members])
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std(ddof=0))
        rows.append(row)
    return rows


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_compare(rc: RunConfig) -> int:
    out = _out_dir(rc)
    jobs = [(rc, b, m, s) for b in rc.backbones for m in rc.methods for s in rc.seeds]
    workers = worker_count(len(jobs))
    if workers == 1:
        cells = [_compare_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_compare_cell, jobs))
    rows = compare_rows(cells)
    _write_rows(out / "cells.csv", cells)
    _write_rows(out / "compare.csv", rows)
    for r in rows:
        print(f"{r['backbone']:8s} {r['method']:5s} auc {r['auc_mean']:.4f} +- {r['auc_std']:.4f}  "
              f"gauc {r['gauc_mean']:.4f}  ndcg@10 {r['ndcg_at_10_mean']:.4f}")
    return 0


def cmd_verify_theorem(rc: RunConfig) -> int:
    report = theory.verify_theorem1(rc.trials, rc.dim, rc.theorem_alpha, rc.seed)
    batch = theory.measure_batch_ordering(rc.batch_trials, rc.dim, rc.theorem_alpha, rc.theorem_batch, rc.seed)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "alpha": rc.theorem_alpha,
        "dim": rc.dim,
        "seed": rc.seed,
        **report.to_dict(),
        "batch_extension": batch.to_dict(),
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    if rc.out != "-":
        (_out_dir(rc) / "theorem.json").write_text(text + "\n")
    return 1 if report.violations else 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "verify-theorem": cmd_verify_theorem,
}


# ---------------------------------------------------------------- argument parsing


def _csv_list(cast):
    def parse(text: str):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if not parts:
            raise argparse.ArgumentTypeError("expected a comma-separated list")
        return tuple(cast(p) for p in parts)
    return parse


def _optional(cast):
    def parse(text: str):
        return None if text.lower() in ("none", "") else cast(text)
    return parse


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


_DEFAULTS = RunConfig()

# key -> (type, help); the flag is --key with dashes
_DATA_FLAGS = {
    "data": (_optional(str), "interaction file; synthetic data is generated when unset"),
    "data_format": (str, "'csv' (user,item,label) or 'movielens' (user::item::rating::ts)"),
    "oracle": (_optional(str), "oracle CSV (user,item,oracle_label) for a file dataset"),
    "pos_threshold": (int, "MovieLens ratings >= this are positive"),
    "neg_threshold": (int, "MovieLens ratings <= this are negative"),
    "users": (int, "synthetic users"),
    "items": (int, "synthetic items"),
    "latent_dim": (int, "synthetic latent rank"),
    "label_density": (float, "fraction of user-item pairs revealed"),
    "flip_rate": (float, "fraction of revealed labels inverted"),
    "factor_decay": (float, "std of latent dimension k is factor_decay**k"),
}
_TRAIN_FLAGS = {
    "method": (str, "one of none, ns, tce, rce, idl, ig"),
    "backbone": (str, "gmf, neumf or logistic"),
    "gamma": (float, "Adam learning rate for labeled and test losses"),
    "alpha_ratio": (float, "dual-loss step as a multiple of gamma"),
    "alpha": (_optional(float), "explicit dual-loss step; overrides alpha_ratio"),
    "batch_size": (int, "mini-batch size"),
    "test_batch_size": (_optional(int), "training-test rows per meta step; defaults to batch_size"),
    "embedding_dim": (int, "embedding size"),
    "mlp_layers": (_optional(_csv_list(int)), "NeuMF tower widths, e.g. 64,32"),
    "sampling_rate": (float, "unlabeled pairs per labeled row"),
    "explore_step": (str, "'adam' (preconditioned) or 'raw' candidate steps"),
    "pretrain_epochs": (int, "pre-training epochs"),
    "meta_epochs": (int, "exploration epochs"),
    "early_stop_patience": (int, "epochs without validation AUC gain before stopping"),
    "repeat_pretrain": (_bool, "repeat a pre-training epoch before every exploration epoch"),
    "seed": (int, "random seed"),
    "tce_max_drop": (float, "T-CE final drop rate"),
    "tce_warmup_steps": (int, "T-CE steps to reach the final drop rate"),
    "rce_beta": (float, "R-CE exponent"),
}
_COMPARE_FLAGS = {
    "methods": (_csv_list(str), "methods to compare"),
    "backbones": (_csv_list(str), "backbones to compare"),
    "seeds": (_csv_list(int), "seeds to average over"),
}
_THEOREM_FLAGS = {
    "trials": (int, "single-instance trials"),
    "dim": (int, "feature dimension"),
    "theorem_alpha": (float, "dual-loss step size"),
    "batch_trials": (int, "trials for the batch measurement"),
    "theorem_batch": (int, "batch size for the batch measurement"),
    "seed": (int, "random seed"),
}
_OUT_FLAGS = {"out": (str, "output directory")}
_EVAL_FLAGS = {"params": (_optional(str), "checkpoint written by train")}


def _add_flags(parser: argparse.ArgumentParser, title: str, spec: dict, aliases: dict | None = None) -> None:
    group = parser.add_argument_group(title)
    for key, (cast, text) in spec.items():
        default = getattr(_DEFAULTS, key)
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        names = ["--" + key.replace("_", "-")] + list((aliases or {}).get(key, ()))
        group.add_argument(*names, dest=key, type=cast, default=argparse.SUPPRESS,
                           help=f"{text} (default: {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invlearn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", type=Path, default=None, help="JSON file of RunConfig keys")
        return p

    p = command("synth", "write a synthetic dataset and its oracle labels")
    _add_flags(p, "data", {k: _DATA_FLAGS[k] for k in
                           ("users", "items", "latent_dim", "label_density", "flip_rate", "factor_decay")})
    _add_flags(p, "run", {"seed": _TRAIN_FLAGS["seed"], **_OUT_FLAGS})

    p = command("train", "train one method and write metrics, traces and parameters")
    _add_flags(p, "data", _DATA_FLAGS)
    _add_flags(p, "training", _TRAIN_FLAGS)
    _add_flags(p, "output", _OUT_FLAGS)

    p = command("eval", "evaluate a saved checkpoint on the validation and test splits")
    _add_flags(p, "data", _DATA_FLAGS)
    _add_flags(p, "run", {"seed": _TRAIN_FLAGS["seed"], **_EVAL_FLAGS, **_OUT_FLAGS})

    p = command("compare", "mean and std of test metrics per backbone and method over seeds")
    _add_flags(p, "data", _DATA_FLAGS)
    _add_flags(p, "roster", _COMPARE_FLAGS)
    _add_flags(p, "training", {k: v for k, v in _TRAIN_FLAGS.items() if k not in ("method", "backbone", "seed")})
    _add_flags(p, "output", _OUT_FLAGS)

    p = command("verify-theorem", "check the direction ordering on random logistic-regression trials")
    _add_flags(p, "theorem", _THEOREM_FLAGS, aliases={"theorem_alpha": ("--alpha",)})
    _add_flags(p, "output", {"out": (str, "output directory for theorem.json, '-' for stdout only")})
    return parser


def _read_config_file(path: Path) -> dict:
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected a JSON object of config keys")
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then flags given on the command line."""
    values: dict = {}
    if args.config is not None:
        values.update(_read_config_file(args.config))
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    values.update(flags)
    return RunConfig.from_mapping(values)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve_config(args)
        return COMMANDS[args.command](rc)
    except (InvLearnError, OSError) as exc:
        print(f"invlearn {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
