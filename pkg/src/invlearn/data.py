"""Dataset ingestion, splitting, unlabeled-pair sampling and synthetic PU data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from invlearn.errors import (
    ConfigError,
    DataError,
    EmptyDatasetError,
    ExhaustionError,
    InsufficientDataError,
    ParseError,
)

SPLIT_RATIOS = (0.6, 0.2, 0.2)
TRAIN_RATIO = 0.9

# guards floor(r * n) against products like 0.29 * 100 = 28.999999999999996
_FLOOR_SLACK = 1e-9


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed, independent across distinct ``keys``."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def as_rng(seed: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    label: int


@dataclass
class Interactions:
    """Column-oriented list of (user, item, label) observations."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64).reshape(-1)
        self.items = np.asarray(self.items, dtype=np.int64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if not (len(self.users) == len(self.items) == len(self.labels)):
            raise DataError("users, items and labels must have equal length")
        if len(self.labels) and not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be binary")

    @classmethod
    def empty(cls) -> Interactions:
        return cls(np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def from_records(cls, records: Sequence[tuple[int, int, int]]) -> Interactions:
        if not records:
            return cls.empty()
        arr = np.asarray(records, dtype=np.int64).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[Interaction]:
        for u, i, y in zip(self.users.tolist(), self.items.tolist(), self.labels.tolist()):
            yield Interaction(u, i, y)

    def take(self, idx) -> Interactions:
        return Interactions(self.users[idx], self.items[idx], self.labels[idx])

    def codes(self, num_items: int) -> np.ndarray:
        return self.users * num_items + self.items

    def check_bounds(self, num_users: int, num_items: int) -> None:
        if len(self) == 0:
            return
        if self.users.min() < 0 or self.users.max() >= num_users:
            raise DataError(f"user id out of range [0, {num_users})")
        if self.items.min() < 0 or self.items.max() >= num_items:
            raise DataError(f"item id out of range [0, {num_items})")

    @staticmethod
    def concat(parts: Sequence[Interactions]) -> Interactions:
        if not parts:
            return Interactions.empty()
        return Interactions(
            np.concatenate([p.users for p in parts]),
            np.concatenate([p.items for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )


@dataclass
class DatasetBundle:
    num_users: int
    num_items: int
    train_train: Interactions
    train_test: Interactions
    validation: Interactions
    test: Interactions
    labeled_codes: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        splits = (self.train_train, self.train_test, self.validation, self.test)
        for part in splits:
            part.check_bounds(self.num_users, self.num_items)
        if self.labeled_codes is None:
            codes = np.concatenate([p.codes(self.num_items) for p in splits])
            self.labeled_codes = np.unique(codes)

    @property
    def train(self) -> Interactions:
        return Interactions.concat([self.train_train, self.train_test])

    @property
    def all_labeled(self) -> Interactions:
        return Interactions.concat([self.train_train, self.train_test, self.validation, self.test])

    @property
    def num_unlabeled(self) -> int:
        return self.num_users * self.num_items - len(self.labeled_codes)

    def is_labeled(self, users, items) -> np.ndarray:
        return _member(np.asarray(users) * self.num_items + np.asarray(items), self.labeled_codes)


@dataclass
class GroundTruth:
    """Noise-free labels behind a synthetic dataset."""

    user_factors: np.ndarray
    item_factors: np.ndarray
    threshold: float

    def scores(self, users, items) -> np.ndarray:
        return np.einsum(
            "nk,nk->n",
            self.user_factors[np.asarray(users)],
            self.item_factors[np.asarray(items)],
        )

    def oracle_label(self, users, items) -> np.ndarray:
        return (self.scores(users, items) > self.threshold).astype(np.int64)

    def label_matrix(self) -> np.ndarray:
        return (self.user_factors @ self.item_factors.T > self.threshold).astype(np.int64)


def _member(codes: np.ndarray, sorted_codes: np.ndarray) -> np.ndarray:
    if len(sorted_codes) == 0:
        return np.zeros(np.shape(codes), dtype=bool)
    pos = np.searchsorted(sorted_codes, codes)
    pos = np.minimum(pos, len(sorted_codes) - 1)
    return sorted_codes[pos] == codes


def load_movielens(
    path: str | Path, pos_threshold: int = 4, neg_threshold: int = 2
) -> tuple[int, int, Interactions]:
    """Read a ``user::item::rating::timestamp`` ratings file.

    Ratings ``>= pos_threshold`` become positives and ``<= neg_threshold``
    negatives; anything in between is dropped. Raw ids are re-indexed densely
    in order of first appearance among the kept rows.
    """
    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    records = []
    with open(path, encoding="latin-1") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split("::")
            if len(fields) != 4:
                raise ParseError(line_no, f"expected 4 '::'-separated fields, got {len(fields)}")
            raw_user, raw_item, raw_rating, _ = fields
            try:
                rating = int(raw_rating)
            except ValueError:
                raise ParseError(line_no, f"rating {raw_rating!r} is not an integer") from None
            if not raw_user or not raw_item:
                raise ParseError(line_no, "empty user or item id")
            if rating >= pos_threshold:
                label = 1
            elif rating <= neg_threshold:
                label = 0
            else:
                continue
            u = user_map.setdefault(raw_user, len(user_map))
            i = item_map.setdefault(raw_item, len(item_map))
            records.append((u, i, label))
    if not records:
        raise EmptyDatasetError(f"{path}: no rows pass the rating thresholds")
    return len(user_map), len(item_map), Interactions.from_records(records)


def _floor(ratio: float, n: int) -> int:
    return int(math.floor(ratio * n + _FLOOR_SLACK))


def split_dataset(
    interactions: Interactions,
    ratios: tuple[float, float, float] = SPLIT_RATIOS,
    seed: int | np.random.Generator = 0,
) -> tuple[Interactions, Interactions, Interactions]:
    """Shuffle, then cut into train / validation / test; the remainder goes to test."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"split ratios must be three non-negative fractions summing to 1, got {ratios}")
    n = len(interactions)
    if n == 0:
        raise EmptyDatasetError("cannot split an empty interaction list")
    perm = as_rng(seed).permutation(n)
    n_train = _floor(ratios[0], n)
    n_val = _floor(ratios[1], n)
    return (
        interactions.take(perm[:n_train]),
        interactions.take(perm[n_train : n_train + n_val]),
        interactions.take(perm[n_train + n_val :]),
    )


def split_train(
    train: Interactions, train_ratio: float = TRAIN_RATIO, seed: int | np.random.Generator = 0
) -> tuple[Interactions, Interactions]:
    if not 0 < train_ratio < 1:
        raise ConfigError(f"train_ratio must lie in (0, 1), got {train_ratio}")
    n = len(train)
    if n < 2:
        raise InsufficientDataError(f"need at least 2 training interactions to split, got {n}")
    perm = as_rng(seed).permutation(n)
    k = min(max(_floor(train_ratio, n), 1), n - 1)
    return train.take(perm[:k]), train.take(perm[k:])


def make_bundle(
    num_users: int,
    num_items: int,
    interactions: Interactions,
    seed: int,
    ratios: tuple[float, float, float] = SPLIT_RATIOS,
    train_ratio: float = TRAIN_RATIO,
) -> DatasetBundle:
    """60/20/20 split followed by the 90/10 training-train / training-test split.

    Rows are put in (user, item, label) order first, so the splits depend on
    the set of rows and the seed but not on the input order.
    """
    interactions = interactions.take(np.lexsort((interactions.labels, interactions.codes(num_items))))
    train, val, test = split_dataset(interactions, ratios, derive_seed(seed, 0xDA7A, 1))
    train_train, train_test = split_train(train, train_ratio, derive_seed(seed, 0xDA7A, 2))
    for name, part in (("train_train", train_train), ("train_test", train_test),
                       ("validation", val), ("test", test)):
        if len(part) == 0:
            raise InsufficientDataError(f"split {name!r} is empty; dataset has {len(interactions)} rows")
    return DatasetBundle(num_users, num_items, train_train, train_test, val, test)


def sample_unlabeled(
    num_users: int,
    num_items: int,
    labeled_codes: np.ndarray,
    count: int,
    seed: int | np.random.Generator,
) -> np.ndarray:
    """Uniformly sample ``count`` distinct pairs outside ``labeled_codes``.

    ``labeled_codes`` is a sorted array of ``user * num_items + item``.
    Returns an ``(count, 2)`` int array of (user, item).
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    total = num_users * num_items
    free = total - len(labeled_codes)
    if free < count:
        raise ExhaustionError(f"requested {count} unlabeled pairs but only {free} exist")
    rng = as_rng(seed)
    if free <= 4 * count:
        # dense regime: rejection sampling would stall
        mask = np.ones(total, dtype=bool)
        mask[labeled_codes] = False
        pool = np.flatnonzero(mask)
        codes = rng.choice(pool, size=count, replace=False)
    else:
        chosen: list[np.ndarray] = []
        seen = np.zeros(0, dtype=np.int64)
        need = count
        while need > 0:
            draw = rng.integers(0, total, size=int(need * 1.25) + 8)
            draw = draw[~_member(draw, labeled_codes)]
            _, first = np.unique(draw, return_index=True)
            draw = draw[np.sort(first)]
            draw = draw[~np.isin(draw, seen)][:need]
            chosen.append(draw)
            seen = np.concatenate([seen, draw])
            need -= len(draw)
        codes = np.concatenate(chosen)
    return np.stack([codes // num_items, codes % num_items], axis=1)


def generate_synthetic(
    num_users: int,
    num_items: int,
    latent_dim: int,
    label_density: float,
    flip_rate: float,
    seed: int,
    factor_decay: float = 1.0,
) -> tuple[DatasetBundle, GroundTruth]:
    """Low-rank PU dataset with a known oracle.

    A pair is truly positive iff its latent dot product exceeds the grid
    median. ``label_density`` of all pairs are revealed, ``flip_rate`` of the
    revealed labels are inverted, and the result is split by ``make_bundle``.
    Latent dimension ``k`` has standard deviation ``factor_decay ** k``.
    """
    if not 0 < label_density <= 1:
        raise ConfigError(f"label_density must lie in (0, 1], got {label_density}")
    if not 0 <= flip_rate < 0.5:
        raise ConfigError(f"flip_rate must lie in [0, 0.5), got {flip_rate}")
    if not 0 < factor_decay <= 1:
        raise ConfigError(f"factor_decay must lie in (0, 1], got {factor_decay}")
    if num_users < 1 or num_items < 1 or latent_dim < 1:
        raise ConfigError("num_users, num_items and latent_dim must be positive")
    rng = np.random.default_rng(derive_seed(seed, 0xDA7A, 0))
    scale = factor_decay ** np.arange(latent_dim)
    user_factors = rng.standard_normal((num_users, latent_dim)) * scale
    item_factors = rng.standard_normal((num_items, latent_dim)) * scale
    threshold = float(np.median(user_factors @ item_factors.T))
    truth = GroundTruth(user_factors, item_factors, threshold)

    total = num_users * num_items
    n_labeled = int(round(label_density * total))
    if n_labeled < 4:
        raise InsufficientDataError(f"label_density {label_density} reveals only {n_labeled} pairs")
    codes = rng.choice(total, size=n_labeled, replace=False)
    users, items = codes // num_items, codes % num_items
    labels = truth.oracle_label(users, items)
    n_flip = int(round(flip_rate * n_labeled))
    if n_flip:
        flip = rng.choice(n_labeled, size=n_flip, replace=False)
        labels[flip] = 1 - labels[flip]
    interactions = Interactions(users, items, labels)
    return make_bundle(num_users, num_items, interactions, seed), truth


def write_interactions_csv(path: str | Path, interactions: Interactions) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user", "item", "label"])
        writer.writerows(zip(interactions.users.tolist(), interactions.items.tolist(),
                             interactions.labels.tolist()))


def read_interactions_csv(path: str | Path) -> Interactions:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["user", "item", "label"]:
            raise ParseError(1, f"expected header user,item,label, got {header}")
        records = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                u, i, y = (int(v) for v in row)
            except ValueError:
                raise ParseError(line_no, f"malformed row {row}") from None
            if y not in (0, 1):
                raise ParseError(line_no, f"label must be 0 or 1, got {y}")
            records.append((u, i, y))
    if not records:
        raise EmptyDatasetError(f"{path}: no interactions")
    return Interactions.from_records(records)


def write_oracle_csv(path: str | Path, truth: GroundTruth) -> int:
    labels = truth.label_matrix()
    users, items = np.indices(labels.shape)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user", "item", "oracle_label"])
        writer.writerows(zip(users.ravel().tolist(), items.ravel().tolist(), labels.ravel().tolist()))
    return labels.size


def read_oracle_csv(path: str | Path) -> np.ndarray:
    """Load an oracle dump as a dense ``(num_users, num_items)`` label matrix."""
    arr = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    num_users, num_items = arr[:, 0].max() + 1, arr[:, 1].max() + 1
    out = np.zeros((num_users, num_items), dtype=np.int64)
    out[arr[:, 0], arr[:, 1]] = arr[:, 2]
    return out
