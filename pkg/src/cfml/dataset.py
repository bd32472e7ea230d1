"""Rating logs, implicit-feedback interaction sets, splits and synthetic data.

All sampling routines take an integer ``seed`` and draw from
``numpy.random.default_rng(seed)`` (PCG64), which is bit-reproducible across
platforms.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "DataFormatError",
    "RatingTable",
    "InteractionSet",
    "SplitPlan",
    "EncodedPair",
    "load_ratings",
    "write_ratings",
    "to_implicit",
    "sample_negatives",
    "split_transductive",
    "split_leave_last",
    "gen_synthetic",
    "synthetic_ratings",
    "subsample_popular",
    "encode_pair",
]


class DataFormatError(ValueError):
    """Raised when a rating file or interaction file cannot be parsed."""


@dataclass(frozen=True)
class RatingTable:
    """Explicit ratings with dense 0-based user and item indices.

    ``user_labels[k]`` / ``item_labels[k]`` hold the original ids that were
    remapped to index ``k``.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    num_users: int
    num_items: int
    user_labels: np.ndarray | None = None
    item_labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.users)


@dataclass(frozen=True)
class InteractionSet:
    """Labeled (user, item) pairs with signed implicit feedback y in {-1, +1}."""

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    ratings: np.ndarray | None = None
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(users) == len(items) == len(labels)):
            raise ValueError("users, items and labels must have equal length")
        if len(users):
            if users.min() < 0 or users.max() >= self.num_users:
                raise ValueError("user index out of range")
            if items.min() < 0 or items.max() >= self.num_items:
                raise ValueError("item index out of range")
            if not np.all(np.abs(labels) == 1):
                raise ValueError("labels must be -1 or +1")
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.users)

    @property
    def positives(self) -> set[tuple[int, int]]:
        mask = self.labels > 0
        return set(zip(self.users[mask].tolist(), self.items[mask].tolist()))

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.users.tolist(), self.items.tolist()))

    def subset(self, idx) -> "InteractionSet":
        idx = np.asarray(idx, dtype=np.int64)
        return InteractionSet(
            self.num_users,
            self.num_items,
            self.users[idx],
            self.items[idx],
            self.labels[idx],
            None if self.ratings is None else self.ratings[idx],
            None if self.timestamps is None else self.timestamps[idx],
        )

    def label_matrix(self) -> np.ndarray:
        """Dense matrix with y on labeled cells and 0 elsewhere."""
        out = np.zeros((self.num_users, self.num_items), dtype=np.int64)
        out[self.users, self.items] = self.labels
        return out

    # serialization ---------------------------------------------------------

    def to_text(self, path) -> None:
        """Write one ``u<TAB>i<TAB>y`` line per labeled pair."""
        with open(path, "w") as fh:
            fh.write(f"# num_users={self.num_users} num_items={self.num_items}\n")
            for u, i, y in zip(self.users, self.items, self.labels):
                fh.write(f"{u}\t{i}\t{y}\n")

    @classmethod
    def from_text(cls, path) -> "InteractionSet":
        users, items, labels = [], [], []
        num_users = num_items = None
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    for tok in line[1:].split():
                        key, _, val = tok.partition("=")
                        if key == "num_users":
                            num_users = int(val)
                        elif key == "num_items":
                            num_items = int(val)
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise DataFormatError(f"line {lineno}: expected 3 fields, got {len(parts)}")
                try:
                    u, i, y = (int(p) for p in parts)
                except ValueError as exc:
                    raise DataFormatError(f"line {lineno}: {exc}") from None
                users.append(u)
                items.append(i)
                labels.append(y)
        if num_users is None:
            num_users = max(users) + 1 if users else 0
        if num_items is None:
            num_items = max(items) + 1 if items else 0
        return cls(num_users, num_items, np.array(users), np.array(items), np.array(labels))

    def to_json(self) -> str:
        return json.dumps(
            {
                "num_users": self.num_users,
                "num_items": self.num_items,
                "users": self.users.tolist(),
                "items": self.items.tolist(),
                "labels": self.labels.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "InteractionSet":
        obj = json.loads(text)
        return cls(obj["num_users"], obj["num_items"], obj["users"], obj["items"], obj["labels"])


@dataclass(frozen=True)
class SplitPlan:
    """Index sets (into an InteractionSet) for train / validation / test."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    mode: str
    beta: float | None = None
    excluded_users: tuple[int, ...] = field(default_factory=tuple)

    @property
    def n_train(self) -> int:
        return len(self.train)

    @property
    def n_test(self) -> int:
        return len(self.test)


@dataclass(frozen=True)
class EncodedPair:
    user_onehot: np.ndarray
    item_onehot: np.ndarray
    combined: np.ndarray


# ---------------------------------------------------------------------------
# loading


def load_ratings(path) -> RatingTable:
    """Read a MovieLens ``u.data`` style file (``user item rating timestamp``).

    Fields may be separated by tabs or runs of whitespace.  Original ids are
    remapped to dense indices in increasing id order.
    """
    raw = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataFormatError(f"line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                u, i = int(parts[0]), int(parts[1])
                r = float(parts[2])
                t = int(parts[3])
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: {exc}") from None
            if t < 0:
                raise DataFormatError(f"line {lineno}: negative timestamp")
            raw.append((u, i, r, t, lineno))
    if not raw:
        raise DataFormatError("no rows")

    arr = np.array([row[:2] for row in raw], dtype=np.int64)
    seen: dict[tuple[int, int], int] = {}
    for u, i, _, _, lineno in raw:
        if (u, i) in seen:
            raise DataFormatError(
                f"line {lineno}: duplicate (user, item) = ({u}, {i}), first seen on line {seen[(u, i)]}"
            )
        seen[(u, i)] = lineno

    user_labels, users = np.unique(arr[:, 0], return_inverse=True)
    item_labels, items = np.unique(arr[:, 1], return_inverse=True)
    return RatingTable(
        users=users.astype(np.int64),
        items=items.astype(np.int64),
        ratings=np.array([row[2] for row in raw]),
        timestamps=np.array([row[3] for row in raw], dtype=np.int64),
        num_users=len(user_labels),
        num_items=len(item_labels),
        user_labels=user_labels,
        item_labels=item_labels,
    )


def write_ratings(table: RatingTable, path) -> None:
    """Write a table back in ``u.data`` format (1-based ids when no labels are stored)."""
    ulab = table.user_labels if table.user_labels is not None else np.arange(table.num_users) + 1
    ilab = table.item_labels if table.item_labels is not None else np.arange(table.num_items) + 1
    with open(path, "w") as fh:
        for u, i, r, t in zip(table.users, table.items, table.ratings, table.timestamps):
            rating = int(r) if float(r).is_integer() else r
            fh.write(f"{ulab[u]}\t{ilab[i]}\t{rating}\t{t}\n")


def to_implicit(table: RatingTable, threshold: float = 4.0) -> InteractionSet:
    """Keep ratings >= ``threshold`` as positive clicks (y = +1)."""
    mask = table.ratings >= threshold
    return InteractionSet(
        num_users=table.num_users,
        num_items=table.num_items,
        users=table.users[mask],
        items=table.items[mask],
        labels=np.ones(int(mask.sum()), dtype=np.int64),
        ratings=table.ratings[mask],
        timestamps=table.timestamps[mask],
    )


# ---------------------------------------------------------------------------
# sampling and splitting


def sample_negatives(data: InteractionSet, per_positive: int, seed: int = 0) -> InteractionSet:
    """Append uniformly sampled negatives, stratified per user.

    For user u, ``min(per_positive * #positives(u), #unobserved(u))`` items
    are drawn without replacement from the items u has no labeled pair
    with.  Negatives carry timestamp -1 and rating NaN.
    """
    if per_positive < 0:
        raise ValueError("per_positive must be non-negative")
    if per_positive == 0:
        return data
    rng = np.random.default_rng(seed)
    n_items = data.num_items
    order = np.lexsort((data.items, data.users))
    users_sorted = data.users[order]
    bounds = np.searchsorted(users_sorted, np.arange(data.num_users + 1))
    pos_mask = data.labels > 0

    neg_u, neg_i = [], []
    for u in range(data.num_users):
        rows = order[bounds[u] : bounds[u + 1]]
        if len(rows) == 0:
            continue
        n_pos = int(pos_mask[rows].sum())
        if n_pos == 0:
            continue
        observed = np.zeros(n_items, dtype=bool)
        observed[data.items[rows]] = True
        complement = np.flatnonzero(~observed)
        k = min(per_positive * n_pos, len(complement))
        if k == 0:
            continue
        chosen = rng.choice(complement, size=k, replace=False)
        neg_u.append(np.full(k, u, dtype=np.int64))
        neg_i.append(np.sort(chosen))
    if not neg_u:
        return data
    neg_u = np.concatenate(neg_u)
    neg_i = np.concatenate(neg_i)
    n_neg = len(neg_u)
    ratings = None
    if data.ratings is not None:
        ratings = np.concatenate([data.ratings, np.full(n_neg, np.nan)])
    timestamps = None
    if data.timestamps is not None:
        timestamps = np.concatenate([data.timestamps, np.full(n_neg, -1, dtype=np.int64)])
    return InteractionSet(
        data.num_users,
        data.num_items,
        np.concatenate([data.users, neg_u]),
        np.concatenate([data.items, neg_i]),
        np.concatenate([data.labels, -np.ones(n_neg, dtype=np.int64)]),
        ratings,
        timestamps,
    )


def split_transductive(data: InteractionSet, beta: float, seed: int = 0) -> SplitPlan:
    """Uniform random partition with |test| = beta * |train| up to rounding."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    n = len(data)
    if n < 2:
        raise ValueError("need at least 2 labeled pairs to split")
    n_train = int(round(n / (1.0 + beta)))
    n_train = min(max(n_train, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return SplitPlan(
        train=np.sort(perm[:n_train]),
        validation=np.empty(0, dtype=np.int64),
        test=np.sort(perm[n_train:]),
        mode="transductive",
        beta=beta,
    )


def split_leave_last(data: InteractionSet, holdout_validation: bool = True) -> SplitPlan:
    """Per user: latest positive to test, second latest to validation, rest to train.

    Users with fewer than 3 positives keep all their pairs in train and are
    listed in ``excluded_users``.  Negatives always go to train.  Ties in
    timestamp are broken by item index.  With ``holdout_validation=False``
    only the last positive is held out (users need at least 2 positives).
    """
    if data.timestamps is None:
        raise ValueError("leave-last split needs timestamps")
    need = 3 if holdout_validation else 2
    pos = np.flatnonzero(data.labels > 0)
    order = pos[np.lexsort((data.items[pos], data.timestamps[pos], data.users[pos]))]
    test, val, excluded = [], [], []
    users_sorted = data.users[order]
    bounds = np.searchsorted(users_sorted, np.arange(data.num_users + 1))
    for u in range(data.num_users):
        rows = order[bounds[u] : bounds[u + 1]]
        if len(rows) == 0:
            continue
        if len(rows) < need:
            excluded.append(u)
            continue
        test.append(rows[-1])
        if holdout_validation:
            val.append(rows[-2])
    if excluded:
        logger.warning("leave-last split: %d users with fewer than %d positives excluded", len(excluded), need)
    held = np.zeros(len(data), dtype=bool)
    held[test] = True
    held[val] = True
    return SplitPlan(
        train=np.flatnonzero(~held),
        validation=np.sort(np.array(val, dtype=np.int64)),
        test=np.sort(np.array(test, dtype=np.int64)),
        mode="leave-last",
        excluded_users=tuple(excluded),
    )


# ---------------------------------------------------------------------------
# synthetic data


def gen_synthetic(num_users: int, num_items: int, rank: int, noise: float = 0.0, seed: int = 0) -> InteractionSet:
    """Fully labeled sign pattern of a random rank-``rank`` matrix.

    Each label is flipped independently with probability ``noise``.
    """
    if rank < 1 or rank > min(num_users, num_items):
        raise ValueError("rank must lie in [1, min(num_users, num_items)]")
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    left = rng.standard_normal((num_users, rank))
    right = rng.standard_normal((num_items, rank))
    signs = np.where(left @ right.T >= 0, 1, -1)
    if noise > 0:
        flips = rng.random(signs.shape) < noise
        signs = np.where(flips, -signs, signs)
    users, items = np.indices((num_users, num_items))
    return InteractionSet(num_users, num_items, users.ravel(), items.ravel(), signs.ravel())


def synthetic_ratings(
    num_users: int = 200,
    num_items: int = 300,
    rank: int = 5,
    density: float = 0.063,
    popularity_skew: float = 1.0,
    seed: int = 0,
) -> RatingTable:
    """MovieLens-like explicit ratings on a 1..5 scale.

    Observed cells are drawn with probability proportional to
    ``user_activity * item_popularity`` (both log-normal, the item one with
    spread ``popularity_skew``) so that the expected fill is ``density``.
    Ratings come from a low-rank affinity plus item quality, rounded and
    clipped to 1..5.  Timestamps increase within each user.
    """
    rng = np.random.default_rng(seed)
    activity = rng.lognormal(0.0, 0.8, num_users)
    popularity = rng.lognormal(0.0, popularity_skew, num_items)
    weight = np.outer(activity, popularity)
    prob = np.minimum(weight * (density * weight.size / weight.sum()), 0.95)
    observed = rng.random(weight.shape) < prob
    # every user needs a few ratings for leave-last style protocols
    for u in range(num_users):
        short = 5 - int(observed[u].sum())
        if short > 0:
            free = np.flatnonzero(~observed[u])
            pick = rng.choice(free, size=short, replace=False, p=popularity[free] / popularity[free].sum())
            observed[u, pick] = True

    left = rng.standard_normal((num_users, rank)) / np.sqrt(rank)
    right = rng.standard_normal((num_items, rank)) / np.sqrt(rank)
    quality = 0.5 * np.log(popularity)
    affinity = 3.6 + 0.9 * (left @ right.T) + quality[None, :] + 0.5 * rng.standard_normal(weight.shape)
    ratings = np.clip(np.rint(affinity), 1, 5)

    users, items = np.nonzero(observed)
    stamps = np.empty(len(users), dtype=np.int64)
    base = 874_724_710
    for u in range(num_users):
        rows = np.flatnonzero(users == u)
        stamps[rows] = base + np.sort(rng.choice(10_000_000, size=len(rows), replace=False))
    return RatingTable(
        users=users.astype(np.int64),
        items=items.astype(np.int64),
        ratings=ratings[users, items].astype(float),
        timestamps=stamps,
        num_users=num_users,
        num_items=num_items,
        user_labels=np.arange(1, num_users + 1),
        item_labels=np.arange(1, num_items + 1),
    )


def subsample_popular(table: RatingTable, num_users: int, num_items: int, seed: int = 0) -> RatingTable:
    """Keep ``num_items`` items drawn by popularity and ``num_users`` users drawn uniformly.

    Items are sampled without replacement with probability proportional to
    their rating count; users uniformly without replacement.  Indices are
    re-densified, preserving the original relative order.
    """
    rng = np.random.default_rng(seed)
    counts = np.bincount(table.items, minlength=table.num_items).astype(float)
    num_items = min(num_items, int((counts > 0).sum()))
    num_users = min(num_users, table.num_users)
    keep_items = np.sort(rng.choice(table.num_items, size=num_items, replace=False, p=counts / counts.sum()))
    keep_users = np.sort(rng.choice(table.num_users, size=num_users, replace=False))
    umap = np.full(table.num_users, -1)
    umap[keep_users] = np.arange(num_users)
    imap = np.full(table.num_items, -1)
    imap[keep_items] = np.arange(num_items)
    mask = (umap[table.users] >= 0) & (imap[table.items] >= 0)
    return RatingTable(
        users=umap[table.users[mask]],
        items=imap[table.items[mask]],
        ratings=table.ratings[mask],
        timestamps=table.timestamps[mask],
        num_users=num_users,
        num_items=num_items,
        user_labels=None if table.user_labels is None else table.user_labels[keep_users],
        item_labels=None if table.item_labels is None else table.item_labels[keep_items],
    )


def encode_pair(user: int, item: int, num_users: int, num_items: int, combine: str = "add") -> EncodedPair:
    """One-hot encodings of a pair.

    ``combine="add"`` stacks ``[e_u, e_i]`` (so that ``[Z_U; Z_I]^T x`` equals
    ``z_u + z_i``); ``"concat"`` returns the one-hot of the pair index
    ``u * num_items + i``; ``"outer"`` returns ``e_u e_i^T``.
    """
    if not (0 <= user < num_users and 0 <= item < num_items):
        raise IndexError("pair index out of range")
    e_u = np.zeros(num_users)
    e_u[user] = 1.0
    e_i = np.zeros(num_items)
    e_i[item] = 1.0
    if combine == "add":
        combined = np.concatenate([e_u, e_i])
    elif combine == "concat":
        combined = np.zeros(num_users * num_items)
        combined[user * num_items + item] = 1.0
    elif combine == "outer":
        combined = np.outer(e_u, e_i)
    else:
        raise ValueError(f"unknown combine mode {combine!r}")
    return EncodedPair(e_u, e_i, combined)
