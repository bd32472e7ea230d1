"""Ranking metrics, exposure-weighted AUC, divergences and bound terms.

Ranking follows a full-candidate protocol: for a user ``u`` with held-out
item ``i``, the candidates are all items except those in the user's
training pairs, and ``r`` is the 1-based position of ``i`` when candidates
are sorted by score (descending) with ties broken by item id (ascending).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .io import write_csv

__all__ = [
    "RankResult",
    "BoundInputs",
    "rank_of",
    "ranking_metrics",
    "unbiased_auc",
    "aggregate_unbiased_auc",
    "evaluate_users",
    "write_metrics",
    "divergence",
    "bound_terms",
    "transductive_slack",
    "C0",
    "rademacher_mc",
    "epsilon_second_moment",
]

C0 = math.sqrt(32.0 * math.log(4.0 * math.e) / 3.0)


@dataclass(frozen=True)
class RankResult:
    user: int
    item: int
    rank: int
    size: int


def rank_of(scores, relevant: int, candidates, user: int = -1) -> RankResult:
    """Rank of ``relevant`` among ``candidates`` (item ids indexing ``scores``)."""
    scores = np.asarray(scores, dtype=float)
    cand = np.asarray(sorted(set(int(c) for c in candidates)), dtype=np.int64)
    pos = np.searchsorted(cand, relevant)
    if pos >= len(cand) or cand[pos] != relevant:
        raise ValueError(f"relevant item {relevant} is not among the candidates")
    s = scores[cand]
    target = scores[relevant]
    higher = int(np.sum(s > target))
    ties_before = int(np.sum((s == target) & (cand < relevant)))
    return RankResult(int(user), int(relevant), 1 + higher + ties_before, len(cand))


def ranking_metrics(rank: int, size: int, k: int = 10) -> dict:
    if size < 2:
        raise ValueError("need at least two candidates")
    if not 1 <= rank <= size:
        raise ValueError("rank outside [1, size]")
    if k < 1:
        raise ValueError("k must be positive")
    hit = rank <= k
    return {
        "auc": (size - rank) / (size - 1),
        "hr": 1.0 if hit else 0.0,
        "ndcg": 1.0 / math.log2(rank + 1) if hit else 0.0,
    }


def unbiased_auc(rank: int, size: int, p_exposure: float) -> float:
    """Per-item term ``AUC / p(O)`` (before aggregation)."""
    if not 0.0 < p_exposure <= 1.0:
        raise ValueError("exposure probability must lie in (0, 1]")
    return ranking_metrics(rank, size)["auc"] / p_exposure


def aggregate_unbiased_auc(aucs, p_exposure, normalize: bool = True) -> float:
    """Weighted mean of per-user AUC with weights ``1/p``.

    ``normalize=True`` divides by the weight sum; ``False`` by the count.
    """
    aucs = np.asarray(aucs, dtype=float)
    w = 1.0 / np.asarray(p_exposure, dtype=float)
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("exposure probabilities must lie in (0, 1]")
    total = float(np.sum(aucs * w))
    return total / float(np.sum(w)) if normalize else total / len(aucs)


def evaluate_users(score_matrix, test_users, test_items, train_users, train_items, exposure=None, k: int = 10):
    """Per-user metrics on a full score matrix.

    Returns a dict of aligned arrays ``user, rank, auc, hr, ndcg, weight,
    unbiased_auc`` plus the aggregates ``mean_auc`` and ``mean_unbiased_auc``
    (self-normalized) and ``raw_unbiased_auc`` (count-normalized).  Users
    left with fewer than two candidates are skipped and counted in
    ``skipped_users``.
    ``exposure`` is an optional ``|U| x |I|`` matrix of ``p(O)``.
    """
    S = np.asarray(score_matrix, dtype=float)
    nu, ni = S.shape
    seen = np.zeros((nu, ni), dtype=bool)
    seen[np.asarray(train_users, dtype=np.int64), np.asarray(train_items, dtype=np.int64)] = True
    rows = {key: [] for key in ("user", "rank", "auc", "hr", "ndcg", "weight", "unbiased_auc")}
    item_ids = np.arange(ni)
    skipped = 0
    for u, i in zip(np.asarray(test_users), np.asarray(test_items)):
        u, i = int(u), int(i)
        keep = ~seen[u]
        keep[i] = True
        cand = item_ids[keep]
        if len(cand) < 2:
            skipped += 1
            continue
        s = S[u, cand]
        t = S[u, i]
        rank = 1 + int(np.sum(s > t)) + int(np.sum((s == t) & (cand < i)))
        m = ranking_metrics(rank, len(cand), k)
        p = 1.0 if exposure is None else float(exposure[u, i])
        rows["user"].append(u)
        rows["rank"].append(rank)
        rows["auc"].append(m["auc"])
        rows["hr"].append(m["hr"])
        rows["ndcg"].append(m["ndcg"])
        rows["weight"].append(1.0 / p)
        rows["unbiased_auc"].append(m["auc"] / p)
    out = {k_: np.asarray(v) for k_, v in rows.items()}
    if len(out["user"]) == 0:
        raise ValueError("no test user has at least two candidate items")
    out["skipped_users"] = skipped
    w = out["weight"]
    out["mean_auc"] = float(out["auc"].mean())
    out["mean_hr"] = float(out["hr"].mean())
    out["mean_ndcg"] = float(out["ndcg"].mean())
    out["mean_unbiased_auc"] = float(np.sum(out["unbiased_auc"]) / np.sum(w))
    out["raw_unbiased_auc"] = float(np.mean(out["unbiased_auc"]))
    return out


def write_metrics(path, metrics: dict) -> None:
    cols = ("user", "rank", "auc", "hr", "ndcg", "weight", "unbiased_auc")
    write_csv(path, cols, zip(*(metrics[c] for c in cols)))


# ---------------------------------------------------------------------------
# divergences and bounds


def divergence(kind: str, P, Q) -> float:
    """``D2 = sum p^2/q - 1`` (chi-square) or ``D1 = sum p^2/q`` on a finite support."""
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if P.shape != Q.shape:
        raise ValueError("distributions differ in shape")
    if np.any(P < 0) or np.any(Q < 0):
        raise ValueError("probabilities must be non-negative")
    if np.any((P > 0) & (Q <= 0)):
        raise ValueError("support of P is not contained in the support of Q")
    mask = P > 0
    s = float(np.sum(P[mask] ** 2 / Q[mask]))
    if kind == "D1":
        return s
    if kind == "D2":
        return s - 1.0
    raise ValueError(f"unknown divergence {kind!r}")


@dataclass(frozen=True)
class BoundInputs:
    gamma: float
    n1: int | None = None
    n2: int | None = None
    beta: float | None = None
    layer_norms: tuple = ()
    b_ncf: float | None = None
    lambda_nuc: float | None = None
    num_users: int | None = None
    num_items: int | None = None
    d1: float | None = None
    d2: float | None = None


_REQUIRED = {
    "transductive-ncf": ("gamma", "n1", "beta", "layer_norms", "b_ncf"),
    "transductive-mcf": ("gamma", "n1", "beta", "lambda_nuc", "num_users", "num_items"),
    "inductive-ncf": ("gamma", "n1", "layer_norms", "b_ncf", "d2"),
    "inductive-mcf": ("gamma", "n1", "lambda_nuc", "num_users", "num_items", "d1"),
}


def bound_terms(inputs: BoundInputs, setting: str) -> float:
    """Complexity term of the generalization bound (absolute constants dropped).

    ``n1`` is the training-set size ``n`` in the inductive settings.
    """
    if setting not in _REQUIRED:
        raise ValueError(f"unknown setting {setting!r}")
    for name in _REQUIRED[setting]:
        val = getattr(inputs, name)
        if val is None or (name == "layer_norms" and len(val) == 0):
            raise ValueError(f"{setting} requires {name}")
        if name == "layer_norms":
            if any(v <= 0 for v in val):
                raise ValueError("layer norms must be positive")
        elif name != "d2" and val <= 0:
            raise ValueError(f"{name} must be positive")
    x = inputs
    if setting == "transductive-ncf":
        q = len(x.layer_norms)
        return (1 + x.beta) * math.sqrt(q) * x.b_ncf * math.prod(x.layer_norms) / (x.gamma * x.beta * math.sqrt(x.n1))
    if setting == "transductive-mcf":
        u_small = min(x.num_users, x.num_items)
        i_large = max(x.num_users, x.num_items)
        return (
            (1 + x.beta) * math.log(u_small) ** 0.25 * math.sqrt(i_large) * x.lambda_nuc / (x.gamma * x.beta * x.n1)
        )
    if setting == "inductive-ncf":
        if x.d2 < 0:
            raise ValueError("D2 must be non-negative")
        q = len(x.layer_norms)
        return math.sqrt(q) * x.b_ncf * math.prod(x.layer_norms) * math.sqrt(x.d2 + 1) / (x.gamma * math.sqrt(x.n1))
    n = x.n1
    return math.sqrt(x.d1 * (x.num_users + x.num_items) * x.lambda_nuc * math.log(9 * n)) / (x.gamma * math.sqrt(n))


def transductive_slack(n1: int, n2: int, delta: float) -> dict:
    """Shape of the confidence term, ``c0 * sqrt(log(1/delta) / n2)``.

    The finite-sample constant that multiplies it in the source bound is
    not evaluated.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    p0 = n1 * n2 / (n1 + n2) ** 2
    return {"c0": C0, "p0": p0, "slack": C0 * math.sqrt(math.log(1.0 / delta) / n2)}


# ---------------------------------------------------------------------------
# transductive Rademacher complexity by simulation


def _eps_matrix(rng, shape, p):
    """Entries +1 and -1 with probability ``p`` each, else 0."""
    r = rng.random(shape)
    return np.where(r < p, 1.0, np.where(r < 2 * p, -1.0, 0.0))


def rademacher_mc(lambda_nuc: float, n1: int, n2: int, dims, samples: int = 200, seed: int = 0):
    """Monte-Carlo ``(1/n1 + 1/n2) * lambda_nuc * E ||Sigma(p0)||_sp``.

    Returns ``(estimate, standard_error)``.
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    p0 = n1 * n2 / (n1 + n2) ** 2
    if not 0 < p0 <= 0.5:
        raise ValueError("p0 must lie in (0, 1/2]")
    rng = np.random.default_rng(seed)
    factor = (1.0 / n1 + 1.0 / n2) * lambda_nuc
    vals = np.empty(samples)
    for k in range(samples):
        E = _eps_matrix(rng, tuple(dims), p0)
        vals[k] = np.linalg.norm(E, 2) if E.size > 1 else abs(E.item())
    vals *= factor
    se = float(vals.std(ddof=1) / math.sqrt(samples)) if samples > 1 else float("nan")
    return float(vals.mean()), se


def epsilon_second_moment(n1: int, n2: int, draws: int = 1_000_000, seed: int = 0):
    """Empirical ``E[eps(p0)^2]`` and its closed form ``2 n1 n2 / (n1+n2)^2``."""
    p0 = n1 * n2 / (n1 + n2) ** 2
    rng = np.random.default_rng(seed)
    e = _eps_matrix(rng, (draws,), p0)
    return float(np.mean(e * e)), 2.0 * n1 * n2 / (n1 + n2) ** 2
