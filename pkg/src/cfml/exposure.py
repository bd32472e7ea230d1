"""Semi-synthetic click generation under a controllable exposure mechanism.

A relevance model is regressed on observed ratings and an exposure model
is fit to "was this cell rated" by logistic loss.  Clicks are then drawn as
``Bernoulli(p(R) * p(O))`` with

    p(R) = sigmoid(g_rel - mu) ** rho
    p(O) = pi * sigmoid(g_exp) + (1 - pi) * mean(sigmoid(g_exp)).

The constant second term keeps the expected exposure volume fixed while
``pi`` moves the field between uniform and the fitted design.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .dataset import InteractionSet, RatingTable
from .io import read_matrix, write_json, write_matrix
from .models import Architecture, ModelParams, backward, forward, init_params, loss_and_grad, predict_matrix

logger = logging.getLogger(__name__)

__all__ = [
    "EXPOSURE_FLOOR",
    "RelevanceModel",
    "ExposureField",
    "ClickMatrix",
    "FitError",
    "fit_relevance",
    "fit_exposure",
    "relevance_prob",
    "relevance_matrix",
    "design_field",
    "mixture_exposure",
    "sample_clicks",
    "ipw_weights",
    "ipw_risk",
    "generation_manifest",
]

EXPOSURE_FLOOR = 1e-6


class FitError(RuntimeError):
    """Relevance or exposure fitting diverged."""


@dataclass
class RelevanceModel:
    params: ModelParams
    mu: float = 3.0
    rho: float = 2.0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")


@dataclass
class ExposureField:
    P: np.ndarray
    pi: float = 1.0
    source: str = ""

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        if not 0.0 <= self.pi <= 1.0:
            raise ValueError(f"pi must lie in [0, 1], got {self.pi}")
        if np.any(~np.isfinite(self.P)) or np.any(self.P <= 0) or np.any(self.P > 1):
            raise ValueError("exposure probabilities must lie in (0, 1]")

    def save(self, path) -> None:
        write_matrix(path, self.P)

    @classmethod
    def load(cls, path, pi=1.0, source="") -> "ExposureField":
        return cls(read_matrix(path), pi, source)


@dataclass
class ClickMatrix:
    Y: np.ndarray
    seed: int

    @property
    def positive_rate(self) -> float:
        return float((self.Y > 0).mean())

    def save(self, path) -> None:
        write_matrix(path, self.Y)


# ---------------------------------------------------------------------------
# fitting


def _adam(params: ModelParams, grad_fn, n, lr, epochs, batch_size, seed):
    """Mini-batch Adam over ``n`` examples; ``grad_fn(idx) -> (loss, grad)``."""
    rng = np.random.default_rng(seed)
    arrays = [a.copy() for a in params.arrays()]
    params = params.with_arrays(arrays)
    m = [np.zeros_like(a) for a in arrays]
    v = [np.zeros_like(a) for a in arrays]
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            value, grad = grad_fn(params, idx)
            if not np.isfinite(value):
                raise FitError(f"non-finite loss at epoch {epoch}")
            total += value * len(idx)
            t += 1
            for k, g in enumerate(grad.arrays()):
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mhat = m[k] / (1 - b1**t)
                vhat = v[k] / (1 - b2**t)
                arrays[k] -= lr * mhat / (np.sqrt(vhat) + eps)
        history.append(total / n)
    return params, history


def fit_relevance(
    table: RatingTable,
    arch: Architecture,
    lr: float = 1e-3,
    epochs: int = 50,
    batch_size: int = 256,
    init_scale: float = 0.1,
    seed: int = 0,
    mu: float = 3.0,
    rho: float = 2.0,
) -> RelevanceModel:
    """Least-squares regression of ratings with Adam, on all observed ratings."""
    if len(table) == 0:
        raise ValueError("empty rating table")
    params = init_params(arch, table.num_users, table.num_items, "fixed", init_scale, seed)
    users, items = table.users, table.items
    target = np.asarray(table.ratings, dtype=float)

    def grad_fn(p, idx):
        pred = forward(p, users[idx], items[idx])
        resid = pred - target[idx]
        return float(np.mean(resid**2)), backward(p, users[idx], items[idx], 2.0 * resid / len(idx))

    params, history = _adam(params, grad_fn, len(table), lr, epochs, batch_size, seed + 1)
    return RelevanceModel(params, mu, rho, history)


def fit_exposure(
    data: InteractionSet,
    arch: Architecture,
    lr: float = 1e-3,
    epochs: int = 50,
    batch_size: int = 256,
    init_scale: float = 0.01,
    seed: int = 0,
):
    """Logistic fit of "cell was rated" against an equal number of unrated cells.

    ``data`` lists the rated cells (every listed pair counts as exposed).
    Returns ``(params, loss_history)``; the designed exposure is
    ``sigmoid(forward(params, u, i))``.
    """
    nu, ni = data.num_users, data.num_items
    rated = np.zeros((nu, ni), dtype=bool)
    rated[data.users, data.items] = True
    unrated = np.flatnonzero(~rated.ravel())
    if len(unrated) == 0:
        raise ValueError("every cell is rated; exposure is not identifiable")
    rng = np.random.default_rng(seed)
    neg = rng.choice(unrated, size=min(len(data), len(unrated)), replace=False)
    users = np.concatenate([data.users, neg // ni])
    items = np.concatenate([data.items, neg % ni])
    labels = np.concatenate([np.ones(len(data)), -np.ones(len(neg))])
    params = init_params(arch, nu, ni, "fixed", init_scale, seed)

    def grad_fn(p, idx):
        return loss_and_grad(p, users[idx], items[idx], labels[idx], "log")

    return _adam(params, grad_fn, len(users), lr, epochs, batch_size, seed + 1)


# ---------------------------------------------------------------------------
# fields


def relevance_prob(model: RelevanceModel, user, item) -> float:
    g = forward(model.params, user, item)
    return expit(g - model.mu) ** model.rho


def relevance_matrix(model: RelevanceModel) -> np.ndarray:
    return expit(predict_matrix(model.params) - model.mu) ** model.rho


def design_field(params: ModelParams, source: str = "") -> ExposureField:
    P = expit(predict_matrix(params))
    return ExposureField(np.maximum(P, EXPOSURE_FLOOR), 1.0, source)


def mixture_exposure(design: ExposureField, pi: float) -> ExposureField:
    if not 0.0 <= pi <= 1.0:
        raise ValueError(f"pi must lie in [0, 1], got {pi}")
    P = pi * design.P + (1.0 - pi) * float(design.P.mean())
    return ExposureField(P, float(pi), design.source)


def sample_clicks(rel, exposure: ExposureField, seed: int) -> ClickMatrix:
    """Independent Bernoulli clicks with probability ``p(R) * p(O)``.

    ``rel`` is a :class:`RelevanceModel` or an array of relevance probabilities.
    """
    pr = relevance_matrix(rel) if isinstance(rel, RelevanceModel) else np.asarray(rel, dtype=float)
    if pr.shape != exposure.P.shape:
        raise ValueError("relevance and exposure fields differ in shape")
    rng = np.random.default_rng(seed)
    hit = rng.random(pr.shape) < pr * exposure.P
    return ClickMatrix(np.where(hit, 1.0, -1.0), seed)


def ipw_weights(exposure, floor: float = EXPOSURE_FLOOR) -> np.ndarray:
    P = exposure.P if isinstance(exposure, ExposureField) else np.asarray(exposure, dtype=float)
    bad = np.argwhere(~(P > floor))
    if len(bad):
        cell = tuple(int(v) for v in bad[0])
        raise ValueError(f"exposure probability {P[cell]!r} at cell {cell} is at or below the floor {floor}")
    return 1.0 / P


def ipw_risk(losses, observed, exposure) -> float:
    """``sum_{observed} loss / p(O) / |cells|``: unbiased for the uniform mean loss."""
    losses = np.asarray(losses, dtype=float)
    w = ipw_weights(exposure)
    return float(np.sum(losses * w * np.asarray(observed, dtype=bool)) / losses.size)


def generation_manifest(path, **fields) -> None:
    write_json(path, fields)
