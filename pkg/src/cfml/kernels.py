"""Collaborative-filtering kernels, empirical tangent kernels and a kernel SVM.

The collaborative-filtering kernel is

    K_CF((u, i), (u', i')) = a + b * [i == i'] + c * [u == u'].

:func:`empirical_ntk` evaluates ``<grad f(u, i), grad f(u', i')>`` exactly
for a finite model without forming per-pair gradient vectors: every layer
contributes ``(delta delta'^T) * (act act'^T)`` and the embedding tables
contribute the input gradients masked by shared user/item indicators.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .io import read_matrix, write_matrix
from .models import Architecture, ModelParams

__all__ = [
    "KernelSpec",
    "GramMatrix",
    "DualSolution",
    "NotPSDError",
    "ConvergenceError",
    "kcf_closed_form",
    "kcf_eval",
    "kcf_gram",
    "empirical_ntk",
    "ntk_entries",
    "arccos_k0",
    "svm_train_dual",
    "svm_decision",
    "svm_predict",
]


class NotPSDError(ValueError):
    """Gram matrix has an eigenvalue below the tolerance."""


class ConvergenceError(RuntimeError):
    def __init__(self, message, best=None, residual=float("nan")):
        super().__init__(message)
        self.best = best
        self.residual = residual


@dataclass(frozen=True)
class KernelSpec:
    a: float
    b: float
    c: float
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        vals = (self.a, self.b, self.c)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ValueError("kernel weights must be finite and non-negative")
        if not any(v > 0 for v in vals):
            raise ValueError("kernel weights cannot all be zero")

    def to_json(self) -> str:
        return json.dumps({"a": self.a, "b": self.b, "c": self.c})

    @classmethod
    def from_json(cls, text: str) -> "KernelSpec":
        obj = json.loads(text)
        return cls(float(obj["a"]), float(obj["b"]), float(obj["c"]))


def kcf_closed_form(arch, init: str = "scaled", alpha=1.0) -> KernelSpec:
    """Tabulated limits of the tangent kernel under ``N(0, alpha/d)`` init.

    ``arch`` is an :class:`Architecture` or a kind string.  For MCF ``alpha``
    may be a pair ``(alpha_user_side, alpha_item_side)`` giving
    ``(0, alpha_1, alpha_2)``.  NCF values are tabulated for ``alpha = 1``.
    """
    kind = arch.kind if isinstance(arch, Architecture) else str(arch)
    if init != "scaled":
        raise ValueError(f"closed form only known for scaled initialization, got {init!r}")
    prov = {"arch": kind, "init": init, "alpha": alpha}
    if kind == "mcf":
        a1, a2 = (alpha, alpha) if np.isscalar(alpha) else tuple(alpha)
        if a1 <= 0 or a2 <= 0:
            raise ValueError("alpha must be positive")
        return KernelSpec(0.0, float(a1), float(a2), prov)
    if not np.isscalar(alpha) or alpha != 1.0:
        raise ValueError("NCF kernel constants are tabulated for alpha = 1 only")
    if kind == "ncf-concat":
        b = 0.5 - 1.0 / (2 * math.pi)
    elif kind == "ncf-add":
        b = 0.5 - (2.0 - math.sqrt(3.0)) / (2 * math.pi)
    else:
        raise ValueError(f"unknown architecture {kind!r}")
    return KernelSpec(1.0 / math.pi, b, b, prov)


def kcf_eval(spec: KernelSpec, pair, other) -> float:
    (u, i), (u2, i2) = pair, other
    return spec.a + spec.b * (i == i2) + spec.c * (u == u2)


def kcf_gram(spec: KernelSpec, users, items, users2=None, items2=None) -> np.ndarray:
    """Dense K_CF block between two pair lists (second defaults to the first)."""
    users = np.asarray(users)
    items = np.asarray(items)
    users2 = users if users2 is None else np.asarray(users2)
    items2 = items if items2 is None else np.asarray(items2)
    K = np.full((len(users), len(users2)), spec.a)
    K += spec.b * (items[:, None] == items2[None, :])
    K += spec.c * (users[:, None] == users2[None, :])
    return K


@dataclass
class GramMatrix:
    K: np.ndarray
    users: np.ndarray
    items: np.ndarray

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        n = len(self.users)
        if self.K.shape != (n, n) or len(self.items) != n:
            raise ValueError("Gram matrix shape does not match the pair list")
        scale = max(1.0, float(np.abs(self.K).max(initial=0.0)))
        if not np.allclose(self.K, self.K.T, rtol=0, atol=1e-10 * scale):
            raise ValueError("Gram matrix is not symmetric")

    @classmethod
    def from_spec(cls, spec: KernelSpec, users, items) -> "GramMatrix":
        return cls(kcf_gram(spec, users, items), np.asarray(users), np.asarray(items))

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.K)[0])

    def save(self, path) -> None:
        write_matrix(path, self.K)

    @classmethod
    def load(cls, path, users, items) -> "GramMatrix":
        return cls(read_matrix(path), np.asarray(users), np.asarray(items))


# ---------------------------------------------------------------------------
# empirical tangent kernel


def _ntk_factors(params: ModelParams, users, items):
    """Per-pair gradient factors.

    Returns ``(dense, emb_user, emb_item)``: ``dense`` is a list of
    ``(left, right)`` matrices whose layer contribution to the kernel is
    ``(left left'^T) * (right right'^T)`` (``right=None`` meaning a plain
    inner product), ``emb_user``/``emb_item`` the gradients with respect to
    ``z_u`` and ``z_i``.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    s = params.output_scale
    zu = params.user_emb[users]
    zi = params.item_emb[items]
    if params.arch.is_mcf:
        return [], s * zi, s * zu
    concat = params.arch.kind == "ncf-concat"
    x = np.concatenate([zu, zi], axis=1) if concat else zu + zi
    hidden = params.layers[:-1]
    w_out = params.layers[-1][0]
    acts = [x]
    pres = []
    if not hidden:
        pres.append(x)
        final = np.maximum(x, 0.0)
    else:
        a = x
        for W in hidden:
            h = a @ W.T
            pres.append(h)
            a = np.maximum(h, 0.0)
            acts.append(a)
        final = a
    dense = [(s * final, None)]
    delta = np.broadcast_to(s * w_out, final.shape) * (pres[-1] > 0)
    if hidden:
        for k in range(len(hidden) - 1, -1, -1):
            dense.append((delta, acts[k]))
            back = delta @ hidden[k]
            delta = back * (pres[k - 1] > 0) if k > 0 else back
    d = params.arch.d
    if concat:
        return dense, delta[:, :d], delta[:, d:]
    return dense, delta, delta


def empirical_ntk(params: ModelParams, users, items, users2=None, items2=None) -> np.ndarray:
    """Exact finite-width tangent kernel block between two pair lists."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    same = users2 is None
    users2 = users if same else np.asarray(users2, dtype=np.int64)
    items2 = items if same else np.asarray(items2, dtype=np.int64)
    f1 = _ntk_factors(params, users, items)
    f2 = f1 if same else _ntk_factors(params, users2, items2)
    K = np.zeros((len(users), len(users2)))
    for (l1, r1), (l2, r2) in zip(f1[0], f2[0]):
        block = l1 @ l2.T
        if r1 is not None:
            block *= r1 @ r2.T
        K += block
    K += (f1[1] @ f2[1].T) * (users[:, None] == users2[None, :])
    K += (f1[2] @ f2[2].T) * (items[:, None] == items2[None, :])
    if same:
        K = 0.5 * (K + K.T)
    return K


def ntk_entries(params: ModelParams, users, items, users2, items2) -> np.ndarray:
    """Kernel values for aligned pairs ``((users[k], items[k]), (users2[k], items2[k]))``."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    users2 = np.asarray(users2, dtype=np.int64)
    items2 = np.asarray(items2, dtype=np.int64)
    f1 = _ntk_factors(params, users, items)
    f2 = _ntk_factors(params, users2, items2)
    out = np.zeros(len(users))
    for (l1, r1), (l2, r2) in zip(f1[0], f2[0]):
        term = np.einsum("nk,nk->n", l1, l2)
        if r1 is not None:
            term *= np.einsum("nk,nk->n", r1, r2)
        out += term
    out += np.einsum("nk,nk->n", f1[1], f2[1]) * (users == users2)
    out += np.einsum("nk,nk->n", f1[2], f2[2]) * (items == items2)
    return out


def arccos_k0(x, y) -> float:
    """Order-zero arc-cosine kernel ``1 - arccos(cos(x, y)) / pi``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValueError("arc-cosine kernel is undefined for a zero vector")
    xu, yu = x / nx, y / ny
    # half-angle form stays accurate near parallel and antiparallel vectors
    angle = 2.0 * math.atan2(float(np.linalg.norm(xu - yu)), float(np.linalg.norm(xu + yu)))
    return 1.0 - angle / math.pi


# ---------------------------------------------------------------------------
# kernel SVM without intercept


@dataclass
class DualSolution:
    alpha: np.ndarray
    labels: np.ndarray
    users: np.ndarray
    items: np.ndarray
    primal: float
    dual: float
    kkt_residual: float
    iterations: int
    C: float

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.alpha > 0)

    @property
    def gap(self) -> float:
        return self.primal - self.dual


@numba.njit(cache=True)
def _greedy_cd(Q, C, tol, max_iter, alpha, grad):
    n = Q.shape[0]
    it = 0
    viol = 0.0
    while it < max_iter:
        best = -1
        viol = 0.0
        for k in range(n):
            g = grad[k]
            v = 0.0
            if g > 0.0 and alpha[k] < C:
                v = g
            elif g < 0.0 and alpha[k] > 0.0:
                v = -g
            if v > viol:
                viol = v
                best = k
        if viol < tol:
            break
        q = Q[best, best]
        new = alpha[best] + grad[best] / q
        if new < 0.0:
            new = 0.0
        elif new > C:
            new = C
        delta = new - alpha[best]
        alpha[best] = new
        for k in range(n):
            grad[k] -= delta * Q[k, best]
        it += 1
    return it, viol


def svm_train_dual(
    gram,
    labels,
    C: float = 1e6,
    tol: float = 1e-6,
    max_iter: int = 5_000_000,
    psd_tol: float = 1e-8,
) -> DualSolution:
    """Box-constrained dual ``max sum(alpha) - alpha^T Q alpha / 2``, ``Q = y y^T * K``.

    Greedy coordinate ascent: each step maximizes the dual exactly along the
    coordinate with the largest KKT violation.  ``gram`` is a
    :class:`GramMatrix` or a square array.
    """
    if isinstance(gram, GramMatrix):
        K, users, items = gram.K, gram.users, gram.items
    else:
        K = np.asarray(gram, dtype=float)
        users = items = np.arange(K.shape[0])
    y = np.asarray(labels, dtype=float)
    n = K.shape[0]
    if K.shape != (n, n) or len(y) != n:
        raise ValueError("Gram matrix and labels disagree in size")
    if not np.all(np.abs(y) == 1):
        raise ValueError("labels must be -1 or +1")
    if C <= 0 or tol <= 0:
        raise ValueError("C and tol must be positive")
    lam_min = float(np.linalg.eigvalsh(K)[0]) if n <= 5000 else 0.0
    if lam_min < -psd_tol * max(1.0, float(np.trace(K))):
        raise NotPSDError(f"Gram matrix is not PSD (smallest eigenvalue {lam_min:.3g})")
    if np.any(np.diag(K) <= 0):
        raise NotPSDError("Gram matrix has a non-positive diagonal entry")
    Q = np.ascontiguousarray((y[:, None] * y[None, :]) * K)
    alpha = np.zeros(n)
    grad = np.ones(n)
    iters, viol = _greedy_cd(Q, float(C), float(tol), int(max_iter), alpha, grad)
    # recompute the gradient to shed accumulated rounding
    grad = 1.0 - Q @ alpha
    viol = _kkt(alpha, grad, C)
    if viol >= tol * 10:
        raise ConvergenceError(
            f"dual coordinate ascent stopped after {iters} steps with KKT residual {viol:.3g}",
            best=alpha,
            residual=viol,
        )
    quad = float(alpha @ (Q @ alpha))
    margins = 1.0 - grad  # y_k f(x_k)
    dual = float(alpha.sum() - 0.5 * quad)
    primal = float(0.5 * quad + C * np.maximum(0.0, 1.0 - margins).sum())
    return DualSolution(alpha, y, np.asarray(users), np.asarray(items), primal, dual, viol, int(iters), float(C))


def _kkt(alpha, grad, C):
    up = (grad > 0) & (alpha < C)
    down = (grad < 0) & (alpha > 0)
    v = np.concatenate([grad[up], -grad[down], [0.0]])
    return float(v.max())


def svm_decision(sol: DualSolution, K_query) -> np.ndarray:
    """Scores from a precomputed kernel block ``K_query`` (queries x train pairs)."""
    return np.asarray(K_query) @ (sol.alpha * sol.labels)


def svm_predict(sol: DualSolution, spec: KernelSpec, users, items):
    """``sum_k alpha_k y_k K_CF(train_k, query)``; scalars in give a float out."""
    scalar = np.ndim(users) == 0
    users = np.atleast_1d(users)
    items = np.atleast_1d(items)
    sup = sol.support
    K = kcf_gram(spec, users, items, sol.users[sup], sol.items[sup])
    out = K @ (sol.alpha[sup] * sol.labels[sup])
    return float(out[0]) if scalar else out
