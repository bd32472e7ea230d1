"""Matrix-factorization and biasless ReLU neural collaborative filtering.

Both predictors are positively homogeneous in their parameters:
``f(c * theta) = c**L * f(theta)`` with ``L = 2`` for MCF and
``L = len(hidden) + 2`` for NCF (embeddings, hidden matrices and the output
vector each contribute one degree).

NCF layout.  The combined embedding ``x`` is ``z_u + z_i`` (addition) or
``[z_u, z_i]`` (concatenation).  With hidden widths ``(d1, ..., dq)`` the
network is ``w_out . relu(W_q ... relu(W_1 x))``.  With no hidden widths the
combined embedding itself is the hidden layer: ``w_out . relu(x)``; this is
the two-layer form used for the closed-form tangent kernels.  ``layers``
stores the matrices in forward order, the last one being the ``1 x width``
output row.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.special import expit, logsumexp

from .dataset import InteractionSet, SplitPlan

logger = logging.getLogger(__name__)

__all__ = [
    "ARCH_KINDS",
    "Architecture",
    "ModelParams",
    "TrainTrace",
    "TrainingError",
    "init_params",
    "forward",
    "predict_matrix",
    "predictor_matrix",
    "loss_and_grad",
    "backward",
    "sgd_train",
    "normalized_margins",
    "smoothed_margin",
    "nuclear_norm",
    "loss_value",
]

ARCH_KINDS = ("mcf", "ncf-add", "ncf-concat")
NORM_CAP = 1e8


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class Architecture:
    kind: str
    d: int
    hidden: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise ValueError(f"unknown architecture {self.kind!r}; expected one of {ARCH_KINDS}")
        if self.d < 1:
            raise ValueError("embedding dimension must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind == "mcf" and self.hidden:
            raise ValueError("MCF has no hidden layers")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")

    @property
    def is_mcf(self) -> bool:
        return self.kind == "mcf"

    @property
    def input_width(self) -> int:
        return 2 * self.d if self.kind == "ncf-concat" else self.d

    @property
    def degree(self) -> int:
        """Homogeneity degree L."""
        return 2 if self.is_mcf else len(self.hidden) + 2

    def layer_shapes(self) -> list[tuple[int, int]]:
        if self.is_mcf:
            return []
        widths = [self.input_width, *self.hidden]
        shapes = [(widths[k + 1], widths[k]) for k in range(len(self.hidden))]
        shapes.append((1, widths[-1]))
        return shapes


@dataclass
class ModelParams:
    arch: Architecture
    user_emb: np.ndarray
    item_emb: np.ndarray
    layers: list[np.ndarray] = field(default_factory=list)
    output_scale: float = 1.0
    init: dict = field(default_factory=dict)

    @property
    def num_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def degree(self) -> int:
        return self.arch.degree

    def arrays(self) -> list[np.ndarray]:
        return [self.user_emb, self.item_emb, *self.layers]

    def with_arrays(self, arrays) -> "ModelParams":
        arrays = list(arrays)
        return ModelParams(self.arch, arrays[0], arrays[1], arrays[2:], self.output_scale, dict(self.init))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, vec) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        out, pos = [], 0
        for a in self.arrays():
            out.append(vec[pos : pos + a.size].reshape(a.shape).copy())
            pos += a.size
        if pos != vec.size:
            raise ValueError("flat vector has the wrong length")
        return self.with_arrays(out)

    def norm(self) -> float:
        return math.sqrt(sum(float(np.vdot(a, a)) for a in self.arrays()))

    def scaled(self, c: float) -> "ModelParams":
        return self.with_arrays([c * a for a in self.arrays()])

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)


@dataclass
class TrainTrace:
    """Per-epoch training diagnostics (epoch 0 is the initialization)."""

    epoch: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    l2_norm: list[float] = field(default_factory=list)
    nuc_norm: list[float] = field(default_factory=list)
    min_margin: list[float] = field(default_factory=list)
    smoothed_margin: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    snapshots: dict = field(default_factory=dict)
    halted: str | None = None

    HEADER = ("epoch", "loss", "l2_norm", "nuc_norm", "min_margin", "smoothed_margin")

    def append(self, epoch, loss, l2, nuc, min_margin, smoothed):
        if self.epoch and epoch <= self.epoch[-1]:
            raise ValueError("epochs must be strictly increasing")
        self.epoch.append(int(epoch))
        self.loss.append(float(loss))
        self.l2_norm.append(float(l2))
        self.nuc_norm.append(float(nuc))
        self.min_margin.append(float(min_margin))
        self.smoothed_margin.append(float(smoothed))

    def __len__(self):
        return len(self.epoch)

    def rows(self):
        return zip(self.epoch, self.loss, self.l2_norm, self.nuc_norm, self.min_margin, self.smoothed_margin)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.HEADER)
            for row in self.rows():
                writer.writerow([row[0], *(repr(float(v)) for v in row[1:])])


# ---------------------------------------------------------------------------
# initialization


def init_params(
    arch: Architecture,
    num_users: int,
    num_items: int,
    scheme: str = "scaled",
    scale: float = 1.0,
    seed: int = 0,
) -> ModelParams:
    """Draw i.i.d. Gaussian parameters.

    scheme
        ``"scaled"``: variance ``scale / fan_in`` (``fan_in = d`` for the
        embeddings), i.e. ``N(0, alpha/d)``.
        ``"fixed"``: variance ``scale`` for every entry, e.g. ``N(0, 0.1)``.
        ``"ntk"``: standard-normal entries (variance ``scale``) with the
        width factor moved to the output, ``sqrt(2/d)`` for NCF and
        ``1/sqrt(d)`` for MCF; gradients are then taken w.r.t. the
        standard-normal entries.
    """
    if scale <= 0:
        raise ValueError("initialization variance must be positive")
    if scheme not in ("scaled", "fixed", "ntk"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)

    def draw(shape, fan_in):
        var = scale / fan_in if scheme == "scaled" else scale
        return rng.standard_normal(shape) * math.sqrt(var)

    d = arch.d
    user_emb = draw((num_users, d), d)
    item_emb = draw((num_items, d), d)
    layers = [draw(shape, shape[1]) for shape in arch.layer_shapes()]
    output_scale = 1.0
    if scheme == "ntk":
        output_scale = 1.0 / math.sqrt(d) if arch.is_mcf else math.sqrt(2.0 / d)
    return ModelParams(
        arch, user_emb, item_emb, layers, output_scale, {"scheme": scheme, "scale": scale, "seed": seed}
    )


# ---------------------------------------------------------------------------
# forward / backward


def _check_index(params: ModelParams, users, items):
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if users.size and (users.min() < 0 or users.max() >= params.num_users):
        raise IndexError("user index out of range")
    if items.size and (items.min() < 0 or items.max() >= params.num_items):
        raise IndexError("item index out of range")
    return users, items


def _combine(params, users, items):
    zu = params.user_emb[users]
    zi = params.item_emb[items]
    if params.arch.kind == "ncf-add":
        return zu + zi
    return np.concatenate([zu, zi], axis=-1)


def _ncf_forward(params, users, items):
    """Return (scores, cache) for a batch of pairs."""
    x = _combine(params, users, items)
    pre = []
    if not params.arch.hidden:
        pre.append(x)
        act = np.maximum(x, 0.0)
    else:
        act = x
        for W in params.layers[:-1]:
            h = act @ W.T
            pre.append(h)
            act = np.maximum(h, 0.0)
    out = params.output_scale * (act @ params.layers[-1][0])
    return out, (x, pre, act)


def forward(params: ModelParams, users, items):
    """Scores for pairs; scalars in give a float out."""
    scalar = np.ndim(users) == 0 and np.ndim(items) == 0
    users, items = _check_index(params, np.atleast_1d(users), np.atleast_1d(items))
    if params.arch.is_mcf:
        out = params.output_scale * np.einsum("nd,nd->n", params.user_emb[users], params.item_emb[items])
    else:
        out, _ = _ncf_forward(params, users, items)
    return float(out[0]) if scalar else out


def predict_matrix(params: ModelParams) -> np.ndarray:
    """Scores for every (user, item) cell."""
    if params.arch.is_mcf:
        return predictor_matrix(params)
    users, items = np.indices((params.num_users, params.num_items))
    return forward(params, users.ravel(), items.ravel()).reshape(params.num_users, params.num_items)


def predictor_matrix(params: ModelParams) -> np.ndarray:
    """The MCF predictor ``s * Z_U Z_I^T``."""
    if not params.arch.is_mcf:
        raise ValueError("predictor matrix is defined for MCF only")
    return params.output_scale * params.user_emb @ params.item_emb.T


def backward(params: ModelParams, users, items, dscore) -> ModelParams:
    """Gradient of ``sum_n dscore[n] * f(u_n, i_n)`` w.r.t. every parameter.

    The ReLU derivative at 0 is taken to be 0.
    """
    users, items = _check_index(params, users, items)
    dscore = np.asarray(dscore, dtype=float)
    s = params.output_scale
    g_user = np.zeros_like(params.user_emb)
    g_item = np.zeros_like(params.item_emb)
    if params.arch.is_mcf:
        np.add.at(g_user, users, (s * dscore)[:, None] * params.item_emb[items])
        np.add.at(g_item, items, (s * dscore)[:, None] * params.user_emb[users])
        return params.with_arrays([g_user, g_item])

    x, pre, act = _ncf_forward(params, users, items)[1]
    w_out = params.layers[-1][0]
    grads = [None] * len(params.layers)
    grads[-1] = (s * dscore @ act)[None, :]
    d_act = s * dscore[:, None] * w_out[None, :]
    if not params.arch.hidden:
        dx = d_act * (pre[0] > 0)
    else:
        inputs = [x] + [np.maximum(h, 0.0) for h in pre[:-1]]
        for k in range(len(params.layers) - 2, -1, -1):
            d_pre = d_act * (pre[k] > 0)
            grads[k] = d_pre.T @ inputs[k]
            d_act = d_pre @ params.layers[k]
        dx = d_act
    d = params.arch.d
    if params.arch.kind == "ncf-add":
        np.add.at(g_user, users, dx)
        np.add.at(g_item, items, dx)
    else:
        np.add.at(g_user, users, dx[:, :d])
        np.add.at(g_item, items, dx[:, d:])
    return params.with_arrays([g_user, g_item, *grads])


def _loss_terms(margins, loss):
    """Per-sample loss values and derivatives w.r.t. the margin."""
    if loss == "exp":
        val = np.exp(-margins)
        return val, -val
    if loss == "log":
        return np.logaddexp(0.0, -margins), -expit(-margins)
    raise ValueError(f"unknown loss {loss!r}; expected 'exp' or 'log'")


def loss_value(params: ModelParams, users, items, labels, loss: str = "log") -> float:
    margins = np.asarray(labels) * forward(params, users, items)
    return float(np.mean(_loss_terms(margins, loss)[0]))


def loss_and_grad(params: ModelParams, users, items, labels, loss: str = "log", weights=None):
    """Mean loss ``mean_n w_n * l(y_n f(u_n, i_n))`` and its exact gradient."""
    users = np.asarray(users, dtype=np.int64)
    if users.size == 0:
        raise ValueError("batch must be non-empty")
    labels = np.asarray(labels, dtype=float)
    margins = labels * forward(params, users, items)
    val, dval = _loss_terms(margins, loss)
    w = np.ones_like(val) if weights is None else np.asarray(weights, dtype=float)
    n = len(val)
    grad = backward(params, users, items, w * dval * labels / n)
    return float(np.sum(w * val) / n), grad


# ---------------------------------------------------------------------------
# diagnostics


def nuclear_norm(mat) -> float:
    return float(np.sum(np.linalg.svd(np.asarray(mat, dtype=float), compute_uv=False)))


def normalized_margins(params: ModelParams, users, items, labels) -> np.ndarray:
    """``y f / ||Z_U Z_I^T||_*`` for MCF, ``y f / ||theta||^L`` for NCF."""
    scores = forward(params, np.atleast_1d(users), np.atleast_1d(items))
    if params.arch.is_mcf:
        norm = nuclear_norm(predictor_matrix(params))
    else:
        norm = params.norm() ** params.degree
    if norm < 1e-12:
        raise ValueError("normalizer is numerically zero")
    return np.asarray(labels, dtype=float) * scores / norm


def smoothed_margin(params: ModelParams, users, items, labels, exponent: float | None = None) -> float:
    """``-log sum exp(-y f) / ||theta||^exponent`` (exponent defaults to L)."""
    users = np.atleast_1d(users)
    if users.size == 0:
        raise ValueError("need at least one pair")
    if exponent is None:
        exponent = params.degree
    margins = np.asarray(labels, dtype=float) * forward(params, users, np.atleast_1d(items))
    return float(-logsumexp(-margins) / params.norm() ** exponent)


# ---------------------------------------------------------------------------
# SGD


@numba.njit(cache=True)
def _dloss(margin, kind):
    # kind 0: exp, 1: log
    if kind == 0:
        return -math.exp(-margin)
    if margin >= 0:
        e = math.exp(-margin)
        return -e / (1.0 + e)
    return -1.0 / (1.0 + math.exp(margin))


@numba.njit(cache=True)
def _sgd_epoch_mcf(zu_all, zi_all, users, items, labels, order, lr, s, kind):
    d = zu_all.shape[1]
    for n in order:
        u = users[n]
        i = items[n]
        y = labels[n]
        f = 0.0
        for k in range(d):
            f += zu_all[u, k] * zi_all[i, k]
        f *= s
        g = lr * y * _dloss(y * f, kind) * s
        for k in range(d):
            a = zu_all[u, k]
            b = zi_all[i, k]
            zu_all[u, k] = a - g * b
            zi_all[i, k] = b - g * a


@numba.njit(cache=True)
def _sgd_epoch_ncf0(zu_all, zi_all, w, users, items, labels, order, lr, s, concat, kind):
    d = zu_all.shape[1]
    width = w.shape[0]
    x = np.empty(width)
    for n in order:
        u = users[n]
        i = items[n]
        y = labels[n]
        if concat:
            for k in range(d):
                x[k] = zu_all[u, k]
                x[d + k] = zi_all[i, k]
        else:
            for k in range(d):
                x[k] = zu_all[u, k] + zi_all[i, k]
        f = 0.0
        for k in range(width):
            if x[k] > 0:
                f += w[k] * x[k]
        f *= s
        g = lr * y * _dloss(y * f, kind) * s
        for k in range(width):
            if x[k] > 0:
                dx = g * w[k]
                w[k] -= g * x[k]
                if concat:
                    if k < d:
                        zu_all[u, k] -= dx
                    else:
                        zi_all[i, k - d] -= dx
                else:
                    zu_all[u, k] -= dx
                    zi_all[i, k] -= dx


@numba.njit(cache=True)
def _sgd_epoch_ncf1(zu_all, zi_all, W, w, users, items, labels, order, lr, s, concat, kind):
    d = zu_all.shape[1]
    width, nin = W.shape
    x = np.empty(nin)
    h = np.empty(width)
    dh = np.empty(width)
    dx = np.empty(nin)
    for n in order:
        u = users[n]
        i = items[n]
        y = labels[n]
        if concat:
            for k in range(d):
                x[k] = zu_all[u, k]
                x[d + k] = zi_all[i, k]
        else:
            for k in range(d):
                x[k] = zu_all[u, k] + zi_all[i, k]
        f = 0.0
        for j in range(width):
            acc = 0.0
            for k in range(nin):
                acc += W[j, k] * x[k]
            h[j] = acc
            if acc > 0:
                f += w[j] * acc
        f *= s
        g = lr * y * _dloss(y * f, kind) * s
        for k in range(nin):
            dx[k] = 0.0
        for j in range(width):
            if h[j] > 0:
                dh[j] = g * w[j]
                w[j] -= g * h[j]
                for k in range(nin):
                    dx[k] += dh[j] * W[j, k]
                    W[j, k] -= dh[j] * x[k]
        if concat:
            for k in range(d):
                zu_all[u, k] -= dx[k]
                zi_all[i, k] -= dx[d + k]
        else:
            for k in range(d):
                zu_all[u, k] -= dx[k]
                zi_all[i, k] -= dx[k]


def _sgd_epoch_generic(params, users, items, labels, order, lr, loss):
    for n in order:
        _, grad = loss_and_grad(params, users[n : n + 1], items[n : n + 1], labels[n : n + 1], loss)
        for a, g in zip(params.arrays(), grad.arrays()):
            a -= lr * g


def sgd_epoch(params: ModelParams, users, items, labels, order, lr: float, loss: str = "log") -> None:
    """One pass of single-sample SGD over ``order`` (updates ``params`` in place)."""
    kind = {"exp": 0, "log": 1}.get(loss)
    if kind is None:
        raise ValueError(f"unknown loss {loss!r}")
    users = np.ascontiguousarray(users, dtype=np.int64)
    items = np.ascontiguousarray(items, dtype=np.int64)
    labels = np.ascontiguousarray(labels, dtype=np.float64)
    order = np.ascontiguousarray(order, dtype=np.int64)
    arch = params.arch
    s = float(params.output_scale)
    concat = arch.kind == "ncf-concat"
    if arch.is_mcf:
        _sgd_epoch_mcf(params.user_emb, params.item_emb, users, items, labels, order, lr, s, kind)
    elif len(arch.hidden) == 0:
        _sgd_epoch_ncf0(params.user_emb, params.item_emb, params.layers[0][0], users, items, labels, order, lr, s, concat, kind)
    elif len(arch.hidden) == 1:
        _sgd_epoch_ncf1(
            params.user_emb, params.item_emb, params.layers[0], params.layers[1][0],
            users, items, labels, order, lr, s, concat, kind,
        )
    else:
        _sgd_epoch_generic(params, users, items, labels, order, lr, loss)


def _record(trace, params, epoch, users, items, labels, loss):
    scores = forward(params, users, items)
    margins = labels * scores
    val = float(np.mean(_loss_terms(margins, loss)[0]))
    l2 = params.norm()
    nuc = nuclear_norm(predictor_matrix(params)) if params.arch.is_mcf else float("nan")
    smooth = float(-logsumexp(-margins) / l2 ** params.degree) if l2 > 0 else float("nan")
    trace.append(epoch, val, l2, nuc, float(margins.min()), smooth)
    return val, l2


def sgd_train(
    params: ModelParams,
    data: InteractionSet,
    plan: SplitPlan | None = None,
    lr: float = 0.1,
    epochs: int = 100,
    loss: str = "log",
    seed: int = 0,
    record_every: int = 1,
    snapshot_epochs=(),
    callback=None,
):
    """Per-epoch reshuffled single-sample SGD on the training pairs.

    Returns ``(trained_params, trace)``; the input params are not modified.
    The trace has a row for epoch 0 and then every ``record_every`` epochs
    (always including the last).  ``snapshot_epochs`` stores parameter copies
    in ``trace.snapshots``.  ``callback(epoch, params, trace)`` runs after each
    recorded epoch.  Training stops early with ``trace.halted`` set when
    ``||theta||`` exceeds 1e8.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    idx = np.arange(len(data)) if plan is None else np.asarray(plan.train, dtype=np.int64)
    if len(idx) == 0:
        raise ValueError("empty training set")
    users = data.users[idx]
    items = data.items[idx]
    labels = data.labels[idx].astype(float)
    params = params.copy()
    rng = np.random.default_rng(seed)
    snapshot_epochs = set(int(e) for e in snapshot_epochs)
    trace = TrainTrace()

    _record(trace, params, 0, users, items, labels, loss)
    if 0 in snapshot_epochs:
        trace.snapshots[0] = params.copy()
    if callback is not None:
        callback(0, params, trace)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(idx))
        sgd_epoch(params, users, items, labels, order, lr, loss)
        if epoch in snapshot_epochs:
            trace.snapshots[epoch] = params.copy()
        if epoch % record_every == 0 or epoch == epochs:
            val, l2 = _record(trace, params, epoch, users, items, labels, loss)
            if not np.isfinite(val) or not np.isfinite(l2):
                raise TrainingError(f"non-finite loss at epoch {epoch} (loss={val}, norm={l2})")
            if callback is not None:
                callback(epoch, params, trace)
            if l2 > NORM_CAP:
                trace.halted = f"parameter norm {l2:.3g} exceeded {NORM_CAP:g} at epoch {epoch}"
                logger.warning(trace.halted)
                break
    return params, trace
