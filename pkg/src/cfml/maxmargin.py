"""Nuclear-norm max-margin program and the MCF margin comparison.

The program is ``min ||W||_* s.t. y_c W_c >= 1`` over the constrained cells
``c = (u, i)``.  Two independent solvers are provided:

* :func:`nucsvm_solve`: proximal gradient on the squared-hinge penalty
  with singular value thresholding and geometric penalty continuation.
* :func:`nucsvm_oracle`: the factored problem
  ``min (||U||^2 + ||V||^2) / 2 s.t. y_c (U V^T)_c >= 1`` solved by SLSQP.

Both return a feasible point obtained by dividing the final iterate by its
smallest constrained margin, so ``min_c y_c W_c = 1`` exactly.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .io import write_matrix
from .models import normalized_margins, nuclear_norm

logger = logging.getLogger(__name__)

__all__ = [
    "MarginProgram",
    "MatrixSolution",
    "MarginGapReport",
    "SolverError",
    "svt",
    "nucsvm_solve",
    "nucsvm_oracle",
    "margin_compare",
    "write_gap_reports",
]


class SolverError(RuntimeError):
    """Raised when a solver exhausts its iteration budget.

    ``best`` holds the best iterate found so far, ``residuals`` a dict of
    diagnostics.
    """

    def __init__(self, message, best=None, residuals=None):
        super().__init__(message)
        self.best = best
        self.residuals = residuals or {}


@dataclass(frozen=True)
class MarginProgram:
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        labels = np.asarray(self.labels, dtype=float)
        if not (len(users) == len(items) == len(labels)) or len(users) == 0:
            raise ValueError("need a non-empty, aligned constraint list")
        if not np.all(np.abs(labels) == 1):
            raise ValueError("labels must be -1 or +1")
        if users.max() >= self.shape[0] or items.max() >= self.shape[1] or min(users.min(), items.min()) < 0:
            raise ValueError("constraint index outside the matrix")
        flat = users * self.shape[1] + items
        if len(np.unique(flat)) != len(flat):
            raise ValueError("duplicate constrained cell")
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @classmethod
    def from_interactions(cls, data, idx=None) -> "MarginProgram":
        if idx is not None:
            data = data.subset(idx)
        return cls(data.users, data.items, data.labels, (data.num_users, data.num_items))

    def margins(self, W) -> np.ndarray:
        return self.labels * W[self.users, self.items]

    def violation(self, W) -> float:
        return float(max(0.0, np.max(1.0 - self.margins(W))))


@dataclass
class MatrixSolution:
    W: np.ndarray
    nuclear_norm: float
    violation: float
    duality_gap: float
    iterations: int
    info: dict = field(default_factory=dict)

    def save(self, path) -> None:
        """Binary matrix at ``path`` plus ``path + '.json'`` sidecar."""
        write_matrix(path, self.W)
        with open(str(path) + ".json", "w") as fh:
            json.dump(
                {
                    "nuclear_norm": self.nuclear_norm,
                    "violation": self.violation,
                    "duality_gap": self.duality_gap,
                    "iterations": self.iterations,
                    "shape": list(self.W.shape),
                    **{k: v for k, v in self.info.items() if isinstance(v, (int, float, str))},
                },
                fh,
                indent=2,
            )


@dataclass
class MarginGapReport:
    epoch: int
    l2_gap: float
    min_margin_gap: float
    gamma_svm: np.ndarray
    gamma_mcf: np.ndarray


def svt(M, tau):
    """Singular value soft-thresholding, the prox of ``tau * ||.||_*``."""
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    s = np.maximum(s - tau, 0.0)
    keep = s > 0
    return (U[:, keep] * s[keep]) @ Vt[keep]


def _feasible(prog, W):
    m = prog.margins(W).min()
    if m <= 0:
        return None
    return W / m


def _dual_bound(prog, lam):
    """Lower bound ``sum(lam) / ||Lambda||_sp`` from multipliers ``lam >= 0``."""
    if not np.any(lam > 0):
        return 0.0
    Lam = np.zeros(prog.shape)
    Lam[prog.users, prog.items] = lam * prog.labels
    sp = np.linalg.norm(Lam, 2)
    return float(lam.sum() / sp)


def _solution(prog, W, iterations, lam, info):
    feas = _feasible(prog, W)
    if feas is None:
        raise SolverError("iterate violates a sign constraint", best=W)
    nuc = nuclear_norm(feas)
    lower = _dual_bound(prog, lam) if lam is not None else float("nan")
    info = dict(info)
    info["dual_bound"] = lower
    return MatrixSolution(
        W=feas,
        nuclear_norm=nuc,
        violation=prog.violation(feas),
        duality_gap=nuc - lower,
        iterations=iterations,
        info=info,
    )


def nucsvm_solve(
    prog: MarginProgram,
    penalty_start: float = 1.0,
    penalty_factor: float = 10.0,
    penalty_max: float = 1e6,
    max_iter: int = 200_000,
    tol: float = 1e-6,
    stage_iter: int = 20_000,
) -> MatrixSolution:
    """Squared-hinge penalty + accelerated proximal gradient with SVT steps.

    Stage k minimizes ``||W||_* + (rho_k / 2) sum_c max(0, 1 - y_c W_c)^2``
    with ``rho_k = penalty_start * penalty_factor**k`` up to ``penalty_max``,
    warm-started from the previous stage.  The step starts at ``1/rho_k``
    and is halved whenever the objective increases.  A stage ends when the
    relative objective change drops below ``tol``.
    """
    m, n = prog.shape
    users, items, y = prog.users, prog.items, prog.labels
    W = np.zeros((m, n))
    rho = penalty_start
    total = 0
    stages = 0
    lam = None

    def objective(W, rho):
        h = np.maximum(0.0, 1.0 - y * W[users, items])
        return nuclear_norm(W) + 0.5 * rho * float(h @ h)

    while True:
        step = 1.0 / rho
        V = W.copy()
        t_mom = 1.0
        f_old = objective(W, rho)
        converged = False
        for _ in range(stage_iter):
            total += 1
            h = np.maximum(0.0, 1.0 - y * V[users, items])
            G = np.zeros((m, n))
            G[users, items] = -rho * y * h
            W_new = svt(V - step * G, step)
            f_new = objective(W_new, rho)
            if f_new > f_old * (1 + 1e-12):
                # restart momentum and shrink the step
                step *= 0.5
                V = W.copy()
                t_mom = 1.0
                continue
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
            V = W_new + ((t_mom - 1.0) / t_next) * (W_new - W)
            t_mom = t_next
            rel = abs(f_old - f_new) / max(abs(f_old), 1e-300)
            W, f_old = W_new, f_new
            if rel < tol * 1e-3 and total > 1:
                converged = True
                break
            if total >= max_iter:
                break
        stages += 1
        lam = rho * np.maximum(0.0, 1.0 - y * W[users, items])
        if total >= max_iter:
            raise SolverError(
                f"nucsvm_solve hit max_iter={max_iter} at penalty {rho:g}",
                best=W,
                residuals={"violation": prog.violation(W), "penalty": rho},
            )
        if not converged:
            logger.debug("penalty stage %g ended on its iteration cap", rho)
        if rho >= penalty_max:
            break
        rho = min(rho * penalty_factor, penalty_max)

    sol = _solution(prog, W, total, lam, {"solver": "prox-svt", "stages": stages, "final_penalty": rho})
    raw_violation = prog.violation(W)
    sol.info["raw_violation"] = raw_violation
    return sol


def nucsvm_oracle(
    prog: MarginProgram,
    max_iter: int = 2_000,
    tol: float = 1e-10,
    seed: int = 0,
    restarts: int = 2,
) -> MatrixSolution:
    """Factored formulation solved by sequential quadratic programming.

    Uses ``||W||_* = min_{U V^T = W} (||U||_F^2 + ||V||_F^2) / 2`` with full
    inner rank ``min(m, n)`` and solves
    ``min (||U||^2 + ||V||^2) / 2  s.t.  y_c (U V^T)_c >= 1`` with SLSQP from
    random starts.  This shares no code path with :func:`nucsvm_solve`
    (no SVT, no penalty, different parameterization).
    """
    from scipy.optimize import minimize

    m, n = prog.shape
    r = min(m, n)
    users, items, y = prog.users, prog.items, prog.labels
    nc = len(y)
    rng = np.random.default_rng(seed)

    def split(x):
        return x[: m * r].reshape(m, r), x[m * r :].reshape(n, r)

    def fun(x):
        return 0.5 * float(x @ x), x

    def cons(x):
        U, V = split(x)
        return y * np.einsum("cr,cr->c", U[users], V[items]) - 1.0

    def cons_jac(x):
        U, V = split(x)
        J = np.zeros((nc, (m + n) * r))
        rows = np.arange(nc)
        for k in range(r):
            J[rows, users * r + k] = y * V[items, k]
            J[rows, m * r + items * r + k] = y * U[users, k]
        return J

    best = None
    total = 0
    for _ in range(max(restarts, 1)):
        x0 = rng.standard_normal((m + n) * r)
        res = minimize(
            fun,
            x0,
            jac=True,
            method="SLSQP",
            constraints=[{"type": "ineq", "fun": cons, "jac": cons_jac}],
            options={"maxiter": max_iter, "ftol": tol},
        )
        total += int(res.nit)
        U, V = split(res.x)
        W = U @ V.T
        if prog.margins(W).min() <= 0:
            continue
        cand = W / prog.margins(W).min()
        val = nuclear_norm(cand)
        if best is None or val < best[0]:
            best = (val, cand, res)
    if best is None:
        raise SolverError("nucsvm_oracle found no feasible point", residuals={"iterations": total})
    return _solution(prog, best[1], total, None, {"solver": "factored-slsqp", "status": best[2].message})


# ---------------------------------------------------------------------------


def _svm_margins(prog, svm: MatrixSolution):
    if svm.nuclear_norm <= 0:
        raise ValueError("SVM solution has zero nuclear norm")
    return prog.labels * svm.W[prog.users, prog.items] / svm.nuclear_norm


def margin_compare(checkpoints, svm: MatrixSolution, prog: MarginProgram) -> list[MarginGapReport]:
    """Normalized-margin gaps between MCF checkpoints and the nuclear-norm SVM.

    ``checkpoints`` is an iterable of ``(epoch, ModelParams)`` (or a dict
    epoch -> params).  For each checkpoint reports ``||gamma_svm - gamma_mcf||_2``
    and ``min gamma_mcf - min gamma_svm``.
    """
    if isinstance(checkpoints, dict):
        checkpoints = sorted(checkpoints.items())
    g_svm = _svm_margins(prog, svm)
    reports = []
    for epoch, params in checkpoints:
        g_mcf = normalized_margins(params, prog.users, prog.items, prog.labels)
        reports.append(
            MarginGapReport(
                epoch=int(epoch),
                l2_gap=float(np.linalg.norm(g_svm - g_mcf)),
                min_margin_gap=float(g_mcf.min() - g_svm.min()),
                gamma_svm=g_svm,
                gamma_mcf=g_mcf,
            )
        )
    return reports


def write_gap_reports(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "l2_gap", "min_margin_gap"])
        for r in reports:
            writer.writerow([r.epoch, repr(r.l2_gap), repr(r.min_margin_gap)])
