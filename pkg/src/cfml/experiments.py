"""Experiment drivers.  Each writes per-seed CSVs, ``aggregate.json`` and
``manifest.json`` into an output directory.

No wall-clock values are written to the CSVs so reruns are byte-identical.
"""

from __future__ import annotations

import logging
import platform
from pathlib import Path

import numba
import numpy as np
import scipy

from . import __version__
from .config import ExperimentConfig
from .dataset import (
    InteractionSet,
    gen_synthetic,
    load_ratings,
    sample_negatives,
    split_leave_last,
    split_transductive,
    subsample_popular,
    synthetic_ratings,
    to_implicit,
)
from .evaluation import BoundInputs, bound_terms, evaluate_users
from .exposure import (
    design_field,
    fit_exposure,
    fit_relevance,
    mixture_exposure,
    relevance_matrix,
    sample_clicks,
)
from .io import write_csv, write_json
from .kernels import GramMatrix, kcf_closed_form, svm_predict, svm_train_dual
from .maxmargin import MarginProgram, margin_compare, nucsvm_solve
from .models import (
    Architecture,
    forward,
    init_params,
    loss_value,
    nuclear_norm,
    predict_matrix,
    predictor_matrix,
    sgd_train,
)

logger = logging.getLogger(__name__)

__all__ = ["ExperimentError", "run_experiment", "RUNNERS"]


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.message = message


def _arch(kind, d, hidden):
    return Architecture(kind, d, () if kind == "mcf" else tuple(hidden))


def _load_table(ds):
    if ds.get("source", "synthetic") == "file":
        return load_ratings(ds["path"])
    return synthetic_ratings(
        num_users=ds["num_users"],
        num_items=ds["num_items"],
        rank=ds["rank"],
        density=ds["density"],
        seed=ds["seed"],
    )


def _stats(values):
    arr = np.asarray(values, dtype=float)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std, "n": int(len(arr))}


# ---------------------------------------------------------------------------
# kernel-vs-model


def _kernel_vs_model(cfg: ExperimentConfig, out: Path):
    ds = cfg["dataset"]
    table = subsample_popular(_load_table(ds), ds["subsample_users"], ds["subsample_items"], seed=ds["seed"])
    implicit = to_implicit(table, ds["threshold"])
    grid = cfg["C"] if isinstance(cfg["C"], list) else [cfg["C"]]
    results = {}
    for seed in cfg["seeds"]:
        rows = []
        for k in cfg["negatives"]:
            data = sample_negatives(implicit, k, seed=seed)
            plan = split_leave_last(data, holdout_validation=True)
            train = data.subset(plan.train)
            val = data.subset(plan.validation)
            test = data.subset(plan.test)
            seen_u, seen_i = train.users, train.items
            nu, ni = data.num_users, data.num_items
            uu, ii = np.indices((nu, ni))
            for kind in cfg["archs"]:
                arch = _arch(kind, cfg["d"], cfg["hidden"])
                p0 = init_params(arch, nu, ni, cfg["init"]["scheme"], cfg["init"]["scale"], seed)
                params, _ = sgd_train(p0, train, lr=cfg["lr"], epochs=cfg["epochs"], loss=cfg["loss"], seed=seed)
                model_auc = evaluate_users(predict_matrix(params), test.users, test.items, seen_u, seen_i)["mean_auc"]

                spec = kcf_closed_form(kind)
                gram = GramMatrix.from_spec(spec, train.users, train.items)
                best = None
                for C in grid:
                    sol = svm_train_dual(gram, train.labels, C=C, tol=cfg["svm_tol"])
                    S = svm_predict(sol, spec, uu.ravel(), ii.ravel()).reshape(nu, ni)
                    score = evaluate_users(S, val.users, val.items, seen_u, seen_i)["mean_auc"]
                    if best is None or score > best[0]:
                        best = (score, C, S)
                svm_auc = evaluate_users(best[2], test.users, test.items, seen_u, seen_i)["mean_auc"]
                rows.append([kind, k, len(train), model_auc, svm_auc, best[1]])
                results.setdefault((kind, k), []).append((model_auc, svm_auc))
        write_csv(out / f"seed_{seed}.csv", ["arch", "negatives", "n_samples", "model_auc", "svm_auc", "svm_C"], rows)
    agg = {}
    for (kind, k), vals in sorted(results.items()):
        vals = np.asarray(vals)
        agg[f"{kind}/neg{k}"] = {
            "model_auc": _stats(vals[:, 0]),
            "svm_auc": _stats(vals[:, 1]),
            "abs_diff_of_means": float(abs(vals[:, 0].mean() - vals[:, 1].mean())),
        }
    return agg


# ---------------------------------------------------------------------------
# margin-convergence


def margin_run(cfg: ExperimentConfig, seed: int):
    """One MCF run plus the nuclear-norm SVM on the same synthetic instance.

    Returns ``(rows, trace, svm, prog)`` with one row per checkpoint.
    """
    ds = cfg["dataset"]
    data = gen_synthetic(ds["num_users"], ds["num_items"], ds["rank"], ds["noise"], seed=ds["seed"])
    prog = MarginProgram.from_interactions(data)
    svm = nucsvm_solve(prog)
    arch = Architecture("mcf", cfg["d"])
    p0 = init_params(arch, data.num_users, data.num_items, cfg["init"]["scheme"], cfg["init"]["scale"], seed)
    checkpoints = sorted(set(c for c in cfg["checkpoints"] if c <= cfg["epochs"]))
    params, trace = sgd_train(
        p0, data, lr=cfg["lr"], epochs=cfg["epochs"], loss=cfg["loss"], seed=seed, snapshot_epochs=checkpoints
    )
    reports = margin_compare(trace.snapshots, svm, prog)
    by_epoch = {e: k for k, e in enumerate(trace.epoch)}
    rows = []
    for rep in reports:
        k = by_epoch[rep.epoch]
        rows.append([rep.epoch, trace.nuc_norm[k], trace.loss[k], rep.l2_gap, rep.min_margin_gap])
    return rows, trace, svm, prog


def _margin_convergence(cfg: ExperimentConfig, out: Path):
    finals = []
    for seed in cfg["seeds"]:
        rows, trace, svm, _ = margin_run(cfg, seed)
        write_csv(out / f"seed_{seed}.csv", ["epoch", "nuc_norm", "loss", "l2_gap", "min_margin_gap"], rows)
        trace.to_csv(out / f"trace_seed_{seed}.csv")
        finals.append(rows[-1])
    svm.save(out / "nucsvm.bin")
    finals = np.asarray(finals, dtype=float)
    return {
        "svm_nuclear_norm": svm.nuclear_norm,
        "final_l2_gap": _stats(finals[:, 3]),
        "final_min_margin_gap": _stats(finals[:, 4]),
        "final_loss": _stats(finals[:, 2]),
    }


# ---------------------------------------------------------------------------
# transductive-training


def _pair_accuracy(params, data):
    scores = forward(params, data.users, data.items)
    return float(np.mean(np.sign(scores) == data.labels))


def _bound_inputs(params, n1, n2, beta, gamma=1.0):
    if params.arch.is_mcf:
        return BoundInputs(
            gamma=gamma,
            n1=n1,
            n2=n2,
            beta=beta,
            lambda_nuc=nuclear_norm(predictor_matrix(params)),
            num_users=params.num_users,
            num_items=params.num_items,
        )
    emb = np.concatenate([params.user_emb, params.item_emb])
    return BoundInputs(
        gamma=gamma,
        n1=n1,
        n2=n2,
        beta=beta,
        layer_norms=tuple(float(np.linalg.norm(W)) for W in params.layers),
        b_ncf=float(np.linalg.norm(emb, axis=1).max()),
    )


def _transductive_training(cfg: ExperimentConfig, out: Path):
    table = _load_table(cfg["dataset"])
    implicit = to_implicit(table, cfg["dataset"]["threshold"])
    summary = {}
    for seed in cfg["seeds"]:
        data = sample_negatives(implicit, cfg["negatives"], seed=seed)
        plan = split_transductive(data, cfg["beta"], seed=seed)
        train = data.subset(plan.train)
        test = data.subset(plan.test)
        rows = []
        bounds = {}
        for kind in cfg["archs"]:
            arch = _arch(kind, cfg["d"], cfg["hidden"])
            p0 = init_params(arch, data.num_users, data.num_items, cfg["init"]["scheme"], cfg["init"]["scale"], seed)

            def record(epoch, params, trace, kind=kind):
                rows.append(
                    [
                        kind,
                        epoch,
                        trace.loss[-1],
                        loss_value(params, test.users, test.items, test.labels, cfg["loss"]),
                        _pair_accuracy(params, train),
                        _pair_accuracy(params, test),
                        trace.l2_norm[-1],
                    ]
                )

            params, _ = sgd_train(
                p0, train, lr=cfg["lr"], epochs=cfg["epochs"], loss=cfg["loss"], seed=seed, callback=record
            )
            setting = "transductive-mcf" if arch.is_mcf else "transductive-ncf"
            bounds[kind] = {
                "setting": setting,
                "complexity": bound_terms(_bound_inputs(params, len(train), len(test), cfg["beta"]), setting),
            }
            summary.setdefault(kind, []).append((rows[-1][5], bounds[kind]["complexity"]))
        write_csv(
            out / f"seed_{seed}.csv",
            ["arch", "epoch", "train_loss", "test_loss", "train_acc", "test_acc", "l2_norm"],
            rows,
        )
        write_json(out / f"bounds_seed_{seed}.json", bounds)
    return {
        kind: {"final_test_acc": _stats(np.asarray(v)[:, 0]), "complexity": _stats(np.asarray(v)[:, 1])}
        for kind, v in sorted(summary.items())
    }


# ---------------------------------------------------------------------------
# exposure-sweep


def inductive_split(clicks: np.ndarray, negatives: int, seed: int):
    """Per user: one random positive to test, one to validation, the rest to train.

    Each training positive gets ``negatives`` negatives drawn with
    replacement from the user's non-clicked cells (duplicates collapsed).
    Users with fewer than three positives contribute to training only.
    Returns ``(train, validation, test)`` interaction sets.
    """
    rng = np.random.default_rng(seed)
    nu, ni = clicks.shape
    tr_u, tr_i, tr_y, va, te = [], [], [], [], []
    for u in range(nu):
        pos = np.flatnonzero(clicks[u] > 0)
        neg = np.flatnonzero(clicks[u] <= 0)
        pos = rng.permutation(pos)
        if len(pos) >= 3:
            te.append((u, pos[0]))
            va.append((u, pos[1]))
            pos = pos[2:]
        if len(pos) == 0:
            continue
        tr_u.extend([u] * len(pos))
        tr_i.extend(pos.tolist())
        tr_y.extend([1] * len(pos))
        if len(neg) and negatives:
            drawn = np.unique(rng.choice(neg, size=negatives * len(pos), replace=True))
            tr_u.extend([u] * len(drawn))
            tr_i.extend(drawn.tolist())
            tr_y.extend([-1] * len(drawn))
    if not te:
        raise ExperimentError("split", "no user has three or more clicks; the click matrix is too sparse")

    def as_set(pairs):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return InteractionSet(nu, ni, pairs[:, 0], pairs[:, 1], np.ones(len(pairs), dtype=np.int64))

    train = InteractionSet(nu, ni, np.asarray(tr_u), np.asarray(tr_i), np.asarray(tr_y))
    return train, as_set(va), as_set(te)


def fit_sources(cfg: ExperimentConfig):
    """Relevance and designed-exposure fields for each configured source."""
    table = _load_table(cfg["dataset"])
    fit = cfg["fit"]
    rated = InteractionSet(
        table.num_users, table.num_items, table.users, table.items, np.ones(len(table), dtype=np.int64)
    )
    fields = {}
    for kind in cfg["sources"]:
        arch = _arch(kind, fit["d"], fit["hidden"])
        seed = cfg["dataset"]["seed"]
        rel = fit_relevance(
            table, arch, lr=fit["lr"], epochs=fit["relevance_epochs"], batch_size=fit["batch_size"], seed=seed,
            mu=cfg["mu"], rho=cfg["rho"],
        )
        g_exp, exp_hist = fit_exposure(
            rated, arch, lr=fit["lr"], epochs=fit["exposure_epochs"], batch_size=fit["batch_size"], seed=seed
        )
        fields[kind] = {
            "relevance": relevance_matrix(rel),
            "design": design_field(g_exp, source=kind),
            "rel_mse": rel.history[-1] if rel.history else float("nan"),
            "exp_bce": exp_hist[-1] if exp_hist else float("nan"),
            "observed_rate": len(table) / (table.num_users * table.num_items),
            "positive_rate_observed": float(np.mean(table.ratings >= cfg["dataset"]["threshold"]))
            * len(table)
            / (table.num_users * table.num_items),
        }
    return fields


def _exposure_sweep(cfg: ExperimentConfig, out: Path):
    fields = fit_sources(cfg)
    cells = {}
    for seed in cfg["seeds"]:
        rows = []
        for src in cfg["sources"]:
            f = fields[src]
            for pi in cfg["pi_grid"]:
                P = mixture_exposure(f["design"], float(pi))
                clicks = sample_clicks(f["relevance"], P, seed=seed)
                train, _, test = inductive_split(clicks.Y, cfg["negatives"], seed=seed)
                for kind in cfg["archs"]:
                    arch = _arch(kind, cfg["d"], cfg["hidden"])
                    p0 = init_params(
                        arch, train.num_users, train.num_items, cfg["init"]["scheme"], cfg["init"]["scale"], seed
                    )
                    params, _ = sgd_train(p0, train, lr=cfg["lr"], epochs=cfg["epochs"], loss=cfg["loss"], seed=seed)
                    m = evaluate_users(
                        predict_matrix(params), test.users, test.items, train.users, train.items, exposure=P.P
                    )
                    rows.append(
                        [pi, src, kind, m["mean_auc"], m["mean_unbiased_auc"], clicks.positive_rate, len(m["user"])]
                    )
                    cells.setdefault((src, kind, pi), []).append((m["mean_auc"], m["mean_unbiased_auc"]))
        write_csv(
            out / f"seed_{seed}.csv",
            ["pi", "source", "arch", "biased_auc", "unbiased_auc", "click_rate", "test_users"],
            rows,
        )
    agg = {"sources": {}}
    for src in cfg["sources"]:
        f = fields[src]
        agg["sources"][src] = {k: f[k] for k in ("rel_mse", "exp_bce", "observed_rate", "positive_rate_observed")}
    for (src, kind, pi), vals in sorted(cells.items()):
        vals = np.asarray(vals)
        agg[f"{src}/{kind}/pi={pi}"] = {"biased_auc": _stats(vals[:, 0]), "unbiased_auc": _stats(vals[:, 1])}
    return agg


RUNNERS = {
    "kernel-vs-model": _kernel_vs_model,
    "margin-convergence": _margin_convergence,
    "transductive-training": _transductive_training,
    "exposure-sweep": _exposure_sweep,
}


def manifest(cfg: ExperimentConfig) -> dict:
    return {
        "experiment": cfg.experiment,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "seeds": list(cfg["seeds"]),
        "versions": {
            "cfml": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
            "python": platform.python_version(),
        },
    }


def run_experiment(cfg: ExperimentConfig, out) -> Path:
    """Run ``cfg`` and write its artifacts under ``out``; returns the directory."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "manifest.json", manifest(cfg))
    aggregate = RUNNERS[cfg.experiment](cfg, out)
    write_json(out / "aggregate.json", aggregate)
    return out
