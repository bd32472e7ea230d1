"""Exposure bias in offline AUC and its inverse-propensity correction.

Clicks are simulated as relevance times exposure, where exposure mixes a
fitted "what users tend to see" field with a uniform one through ``pi``.
As ``pi`` moves from 0 (uniform) to 1 (fully designed) the plain AUC on
held-out clicks drifts; weighting each test user by 1/p(O) keeps it closer
to the uniform-exposure value.

    python demos/exposure_bias.py
"""

import numpy as np

from cfml.config import resolve_config
from cfml.evaluation import evaluate_users
from cfml.experiments import fit_sources, inductive_split
from cfml.exposure import mixture_exposure, sample_clicks
from cfml.models import Architecture, init_params, predict_matrix, sgd_train

cfg = resolve_config({"experiment": "exposure-sweep", "sources": ["ncf-concat"]})
fields = fit_sources(cfg)["ncf-concat"]
print(f"designed exposure: mean {fields['design'].P.mean():.3f}, "
      f"range [{fields['design'].P.min():.3f}, {fields['design'].P.max():.3f}]")

arch = Architecture("ncf-concat", 32, (16,))
print(f"\n{'pi':>5} {'click rate':>11} {'AUC':>7} {'IPW AUC':>8}")
for pi in cfg["pi_grid"]:
    biased, unbiased, rate = [], [], []
    for seed in range(5):
        P = mixture_exposure(fields["design"], pi)
        clicks = sample_clicks(fields["relevance"], P, seed=seed)
        train, _, test = inductive_split(clicks.Y, negatives=4, seed=seed)
        p0 = init_params(arch, train.num_users, train.num_items, "fixed", 0.1, seed)
        params, _ = sgd_train(p0, train, lr=0.1, epochs=20, seed=seed)
        m = evaluate_users(predict_matrix(params), test.users, test.items, train.users, train.items, exposure=P.P)
        biased.append(m["mean_auc"])
        unbiased.append(m["mean_unbiased_auc"])
        rate.append(clicks.positive_rate)
    print(f"{pi:5.2f} {np.mean(rate):11.4f} {np.mean(biased):7.3f} {np.mean(unbiased):8.3f}")
