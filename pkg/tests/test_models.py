import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfml.dataset import gen_synthetic
from cfml.models import (
    Architecture,
    ModelParams,
    TrainTrace,
    backward,
    forward,
    init_params,
    loss_and_grad,
    loss_value,
    normalized_margins,
    nuclear_norm,
    predict_matrix,
    sgd_epoch,
    sgd_train,
    smoothed_margin,
)

ARCHS = [
    Architecture("mcf", 4),
    Architecture("ncf-add", 4),
    Architecture("ncf-concat", 4),
    Architecture("ncf-add", 4, (5,)),
    Architecture("ncf-concat", 3, (4, 3)),
]


def fd_grad(params, users, items, labels, loss, h=1e-6):
    flat = params.flat()
    out = np.empty_like(flat)
    for k in range(len(flat)):
        up, dn = flat.copy(), flat.copy()
        up[k] += h
        dn[k] -= h
        out[k] = (
            loss_value(params.from_flat(up), users, items, labels, loss)
            - loss_value(params.from_flat(dn), users, items, labels, loss)
        ) / (2 * h)
    return out


class TestArchitecture:
    def test_degrees(self):
        assert Architecture("mcf", 3).degree == 2
        assert Architecture("ncf-add", 3).degree == 2
        assert Architecture("ncf-concat", 3, (4, 4)).degree == 4

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            Architecture("MCF", 3)

    def test_mcf_rejects_hidden(self):
        with pytest.raises(ValueError):
            Architecture("mcf", 3, (2,))


class TestInit:
    def test_scaled_variance(self):
        p = init_params(Architecture("mcf", 10_000), 100, 1, "scaled", 1.0, seed=0)
        assert abs(p.user_emb.var() / 1e-4 - 1) < 0.05

    def test_fixed_variance(self):
        p = init_params(Architecture("mcf", 100), 1000, 1, "fixed", 0.1, seed=0)
        assert abs(p.user_emb.var() - 0.1) < 0.005

    def test_zero_variance_rejected(self):
        with pytest.raises(ValueError):
            init_params(Architecture("mcf", 3), 2, 2, "fixed", 0.0)

    def test_seeded(self):
        a = init_params(ARCHS[3], 3, 4, seed=2)
        b = init_params(ARCHS[3], 3, 4, seed=2)
        np.testing.assert_array_equal(a.flat(), b.flat())


class TestForward:
    def test_mcf_unit_vectors(self):
        p = ModelParams(Architecture("mcf", 2), np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))
        assert forward(p, 0, 0) == 1.0

    def test_ncf_add_relu(self):
        arch = Architecture("ncf-add", 2, (2,))
        p = ModelParams(arch, np.array([[-1.0, 1.0]]), np.array([[0.0, 1.0]]), [np.eye(2), np.ones((1, 2))])
        assert forward(p, 0, 0) == 2.0

    @pytest.mark.parametrize("arch", ARCHS, ids=lambda a: f"{a.kind}{a.hidden}")
    def test_homogeneity(self, arch):
        p = init_params(arch, 3, 4, seed=1)
        u, i = np.array([0, 1, 2, 2]), np.array([3, 0, 1, 2])
        L = arch.degree
        np.testing.assert_allclose(forward(p.scaled(2.0), u, i), 2.0**L * forward(p, u, i), rtol=1e-12)

    def test_index_out_of_range(self):
        p = init_params(ARCHS[0], 2, 2)
        with pytest.raises(IndexError):
            forward(p, 2, 0)

    def test_predict_matrix_matches_forward(self):
        p = init_params(ARCHS[4], 3, 5, seed=0)
        S = predict_matrix(p)
        assert S[2, 4] == pytest.approx(forward(p, 2, 4))


class TestLossAndGrad:
    def test_exp_at_zero_margin(self):
        p = init_params(ARCHS[0], 2, 2)
        p = p.with_arrays([np.zeros_like(a) for a in p.arrays()])
        val, _ = loss_and_grad(p, [0, 1], [1, 0], [1, -1], "exp")
        assert val == 1.0

    def test_log_tail(self):
        p = ModelParams(Architecture("mcf", 1), np.array([[100.0]]), np.array([[100.0]]))
        assert loss_value(p, [0], [0], [1], "log") < 1e-300 + 1e-12

    @pytest.mark.parametrize("arch", ARCHS, ids=lambda a: f"{a.kind}{a.hidden}")
    @pytest.mark.parametrize("loss", ["exp", "log"])
    def test_finite_differences(self, arch, loss):
        rng = np.random.default_rng(3)
        p = init_params(arch, 3, 4, "fixed", 0.5, seed=4)
        u, i = rng.integers(0, 3, 6), rng.integers(0, 4, 6)
        y = rng.choice([-1, 1], 6)
        _, g = loss_and_grad(p, u, i, y, loss)
        num = fd_grad(p, u, i, y, loss)
        np.testing.assert_allclose(g.flat(), num, rtol=1e-5, atol=1e-8)

    def test_weights(self):
        p = init_params(ARCHS[1], 2, 2, seed=0)
        v1, g1 = loss_and_grad(p, [0, 1], [0, 1], [1, 1], "log", weights=[2.0, 2.0])
        v2, g2 = loss_and_grad(p, [0, 1], [0, 1], [1, 1], "log")
        assert v1 == pytest.approx(2 * v2)
        np.testing.assert_allclose(g1.flat(), 2 * g2.flat())

    def test_backward_is_score_gradient(self):
        p = init_params(ARCHS[2], 2, 3, seed=0)
        g = backward(p, [1], [2], np.array([1.0])).flat()
        flat, h = p.flat(), 1e-6
        k = 7
        e = np.zeros_like(flat)
        e[k] = h
        num = (forward(p.from_flat(flat + e), 1, 2) - forward(p.from_flat(flat - e), 1, 2)) / (2 * h)
        assert g[k] == pytest.approx(num, rel=1e-6, abs=1e-9)


class TestSGD:
    def test_zero_lr(self):
        data = gen_synthetic(4, 4, 1, seed=0)
        p = init_params(ARCHS[3], 4, 4, seed=0)
        q, _ = sgd_train(p, data, lr=0.0, epochs=5)
        np.testing.assert_array_equal(p.flat(), q.flat())

    def test_separable_exp_loss(self):
        data = gen_synthetic(10, 10, 1, seed=0)
        p = init_params(Architecture("mcf", 8), 10, 10, "fixed", 0.1, seed=0)
        _, tr = sgd_train(p, data, lr=0.1, epochs=3000, loss="exp", seed=0, record_every=100)
        loss = np.array(tr.loss)
        assert loss[-1] < 1e-2
        assert np.all(np.diff(loss[1:]) <= 0)
        assert tr.l2_norm[-1] > 2 * tr.l2_norm[0]

    def test_bitwise_repeatable(self):
        data = gen_synthetic(6, 6, 2, seed=1)
        p = init_params(ARCHS[3], 6, 6, "fixed", 0.1, seed=0)
        _, a = sgd_train(p, data, lr=0.05, epochs=20, seed=3)
        _, b = sgd_train(p, data, lr=0.05, epochs=20, seed=3)
        assert a.loss == b.loss and a.l2_norm == b.l2_norm

    @pytest.mark.parametrize("arch", ARCHS, ids=lambda a: f"{a.kind}{a.hidden}")
    def test_compiled_epoch_matches_generic(self, arch):
        """One compiled SGD epoch equals sequential single-sample gradient steps."""
        data = gen_synthetic(3, 4, 2, seed=0)
        p = init_params(arch, 3, 4, "fixed", 0.3, seed=1)
        order = np.random.default_rng(0).permutation(len(data))
        fast = p.copy()
        sgd_epoch(fast, data.users, data.items, data.labels, order, 0.05, "log")
        slow = p.copy()
        for n in order:
            _, g = loss_and_grad(slow, data.users[n : n + 1], data.items[n : n + 1], data.labels[n : n + 1], "log")
            slow = slow.from_flat(slow.flat() - 0.05 * g.flat())
        np.testing.assert_allclose(fast.flat(), slow.flat(), rtol=1e-10, atol=1e-12)

    def test_trace_epochs_increase(self):
        tr = TrainTrace()
        tr.append(0, 1, 1, 1, 0, 0)
        with pytest.raises(ValueError):
            tr.append(0, 1, 1, 1, 0, 0)


class TestMargins:
    def test_rank_one_unit(self):
        zu = np.zeros((2, 2))
        zi = np.zeros((2, 2))
        zu[0, 0] = zi[0, 0] = 1.0
        p = ModelParams(Architecture("mcf", 2), zu, zi)
        assert normalized_margins(p, [0], [0], [1])[0] == pytest.approx(1.0)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.01, 100.0), st.integers(0, 1000))
    def test_scale_invariance(self, c, seed):
        p = init_params(Architecture("mcf", 3), 4, 5, seed=seed)
        q = ModelParams(p.arch, c * p.user_emb, p.item_emb)
        u, i, y = [0, 1, 3], [4, 2, 0], [1, -1, 1]
        np.testing.assert_allclose(normalized_margins(q, u, i, y), normalized_margins(p, u, i, y), rtol=1e-9)

    def test_nuclear_norm_vs_independent_svd(self):
        p = init_params(Architecture("mcf", 5), 5, 5, seed=11)
        W = p.user_emb @ p.item_emb.T
        s = np.linalg.svd(W, compute_uv=False)
        assert nuclear_norm(W) == pytest.approx(s.sum(), rel=1e-12)

    def test_zero_normalizer(self):
        p = ModelParams(Architecture("mcf", 2), np.zeros((2, 2)), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            normalized_margins(p, [0], [0], [1])

    def test_smoothed_margin_constant_margins(self):
        # z_u = z_i = (1, 0) for every row: every margin is 1
        zu = np.tile([1.0, 0.0], (3, 1))
        p = ModelParams(Architecture("mcf", 2), zu, zu.copy())
        u, i = np.array([0, 1, 2]), np.array([1, 2, 0])
        expected = (1.0 - np.log(3)) / p.norm() ** 2
        assert smoothed_margin(p, u, i, np.ones(3)) == pytest.approx(expected, rel=1e-12)

    def test_smoothed_margin_doubling(self):
        p = init_params(Architecture("mcf", 3), 3, 3, seed=0)
        u, i, y = np.array([0, 1, 2]), np.array([0, 1, 2]), np.array([1, 1, -1])
        m = y * forward(p, u, i)
        q = p.scaled(2.0)
        expected = -np.log(np.sum(np.exp(-4 * m))) / (4 * p.norm() ** 2)
        assert smoothed_margin(q, u, i, y) == pytest.approx(expected, rel=1e-10)

    def test_smoothed_margin_no_overflow(self):
        p = init_params(Architecture("mcf", 3), 3, 3, seed=0).scaled(1e3)
        assert np.isfinite(smoothed_margin(p, [0, 1], [0, 1], [1, -1]))

    def test_positive_after_separation(self):
        data = gen_synthetic(5, 5, 1, seed=0)
        p = init_params(Architecture("mcf", 8), 5, 5, "fixed", 0.1, seed=0)
        q, tr = sgd_train(p, data, lr=0.1, epochs=500, loss="exp")
        assert tr.loss[-1] < 1.0 / len(data)
        assert smoothed_margin(q, data.users, data.items, data.labels) > 0
