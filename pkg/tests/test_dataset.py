import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfml.dataset import (
    DataFormatError,
    InteractionSet,
    RatingTable,
    encode_pair,
    gen_synthetic,
    load_ratings,
    sample_negatives,
    split_leave_last,
    split_transductive,
    subsample_popular,
    synthetic_ratings,
    to_implicit,
    write_ratings,
)


def _table(ratings, users=None, items=None, stamps=None):
    n = len(ratings)
    users = np.zeros(n, dtype=np.int64) if users is None else np.asarray(users)
    items = np.arange(n) if items is None else np.asarray(items)
    stamps = np.arange(n) if stamps is None else np.asarray(stamps)
    return RatingTable(users, items, np.asarray(ratings, float), stamps, int(users.max()) + 1, int(items.max()) + 1)


class TestLoadRatings:
    def test_two_rows_remap(self, tmp_path):
        p = tmp_path / "u.data"
        p.write_text("1 5 4 100\n2 5 3 200\n")
        t = load_ratings(p)
        assert (t.num_users, t.num_items, len(t)) == (2, 1, 2)
        assert t.items.tolist() == [0, 0]
        assert t.user_labels.tolist() == [1, 2]

    def test_tabs_accepted(self, tmp_path):
        p = tmp_path / "u.data"
        p.write_text("7\t3\t5\t1\n")
        assert len(load_ratings(p)) == 1

    def test_empty_file(self, tmp_path):
        p = tmp_path / "u.data"
        p.write_text("")
        with pytest.raises(DataFormatError, match="no rows"):
            load_ratings(p)

    def test_malformed_row_reports_line(self, tmp_path):
        p = tmp_path / "u.data"
        p.write_text("1 2 3 4\n1 2 x\n")
        with pytest.raises(DataFormatError, match="line 2"):
            load_ratings(p)

    def test_duplicate_pair(self, tmp_path):
        p = tmp_path / "u.data"
        p.write_text("1 2 3 4\n1 2 5 6\n")
        with pytest.raises(DataFormatError, match="duplicate"):
            load_ratings(p)

    def test_round_trip(self, tmp_path):
        t = synthetic_ratings(20, 30, seed=3)
        p = tmp_path / "u.data"
        write_ratings(t, p)
        back = load_ratings(p)
        assert len(back) == len(t)
        np.testing.assert_array_equal(back.ratings, t.ratings)
        np.testing.assert_array_equal(back.timestamps, t.timestamps)


class TestToImplicit:
    def test_threshold_four(self):
        assert len(to_implicit(_table([4, 5, 2]), 4)) == 2

    def test_threshold_above_scale(self):
        assert len(to_implicit(_table([4, 5, 2]), 6)) == 0

    def test_matches_raw_scan(self, tmp_path):
        t = synthetic_ratings(50, 80, seed=1)
        p = tmp_path / "u.data"
        write_ratings(t, p)
        count = sum(1 for line in p.read_text().splitlines() if float(line.split()[2]) >= 4)
        assert len(to_implicit(load_ratings(p), 4)) == count


class TestSampleNegatives:
    def test_user_with_every_item_positive(self):
        data = InteractionSet(1, 3, [0, 0, 0], [0, 1, 2], [1, 1, 1])
        assert len(sample_negatives(data, 4, seed=0)) == 3

    def test_zero_per_positive(self):
        data = InteractionSet(2, 5, [0, 1], [1, 2], [1, 1])
        out = sample_negatives(data, 0)
        assert out.pairs() == data.pairs()

    def test_one_positive_ten_unobserved(self):
        data = InteractionSet(1, 11, [0], [5], [1])
        a = sample_negatives(data, 4, seed=7)
        b = sample_negatives(data, 4, seed=7)
        neg = a.items[a.labels < 0]
        assert len(neg) == 4 and len(set(neg.tolist())) == 4
        assert 5 not in neg
        np.testing.assert_array_equal(a.items, b.items)

    def test_short_complement_allowed(self):
        data = InteractionSet(1, 3, [0], [0], [1])
        out = sample_negatives(data, 10, seed=0)
        assert (out.labels < 0).sum() == 2


class TestSplitTransductive:
    def test_sizes(self):
        data = gen_synthetic(10, 10, 1, seed=0)
        plan = split_transductive(data, 0.25, seed=0)
        assert (plan.n_train, plan.n_test) == (80, 20)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 60), st.floats(0.05, 0.95))
    def test_partition(self, seed, n, beta):
        data = InteractionSet(1, n, np.zeros(n, int), np.arange(n), np.ones(n, int))
        plan = split_transductive(data, beta, seed=seed)
        both = np.concatenate([plan.train, plan.test])
        assert sorted(both.tolist()) == list(range(n))

    def test_deterministic(self):
        data = gen_synthetic(6, 7, 2, seed=0)
        a = split_transductive(data, 0.3, seed=5)
        b = split_transductive(data, 0.3, seed=5)
        np.testing.assert_array_equal(a.train, b.train)

    def test_too_small(self):
        with pytest.raises(ValueError):
            split_transductive(InteractionSet(1, 1, [0], [0], [1]), 0.25)


class TestSplitLeaveLast:
    def test_three_positives(self):
        data = InteractionSet(1, 3, [0, 0, 0], [0, 1, 2], [1, 1, 1], timestamps=np.array([20, 10, 30]))
        plan = split_leave_last(data)
        assert data.items[plan.test].tolist() == [2]
        assert data.items[plan.validation].tolist() == [0]
        assert data.items[plan.train].tolist() == [1]

    def test_two_positives_excluded(self, caplog):
        data = InteractionSet(1, 2, [0, 0], [0, 1], [1, 1], timestamps=np.array([1, 2]))
        plan = split_leave_last(data)
        assert plan.excluded_users == (0,)
        assert plan.n_test == 0
        assert "excluded" in caplog.text

    def test_one_test_item_per_eligible_user(self):
        data = to_implicit(synthetic_ratings(60, 90, seed=2))
        plan = split_leave_last(data)
        tu = data.users[plan.test]
        assert len(set(tu.tolist())) == len(tu)
        for k in plan.test:
            u = data.users[k]
            mine = (data.users == u) & (data.labels > 0)
            assert data.timestamps[k] == data.timestamps[mine].max()


class TestGenSynthetic:
    def test_rank_one_sign_pattern(self):
        Y = gen_synthetic(8, 9, 1, seed=4).label_matrix()
        # a rank-1 sign pattern is an outer product of sign vectors
        np.testing.assert_array_equal(Y, np.outer(Y[:, 0], Y[0, :]) * Y[0, 0])

    def test_deterministic(self):
        a = gen_synthetic(5, 5, 2, seed=9)
        b = gen_synthetic(5, 5, 2, seed=9)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_bad_rank(self):
        with pytest.raises(ValueError):
            gen_synthetic(3, 3, 4)


class TestInteractionSetIO:
    def test_text_round_trip(self, tmp_path):
        data = gen_synthetic(4, 6, 2, seed=0)
        p = tmp_path / "set.tsv"
        data.to_text(p)
        back = InteractionSet.from_text(p)
        assert back.pairs() == data.pairs()
        np.testing.assert_array_equal(back.labels, data.labels)

    def test_json_round_trip(self):
        data = gen_synthetic(3, 3, 1, seed=0)
        back = InteractionSet.from_json(data.to_json())
        np.testing.assert_array_equal(back.label_matrix(), data.label_matrix())

    def test_bad_label(self):
        with pytest.raises(ValueError):
            InteractionSet(1, 1, [0], [0], [0])


def test_subsample_keeps_shape():
    t = synthetic_ratings(80, 120, seed=0)
    s = subsample_popular(t, 30, 40, seed=1)
    assert (s.num_users, s.num_items) == (30, 40)
    assert s.users.max() < 30 and s.items.max() < 40


def test_encode_pair_add_selects_sum():
    rng = np.random.default_rng(0)
    ZU, ZI = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
    x = encode_pair(1, 2, 3, 5, "add").combined
    np.testing.assert_allclose(np.vstack([ZU, ZI]).T @ x, ZU[1] + ZI[2])
