import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idcf.data import Dataset, InteractionLog
from idcf.errors import DataError, DomainError
from idcf.evaluation import evaluate_model, mcc, ndcg_at_k, recall_at_k, summarize_runs, welch_t_test
from idcf.synthgen import SynthConfig, generate


def brute_ndcg(ranked, positives, k):
    gains = [1.0 if item in positives else 0.0 for item in ranked[:k]]
    dcg = 0.0
    for p, g in enumerate(gains, start=1):
        dcg += g / math.log2(p + 1)
    ideal = sorted([1.0] * len(positives) + [0.0] * len(ranked), reverse=True)[:k]
    idcg = sum(g / math.log2(p + 1) for p, g in enumerate(ideal, start=1))
    return dcg / idcg


class TableModel:
    """Scores looked up from a dense user x item table."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)

    def score(self, users, items):
        return self.table[users, items]


@pytest.fixture(scope="module")
def dataset():
    return Dataset.from_bundle(generate(SynthConfig(num_users=60, num_items=40, seed=13)))


@pytest.fixture(scope="module")
def truth_ratings():
    return generate(SynthConfig(num_users=60, num_items=40, seed=13)).truth.ratings


class TestRankingMetrics:
    def test_perfect(self):
        assert ndcg_at_k([3, 1, 2, 0], {1, 3, 0}, 2) == 1.0
        assert recall_at_k([3, 1, 2, 0], {1, 3}, 2) == 1.0

    def test_single_positive_second(self):
        assert ndcg_at_k([7, 4, 1, 2, 9], {4}, 5) == pytest.approx(0.63093, abs=5e-6)
        assert ndcg_at_k([7, 4, 1, 2, 9], {4}, 5) == pytest.approx(1 / math.log2(3), abs=1e-15)

    def test_recall_half(self):
        assert recall_at_k([0, 1, 2, 3, 4, 5, 6, 7], {1, 3, 6, 7}, 5) == 0.5

    def test_no_positives(self):
        assert ndcg_at_k([1, 2], set(), 5) == 0.0
        assert recall_at_k([1, 2], set(), 5) == 0.0

    def test_duplicates_rejected(self):
        with pytest.raises(DataError):
            ndcg_at_k([1, 2, 1], {1}, 2)
        with pytest.raises(DataError):
            recall_at_k([1, 1], {1}, 2)

    def test_k_must_be_positive(self):
        with pytest.raises(DomainError):
            ndcg_at_k([1], {1}, 0)

    def test_against_brute_force(self, np_rng):
        for _ in range(300):
            n = int(np_rng.integers(1, 20))
            ranked = np_rng.permutation(n).tolist()
            positives = set(np_rng.choice(n, int(np_rng.integers(1, n + 1)), replace=False).tolist())
            k = int(np_rng.integers(1, 25))
            assert abs(ndcg_at_k(ranked, positives, k) - brute_ndcg(ranked, positives, k)) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.permutations(list(range(10))), st.sets(st.integers(0, 9), min_size=1), st.integers(1, 10), st.integers(0, 8))
    def test_swap_negative_up_never_helps(self, ranked, positives, k, p):
        # move a negative one place up past a positive
        if ranked[p] in positives and ranked[p + 1] not in positives:
            swapped = ranked[:p] + [ranked[p + 1], ranked[p]] + ranked[p + 2 :]
            assert ndcg_at_k(swapped, positives, k) <= ndcg_at_k(ranked, positives, k) + 1e-15
        for metric in (ndcg_at_k, recall_at_k):
            assert 0.0 <= metric(ranked, positives, k) <= 1.0


class TestMcc:
    def test_identity(self, np_rng):
        z = np_rng.normal(size=(300, 2))
        assert mcc(z, z).mcc == pytest.approx(1.0, abs=1e-12)

    def test_permutation_sign_affine(self, np_rng):
        z = np_rng.normal(size=(300, 3))
        learned = np.stack([-z[:, 2], 3.0 * z[:, 0] + 1.0, -0.5 * z[:, 1] - 4.0], axis=1)
        rep = mcc(learned, z)
        assert rep.mcc == pytest.approx(1.0, abs=1e-12)
        assert rep.permutation == (1, 2, 0)
        assert rep.signs == (1, -1, -1)

    def test_invariance_exact(self, np_rng):
        z = np_rng.normal(size=(200, 2))
        x = z + np_rng.normal(scale=0.8, size=z.shape)
        base = mcc(x, z).mcc
        assert mcc(x[:, ::-1], z).mcc == pytest.approx(base, abs=1e-12)
        assert mcc(x * np.array([-2.0, 0.3]) + 5.0, z).mcc == pytest.approx(base, abs=1e-12)

    def test_independent_latents(self):
        rng = np.random.default_rng(99)
        assert mcc(rng.normal(size=(2000, 2)), rng.normal(size=(2000, 2))).mcc < 0.1

    def test_zero_variance(self, np_rng):
        z = np_rng.normal(size=(50, 2))
        x = z.copy()
        x[:, 1] = 3.0
        with pytest.raises(DomainError):
            mcc(x, z)

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            mcc(np.zeros((5, 2)), np.zeros((5, 3)))

    def test_hungarian_path(self, np_rng):
        z = np_rng.normal(size=(100, 8))
        perm = np_rng.permutation(8)
        rep = mcc(z[:, perm], z)
        assert rep.mcc == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_array_equal(perm[list(rep.permutation)], np.arange(8))


class TestWelch:
    def test_identical(self):
        assert welch_t_test([0.3, 0.5, 0.4], [0.3, 0.5, 0.4]) == 1.0

    def test_jitter(self):
        assert welch_t_test([0.0, 0.0, 1e-9], [1.0, 1.0, 1.0 + 1e-9]) < 1e-6

    def test_degenerate(self):
        assert welch_t_test([1.0, 1.0], [1.0, 1.0]) == 1.0
        assert welch_t_test([1.0, 1.0], [2.0, 2.0]) == 0.0

    def test_needs_two_values(self):
        with pytest.raises(DomainError):
            welch_t_test([1.0], [1.0, 2.0])

    def test_worked_example(self):
        # by hand: means 20.8200, 22.9867; variances 7.8674, 3.8127 (n = 15 each)
        # se^2 = 0.77867, t = -2.45536, dof = 24.9885, two-sided p = 0.021378
        a = [27.5, 21.0, 19.0, 23.6, 17.0, 17.9, 16.9, 20.1, 21.9, 22.6, 23.1, 19.6, 19.0, 21.7, 21.4]
        b = [27.1, 22.0, 20.8, 23.4, 23.4, 23.5, 25.8, 22.0, 24.8, 20.2, 21.9, 22.1, 22.9, 20.5, 24.4]
        assert welch_t_test(a, b) == pytest.approx(0.021378, abs=5e-7)
        assert welch_t_test(b, a) == welch_t_test(a, b)


class TestEvaluateModel:
    def test_oracle(self, dataset, truth_ratings):
        rep = evaluate_model(TableModel(truth_ratings), None, dataset, ks=(5,))
        np.testing.assert_array_equal(rep.ndcg[5], 1.0)
        # recall is 1 whenever the positives fit in the top 5
        users, _, ratings = dataset.split("test")
        npos = np.bincount(users[ratings >= 4], minlength=dataset.num_users)[rep.users]
        np.testing.assert_array_equal(rep.recall[5], np.minimum(5, npos) / npos)

    def test_anti_oracle(self, dataset, truth_ratings):
        rep = evaluate_model(TableModel(-truth_ratings), None, dataset, ks=(3, 5))
        users, items, ratings = dataset.split("test")
        expected = []
        for u in np.unique(users):
            it, r = items[users == u], ratings[users == u]
            pos = set(it[r >= 4].tolist())
            if not pos:
                continue
            ranked = sorted(it.tolist(), key=lambda i: (truth_ratings[u, i], i))
            expected.append(brute_ndcg(ranked, pos, 5))
        np.testing.assert_allclose(rep.ndcg[5], expected, atol=1e-12)
        assert rep.mean("ndcg", 5) < evaluate_model(TableModel(truth_ratings), None, dataset).mean("ndcg", 5)

    def test_users_without_positives_excluded(self, dataset, truth_ratings):
        rep = evaluate_model(TableModel(truth_ratings), None, dataset)
        users, _, ratings = dataset.split("test")
        assert set(rep.users.tolist()) == set(users[ratings >= 4].tolist())
        assert np.all(np.diff(rep.users) > 0)

    def test_thread_invariance(self, dataset, np_rng):
        model = TableModel(np_rng.normal(size=(60, 40)))
        one = evaluate_model(model, None, dataset, ks=(1, 5, 10), threads=1)
        four = evaluate_model(model, None, dataset, ks=(1, 5, 10), threads=4)
        for k in (1, 5, 10):
            np.testing.assert_array_equal(one.ndcg[k], four.ndcg[k])
            np.testing.assert_array_equal(one.recall[k], four.recall[k])

    def test_empty_split(self, dataset):
        log = dataset.log
        keep = log.splits != 2
        empty = Dataset(
            InteractionLog(log.users[keep], log.items[keep], log.ratings[keep], log.splits[keep], log.user_map, log.item_map),
            dataset.proxy,
        )
        with pytest.raises(DataError):
            evaluate_model(TableModel(np.zeros((60, 40))), None, empty)

    def test_summarize_runs(self, dataset, np_rng):
        reps = [evaluate_model(TableModel(np_rng.normal(size=(60, 40))), None, dataset) for _ in range(3)]
        means = [r.mean("ndcg", 5) for r in reps]
        mean, sd = summarize_runs(reps)[("ndcg", 5)]
        assert mean == pytest.approx(np.mean(means)) and sd == pytest.approx(np.std(means, ddof=1))
