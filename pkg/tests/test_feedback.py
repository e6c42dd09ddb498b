import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import numeric_grad, rel_error
from idcf.confounder import UserConfounders
from idcf.data import Dataset, load_checkpoint, save_checkpoint
from idcf.errors import ColdStartError, DataError, DimensionError
from idcf.feedback import (
    BaselineModel,
    FeedbackConfig,
    FeedbackModel,
    predict,
    rank_items,
    score_train,
    train_feedback,
    training_loss,
)
from idcf.numerics import RngStream, sigmoid
from idcf.synthgen import SynthConfig, generate


def zero_model(cls_args, cls=FeedbackModel):
    m = cls(*cls_args)
    for arr in m.arrays():
        arr[...] = 0.0
    return m


@pytest.fixture(scope="module")
def bundle50():
    return generate(SynthConfig(num_users=50, num_items=30, alpha=0.4, seed=21))


@pytest.fixture(scope="module")
def data50(bundle50):
    return Dataset.from_bundle(bundle50)


@pytest.fixture
def random_model():
    rng = np.random.default_rng(0)
    m = FeedbackModel(7, 9, latent_dim=2, embed_dim=3, rng=RngStream(1))
    for arr in m.arrays():
        arr[...] = rng.normal(size=arr.shape)
    return m


class TestScore:
    def test_zero_model(self):
        m = zero_model((4, 5, 2, 3))
        assert score_train(m, 1, 2, [0.3, -0.7]) == 0.0
        assert predict(m, UserConfounders(np.ones((4, 2)), np.ones((4, 2))), [0, 3], [1, 4]).tolist() == [0.5, 0.5]

    def test_reevaluation(self, random_model):
        m = random_model
        rng = np.random.default_rng(3)
        for _ in range(20):
            u, i = int(rng.integers(7)), int(rng.integers(9))
            z = rng.normal(size=2)
            ref = sum(m.user_emb[u, k] * m.item_emb[i, k] for k in range(3))
            ref += m.user_bias[u] + m.item_bias[i] + z[0] * m.conf_emb[i, 0] + z[1] * m.conf_emb[i, 1]
            assert abs(score_train(m, u, i, z) - ref) < 1e-12

    def test_additivity(self, random_model):
        z = np.array([0.4, -1.3])
        diff = score_train(random_model, 2, 5, z) - score_train(random_model, 2, 5, np.zeros(2))
        assert diff == pytest.approx(z @ random_model.conf_emb[5], abs=1e-14)

    def test_zero_loading_is_mf(self, random_model):
        m = random_model
        m.conf_emb[:] = 0.0
        mf = BaselineModel(7, 9, 3)
        for name in ("user_emb", "item_emb", "user_bias", "item_bias"):
            getattr(mf, name)[...] = getattr(m, name)
        uc = UserConfounders(np.random.default_rng(0).normal(size=(7, 2)), np.full((7, 2), 0.1))
        users, items = np.repeat(np.arange(7), 9), np.tile(np.arange(9), 7)
        np.testing.assert_array_equal(predict(m, uc, users, items), predict(mf, None, users, items))
        for u in range(7):
            assert rank_items(m, uc, u, range(9)) == rank_items(mf, None, u, range(9))

    def test_cold_start(self, random_model):
        uc = UserConfounders(np.zeros((7, 2)), np.ones((7, 2)))
        with pytest.raises(ColdStartError):
            predict(random_model, uc, [7], [0])
        with pytest.raises(ColdStartError):
            predict(random_model, uc, [0], [9])
        with pytest.raises(ColdStartError):
            BaselineModel(3, 3).score([0], [-1])

    def test_wrong_latent_dim(self, random_model):
        with pytest.raises(DimensionError):
            random_model.score([0], [0], np.zeros((1, 3)))

    def test_needs_confounders(self, random_model):
        with pytest.raises(DataError):
            predict(random_model, None, [0], [0])

    def test_predict_strictly_inside(self, random_model):
        random_model.user_bias[:] = 30.0
        uc = UserConfounders(np.zeros((7, 2)), np.ones((7, 2)))
        p = predict(random_model, uc, np.arange(7), np.zeros(7, dtype=int))
        assert np.all((p > 0) & (p <= 1))


class TestGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_feedback_model(self, seed):
        rng = np.random.default_rng(seed)
        m = FeedbackModel(5, 6, latent_dim=2, embed_dim=3, rng=RngStream(seed))
        for arr in m.arrays():
            arr[...] = rng.normal(scale=0.5, size=arr.shape)
        users, items = rng.integers(0, 5, 12), rng.integers(0, 6, 12)
        y = rng.integers(0, 2, 12).astype(float)
        z = rng.normal(size=(12, 2))
        _, grads = m.loss_and_grads(users, items, y, z)
        for arr, g in zip(m.arrays(), grads):
            assert rel_error(g, numeric_grad(lambda: m.loss_and_grads(users, items, y, z)[0], arr)) < 1e-6

    @pytest.mark.parametrize("with_features", [False, True])
    def test_baselines(self, with_features):
        rng = np.random.default_rng(4)
        feats = rng.normal(size=(5, 3)) if with_features else None
        m = BaselineModel(5, 6, 3, feats, RngStream(2))
        users, items = rng.integers(0, 5, 12), rng.integers(0, 6, 12)
        y = rng.integers(0, 2, 12).astype(float)
        _, grads = m.loss_and_grads(users, items, y)
        assert len(grads) == (5 if with_features else 4)
        for arr, g in zip(m.trainable(), grads):
            assert rel_error(g, numeric_grad(lambda: m.loss_and_grads(users, items, y)[0], arr)) < 1e-6


class TestRanking:
    def test_single_candidate(self, random_model):
        uc = UserConfounders(np.zeros((7, 2)), np.ones((7, 2)))
        assert rank_items(random_model, uc, 0, [4]) == [4]

    def test_ties_to_lower_id(self):
        m = zero_model((2, 6, 2, 3))
        uc = UserConfounders(np.zeros((2, 2)), np.ones((2, 2)))
        assert rank_items(m, uc, 1, [5, 2, 4, 0]) == [0, 2, 4, 5]
        m.item_bias[4] = 1.0
        assert rank_items(m, uc, 1, [5, 2, 4, 0]) == [4, 0, 2, 5]

    def test_empty_candidates(self, random_model):
        with pytest.raises(DataError):
            rank_items(random_model, None, 0, [])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(-3, 3), min_size=1, max_size=12), st.sampled_from(["exp", "cube", "affine"]))
    def test_monotone_transform_invariance(self, raw, transform):
        # ranking depends on the order of the scores only
        n = len(raw)
        m = BaselineModel(1, n, 1)
        for arr in m.arrays():
            arr[...] = 0.0
        m.item_bias[:] = raw
        f = {"exp": np.exp, "cube": lambda x: x**3, "affine": lambda x: 2.5 * x - 1}[transform]
        m2 = BaselineModel(1, n, 1)
        for arr in m2.arrays():
            arr[...] = 0.0
        m2.item_bias[:] = f(np.array(raw, dtype=float))
        assert rank_items(m, None, 0, range(n)) == rank_items(m2, None, 0, range(n))

    def test_mean_plugin_agrees_with_monte_carlo(self):
        rng = np.random.default_rng(8)
        m = FeedbackModel(1, 50, latent_dim=2, embed_dim=4, rng=RngStream(3))
        for arr in m.arrays():
            arr[...] = rng.normal(scale=0.3, size=arr.shape)
        # spread the item biases so adjacent scores differ by more than the MC noise
        m.item_bias[:] = rng.permutation(np.linspace(-3, 3, 50))
        uc = UserConfounders(rng.normal(size=(1, 2)), np.full((1, 2), 0.01))
        plug = rank_items(m, uc, 0, range(50))
        mc = rank_items(m, uc, 0, range(50), mc_samples=10_000, rng=RngStream(5))
        assert plug == mc


class TestTraining:
    def test_loss_decreases(self, data50):
        uc = UserConfounders(np.random.default_rng(0).normal(size=(50, 2)), np.full((50, 2), 0.05))
        m = FeedbackModel(50, 30, 2, 8, RngStream(0))
        cfg = FeedbackConfig(epochs=10, patience=0, lr=1e-2, batch_size=64)
        _, log = train_feedback(m, uc, data50, cfg, RngStream(0))
        assert log.loss[-1] < log.loss[0]
        assert all(b <= a + 1e-12 for a, b in zip(log.loss, log.loss[1:]))

    def test_deterministic(self, data50, tmp_path):
        uc = UserConfounders(np.zeros((50, 2)), np.full((50, 2), 0.5))
        cfg = FeedbackConfig(epochs=5, patience=0)
        for k in range(2):
            m, _ = train_feedback(FeedbackModel(50, 30, 2, 4, RngStream(2)), uc, data50, cfg, RngStream(2))
            save_checkpoint(m, tmp_path / f"{k}.ckpt")
        assert (tmp_path / "0.ckpt").read_bytes() == (tmp_path / "1.ckpt").read_bytes()
        back = load_checkpoint(tmp_path / "0.ckpt")
        np.testing.assert_array_equal(back.conf_emb, m.conf_emb)

    def test_frozen_posterior_matches_mf(self, data50):
        # z ~ N(0, 1e-10 I) leaves the loading idle, so the model behaves like MF
        uc = UserConfounders(np.zeros((50, 2)), np.full((50, 2), 1e-10))
        cfg = FeedbackConfig(epochs=150, patience=0, lr=5e-3)
        fb, _ = train_feedback(FeedbackModel(50, 30, 2, 8, RngStream(6)), uc, data50, cfg, RngStream(6))
        mf, _ = train_feedback(BaselineModel(50, 30, 8, None, RngStream(6)), None, data50, cfg, RngStream(6))
        l_fb = training_loss(fb, uc, data50)
        l_mf = training_loss(mf, None, data50)
        assert abs(l_fb - l_mf) <= 0.02 * l_mf

    def test_missing_confounders(self, data50):
        with pytest.raises(DataError):
            train_feedback(FeedbackModel(50, 30, 2), None, data50, FeedbackConfig(epochs=1), RngStream(0))

    def test_mf_wf_uses_features(self, data50):
        m = BaselineModel(50, 30, 4, data50.proxy_matrix(), RngStream(0))
        m, _ = train_feedback(m, None, data50, FeedbackConfig(epochs=3, patience=0), RngStream(0))
        assert m.kind == "mf-wf" and np.abs(m.feat_proj).sum() > 0
        np.testing.assert_array_equal(m.user_feat, data50.proxy_matrix())

    def test_sigmoid_link(self, random_model):
        uc = UserConfounders(np.ones((7, 2)), np.full((7, 2), 0.2))
        s = random_model.score([3], [4], uc.mean[[3]])
        np.testing.assert_allclose(predict(random_model, uc, [3], [4]), sigmoid(s))
