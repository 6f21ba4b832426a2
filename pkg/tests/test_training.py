import numpy as np
import pytest

from partbilinear.core import FeatureMap, ImageSample
from partbilinear.errors import (
    ConfigurationError,
    DegenerateEmbeddingError,
    DimensionError,
    MalformedBatchError,
    NumericFailureError,
)
from partbilinear.training import (
    PARAM_NAMES,
    LinearHeads,
    OptimizerConfig,
    TrainConfig,
    TripletBatch,
    TripletLossConfig,
    apply_heads,
    batch_loss,
    embed_arrays,
    enumerate_triplets,
    learning_rate,
    sgd_step,
    train,
    triplet_count,
    triplet_loss,
)

from gradcheck import max_relative_error, numeric_gradients, small_problem


def identity_heads(r_a, r_p, nonneg=False):
    return LinearHeads(np.eye(r_a), np.zeros(r_a), np.eye(r_p), np.zeros(r_p), nonneg)


class TestApplyHeads:
    def test_identity(self, rng):
        s = ImageSample("x", 0, 0, FeatureMap(rng.normal(size=(2, 3, 4))), FeatureMap(rng.normal(size=(2, 3, 2))))
        A, P = apply_heads(s, identity_heads(4, 2))
        np.testing.assert_array_equal(A.data, s.appearance_map.data)
        np.testing.assert_array_equal(P.data, s.part_map.data)

    def test_clamp_negative_parts(self, rng):
        s = ImageSample("x", 0, 0, FeatureMap(rng.normal(size=(2, 2, 3))), FeatureMap(-np.abs(rng.normal(size=(2, 2, 2))) - 0.1))
        _, P = apply_heads(s, identity_heads(3, 2, nonneg=True))
        np.testing.assert_array_equal(P.data, 0.0)

    def test_matmul_oracle(self, rng):
        s = ImageSample("x", 0, 0, FeatureMap(rng.normal(size=(3, 2, 5))), FeatureMap(rng.normal(size=(3, 2, 4))))
        heads = LinearHeads(rng.normal(size=(3, 5)), rng.normal(size=3), rng.normal(size=(2, 4)), rng.normal(size=2))
        A, P = apply_heads(s, heads)
        for y in range(3):
            for x in range(2):
                np.testing.assert_allclose(A.data[y, x], heads.W_a @ s.appearance_map.data[y, x] + heads.b_a, rtol=1e-12)
                np.testing.assert_allclose(P.data[y, x], heads.W_p @ s.part_map.data[y, x] + heads.b_p, rtol=1e-12)

    def test_dimension_mismatch(self, rng):
        s = ImageSample("x", 0, 0, FeatureMap(rng.normal(size=(2, 2, 3))), FeatureMap(rng.normal(size=(2, 2, 2))))
        with pytest.raises(DimensionError):
            apply_heads(s, identity_heads(4, 2))


class TestTripletLoss:
    @pytest.mark.parametrize("sp,sn,expected", [(0.9, 0.5, 0.0), (0.5, 0.5, 0.2), (0.1, 0.6, 0.7)])
    def test_values(self, sp, sn, expected):
        assert triplet_loss(sp, sn, TripletLossConfig(0.2)) == pytest.approx(expected, abs=1e-15)

    def test_default_margin(self):
        assert TripletLossConfig().margin == 0.2

    def test_negative_margin_rejected(self):
        with pytest.raises(ConfigurationError):
            TripletLossConfig(-0.1)


class TestEnumerate:
    def _batch(self, sizes, rng=None):
        ids = np.repeat(np.arange(len(sizes)), sizes)
        B = len(ids)
        return TripletBatch(np.zeros((B, 1, 1)), np.zeros((B, 1, 1)), ids)

    def test_paper_batch(self):
        count, _ = enumerate_triplets(self._batch([10] * 18))
        assert count == 275_400
        assert abs(count - 3e5) / 3e5 < 0.1

    def test_two_by_two(self):
        count, it = enumerate_triplets(self._batch([2, 2]))
        triples = list(it)
        assert count == len(triples) == 8

    def test_closed_form_and_brute_force(self, rng):
        sizes = rng.integers(2, 6, size=5)
        batch = self._batch(sizes)
        count, it = enumerate_triplets(batch)
        triples = list(it)
        ids = batch.identities
        brute = [(q, p, n) for q in range(len(ids)) for p in range(len(ids)) for n in range(len(ids))
                 if q != p and ids[q] == ids[p] and ids[n] != ids[q]]
        assert count == triplet_count(sizes) == len(brute)
        assert sorted(triples) == sorted(brute)
        B = sizes.sum()
        assert count == sum(g * (g - 1) * (B - g) for g in sizes)

    def test_malformed(self):
        with pytest.raises(MalformedBatchError):
            self._batch([3])
        with pytest.raises(MalformedBatchError):
            self._batch([3, 1])


class TestBatchLoss:
    def test_identical_embeddings_give_margin(self, rng):
        raw = np.tile(rng.normal(size=(1, 4, 3)), (6, 1, 1))
        batch = TripletBatch(raw, np.abs(raw), [0, 0, 1, 1, 2, 2])
        heads = LinearHeads.xavier(3, 3, 3, 2, rng)
        for mode in ("exact", "gap", "concat"):
            loss, _ = batch_loss(batch, heads, mode, TripletLossConfig(0.2))
            assert loss == pytest.approx(0.2, abs=1e-12)

    def test_satisfied_margin_zero_loss_and_grad(self):
        # two identities whose appearance points along orthogonal axes
        RA = np.zeros((4, 1, 2))
        RA[:2, 0, 0] = 1.0
        RA[2:, 0, 1] = 1.0
        RP = np.ones((4, 1, 1))
        batch = TripletBatch(RA, RP, [0, 0, 1, 1])
        loss, grads = batch_loss(batch, identity_heads(2, 1), "exact", TripletLossConfig(0.2))
        assert loss == 0.0
        for g in grads.values():
            assert np.all(g == 0)

    def test_degenerate_names_sample(self, rng):
        RA = rng.normal(size=(4, 2, 2))
        RP = np.ones((4, 2, 1))
        RP[2] = 0.0
        batch = TripletBatch(RA, RP, [0, 0, 1, 1], ("a", "b", "c", "d"))
        with pytest.raises(DegenerateEmbeddingError) as exc:
            batch_loss(batch, identity_heads(2, 1), "exact")
        assert exc.value.sample_id == "c"

    @pytest.mark.parametrize("mode", ["exact", "sketched", "gap", "concat"])
    @pytest.mark.parametrize("nonneg", [False, True])
    def test_finite_differences(self, mode, nonneg):
        batch, heads, sketch = small_problem(1, nonneg, mode)
        cfg = TripletLossConfig(0.5)
        _, analytic = batch_loss(batch, heads, mode, cfg, sketch)
        assert max_relative_error(analytic, numeric_gradients(batch, heads, mode, cfg, sketch)) <= 1e-4

    @pytest.mark.parametrize("mode", ["exact", "sketched"])
    def test_gram_regrouping_matches_direct(self, mode):
        batch, heads, sketch = small_problem(4, False, mode, ids=4, imgs=3)
        l1, g1 = batch_loss(batch, heads, mode, TripletLossConfig(0.6), sketch, method="gram")
        l2, g2 = batch_loss(batch, heads, mode, TripletLossConfig(0.6), sketch, method="direct")
        assert l1 == pytest.approx(l2, abs=1e-10)
        for name in PARAM_NAMES:
            np.testing.assert_allclose(g1[name], g2[name], atol=1e-10)

    def test_loss_bounds(self, rng):
        for seed in range(10):
            batch, heads, _ = small_problem(seed, False, "exact")
            loss, _ = batch_loss(batch, heads, "exact", TripletLossConfig(0.2))
            assert 0.0 <= loss <= 0.2 + 2.0


class TestOptimizer:
    def _heads(self, w):
        return LinearHeads(np.array([[w]]), np.zeros(1), np.array([[0.0]]), np.zeros(1))

    def _grads(self, g):
        return {"W_a": np.array([[g]]), "b_a": np.zeros(1), "W_p": np.zeros((1, 1)), "b_p": np.zeros(1)}

    def test_zero_gradient_no_change(self):
        heads = self._heads(1.5)
        new, _ = sgd_step(heads, self._grads(0.0), None, OptimizerConfig(weight_decay=0.0), 0)
        assert new.W_a[0, 0] == 1.5

    def test_plain_step(self):
        cfg = OptimizerConfig(learning_rate=0.01, momentum=0.0, weight_decay=0.0)
        new, _ = sgd_step(self._heads(1.0), self._grads(2.0), None, cfg, 0)
        assert new.W_a[0, 0] == pytest.approx(1.0 - 0.01 * 2.0, abs=1e-15)

    def test_quadratic_recurrence(self):
        # minimize 0.5 * k * w^2, gradient k * w
        k, w, v = 3.0, 2.0, 0.0
        cfg = OptimizerConfig(learning_rate=0.05, momentum=0.9, weight_decay=0.01)
        heads, state = self._heads(w), None
        for it in range(3):
            heads, state = sgd_step(heads, self._grads(k * heads.W_a[0, 0]), state, cfg, it)
            v = 0.9 * v + k * w + 0.01 * w
            w = w - 0.05 * v
            assert heads.W_a[0, 0] == pytest.approx(w, rel=1e-14)

    def test_bias_not_decayed(self):
        heads = LinearHeads(np.ones((1, 1)), np.ones(1), np.ones((1, 1)), np.ones(1))
        zero = {n: np.zeros_like(getattr(heads, n)) for n in PARAM_NAMES}
        new, _ = sgd_step(heads, zero, None, OptimizerConfig(weight_decay=0.5, learning_rate=0.1), 0)
        assert new.b_a[0] == 1.0 and new.W_a[0, 0] == pytest.approx(0.95)

    def test_non_finite_gradient(self):
        with pytest.raises(NumericFailureError):
            sgd_step(self._heads(1.0), self._grads(np.nan), None, OptimizerConfig(), 0)

    def test_schedule(self):
        cfg = OptimizerConfig()
        assert learning_rate(cfg, 0) == 0.01
        assert learning_rate(cfg, 19_999) == 0.01
        assert learning_rate(cfg, 20_000) == 0.01 / 5
        assert learning_rate(cfg, 40_000) == 0.01 / 25
        for k in range(4):
            assert learning_rate(cfg, 20_000 * k) == cfg.learning_rate / 5 ** k

    def test_defaults(self):
        cfg = OptimizerConfig()
        assert (cfg.learning_rate, cfg.weight_decay, cfg.momentum) == (0.01, 2e-3, 0.9)
        assert (cfg.lr_decay_factor, cfg.lr_decay_every, cfg.total_iters) == (5, 20_000, 75_000)

    def test_invalid_momentum(self):
        with pytest.raises(ConfigurationError):
            OptimizerConfig(momentum=1.0)


def _toy_data(seed=0, n_ids=4, per_id=6):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_ids, 3))
    ids = np.repeat(np.arange(n_ids), per_id)
    RA = centers[ids][:, None, :] + 0.8 * rng.normal(size=(len(ids), 4, 3))
    RP = 1.0 + 0.1 * rng.normal(size=(len(ids), 4, 2))
    return RA, RP, ids


class TestTrain:
    def test_zero_iterations_returns_init(self):
        RA, RP, ids = _toy_data()
        cfg = TrainConfig(c_a=3, c_p=2, ids_per_batch=2, imgs_per_id=3)
        r = train(RA, RP, ids, cfg, iterations=0, seed=5)
        init = LinearHeads.xavier(3, 2, 3, 2, np.random.default_rng(5))
        # the sampler draws nothing before init, so both rngs are in the same state
        np.testing.assert_array_equal(r.heads.W_a, init.W_a)
        assert r.history == []

    def test_deterministic(self):
        RA, RP, ids = _toy_data()
        cfg = TrainConfig(c_a=3, c_p=2, ids_per_batch=3, imgs_per_id=3)
        h1 = train(RA, RP, ids, cfg, iterations=20, seed=1).history
        h2 = train(RA, RP, ids, cfg, iterations=20, seed=1).history
        assert h1 == h2

    def test_loss_decreases_two_identities(self):
        wins = 0
        for seed in range(5):
            RA, RP, ids = _toy_data(seed, n_ids=2, per_id=8)
            cfg = TrainConfig(c_a=3, c_p=2, ids_per_batch=2, imgs_per_id=4,
                              optimizer=OptimizerConfig(learning_rate=0.05))
            hist = train(RA, RP, ids, cfg, iterations=200, seed=seed).history
            first = np.mean([l for _, l, _ in hist[:20]])
            last = np.mean([l for _, l, _ in hist[-20:]])
            assert all(np.isfinite(l) for _, l, _ in hist)
            wins += last < first
        assert wins >= 3

    def test_infeasible_batch(self):
        RA, RP, ids = _toy_data(n_ids=3)
        with pytest.raises(ConfigurationError):
            train(RA, RP, ids, TrainConfig(c_a=3, c_p=2, ids_per_batch=4, imgs_per_id=2), iterations=1)

    def test_distractors_excluded(self):
        RA, RP, ids = _toy_data(n_ids=3)
        ids = ids.copy()
        ids[ids == 2] = -1
        with pytest.raises(ConfigurationError):
            train(RA, RP, ids, TrainConfig(c_a=3, c_p=2, ids_per_batch=3, imgs_per_id=2), iterations=1)

    def test_sketched_mode_runs(self):
        RA, RP, ids = _toy_data()
        cfg = TrainConfig(c_a=3, c_p=2, mode="sketched", sketch_dim=16, ids_per_batch=2, imgs_per_id=3)
        r = train(RA, RP, ids, cfg, iterations=5, seed=0)
        assert r.sketch is not None and r.sketch.d == 16
        E = embed_arrays(RA, RP, r.heads, "sketched", r.sketch)
        np.testing.assert_allclose(np.linalg.norm(E, axis=1), 1.0, atol=1e-12)

    def test_config_round_trip(self, tmp_path):
        cfg = TrainConfig(c_a=5, mode="gap", optimizer=OptimizerConfig(learning_rate=0.1))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict({"bogus": 1})
        with pytest.raises(ConfigurationError):
            TrainConfig(mode="max")

    def test_heads_dict_round_trip(self, rng):
        heads = LinearHeads.xavier(4, 3, 2, 2, rng, True)
        again = LinearHeads.from_dict(heads.to_dict())
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(getattr(again, name), getattr(heads, name))
        assert again.nonneg_parts
