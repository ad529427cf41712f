"""Selection math: margins, weights, sampling, and the composed select() path."""

import numpy as np
import pytest

import selat.autodiff as ad
from selat.autodiff import Tensor
from selat.errors import (ConfigError, ContractError, DegenerateWeightsError,
                          ShapeError)
from selat.models import build_mlp
from selat.selection import (BatchState, SelectionConfig, batch_gradient,
                             cosine_alignment, logit_margin, margin_weights,
                             normalize_to_probs, per_sample_gradients,
                             sample_subset, select, subset_size,
                             threshold_weights)

# 4-sample batch exercising the whole margin pipeline by hand: margins are
# [1.5, 0.1, 0.8, 0.1+9e-17], so sample 1 must carry the strictly largest
# probability (sample 3's float margin is a hair wider)
MARGIN_LOGITS = np.array([[2.0, 0.5, -1.0],
                          [0.1, 0.0, -0.2],
                          [-0.3, 1.2, 0.4],
                          [3.0, -2.0, 2.9]])
MARGIN_LABELS = np.array([0, 0, 1, 0])
MARGIN_PROBS = [0.030418253551446433, 0.4562737606861458,
                0.05703422507626242, 0.45627376068614534]

# per-sample gradient stack with one anti-aligned row; checked by hand
GRAD_ROWS = np.array([[1.0, 0.0, 0.0],
                      [0.0, 2.0, 0.0],
                      [-1.0, -1.0, 0.0],
                      [1.0, 1.0, 1.0]])
GRAD_SIMS = [0.4082482904631964, 0.8164965809270593,
             -0.8660254037834387, 0.9428090415811745]
GRAD_PROBS = [0.18834516088393016, 0.37669032176816786,
              0.0, 0.434964517347902]


def scoped_batch_grad(model, x, y, scope):
    model.zero_grads()
    loss = ad.cross_entropy_with_logits(model.logits(Tensor(x)), y)
    ad.backward(loss)
    names = model.param_scopes[scope]
    return np.concatenate([model.params[n].grad.ravel().astype(np.float64) for n in names])


class TestSubsetSize:
    def test_quarter_of_128(self):
        assert subset_size(0.25, 128) == 32

    def test_half_up_rounding(self):
        assert subset_size(0.25, 10) == 3  # 2.5 rounds up

    def test_clamp_to_one(self):
        assert subset_size(0.001, 8) == 1

    def test_full_batch(self):
        assert subset_size(1.0, 7) == 7

    def test_empty_batch_rejected(self):
        with pytest.raises(ContractError):
            subset_size(0.25, 0)


class TestLogitMargin:
    def test_correct_by_margin(self):
        assert logit_margin(np.array([[2.0, 0.5, -1.0]]), np.array([0]))[0] == 1.5

    def test_misclassified_negative(self):
        assert logit_margin(np.array([[0.5, 2.0, -1.0]]), np.array([0]))[0] == -1.5

    def test_tie_is_zero(self):
        assert logit_margin(np.array([[1.0, 1.0]]), np.array([0]))[0] == 0.0

    def test_fixture_margins(self):
        m = logit_margin(MARGIN_LOGITS, MARGIN_LABELS)
        np.testing.assert_allclose(m, [1.5, 0.1, 0.8, 0.1], atol=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ConfigError):
            logit_margin(np.ones((3, 1)), np.zeros(3, dtype=np.int64))

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            logit_margin(np.ones((2, 3)), np.array([0, 3]))

    def test_shape_guards(self):
        with pytest.raises(ShapeError):
            logit_margin(np.ones(3), np.array([0]))
        with pytest.raises(ShapeError):
            logit_margin(np.ones((2, 3)), np.array([0]))

    def test_sign_tracks_correctness(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            logits = rng.standard_normal((16, 5))
            labels = rng.integers(0, 5, size=16)
            m = logit_margin(logits, labels)
            correct = logits.argmax(axis=1) == labels
            ties = m == 0.0
            np.testing.assert_array_equal((m > 0)[~ties], correct[~ties])


class TestMarginWeights:
    def test_boundary_sample_dominates(self):
        assert margin_weights(np.array([0.0]), eps_stab=1e-8)[0] == 1e8

    def test_sign_blind(self):
        w = margin_weights(np.array([1.0, -1.0]))
        assert w[0] == w[1]

    def test_quarter_margin_four_times_weight(self):
        w = margin_weights(np.array([0.5, 2.0]), eps_stab=1e-8)
        np.testing.assert_allclose(w[0] / w[1], 4.0, rtol=1e-7)

    def test_monotone_in_magnitude(self):
        m = np.random.default_rng(1).uniform(-3, 3, size=50)
        w = margin_weights(m)
        order = np.argsort(np.abs(m))
        assert np.all(np.diff(w[order]) <= 0)


class TestNormalizeToProbs:
    def test_uniform(self):
        np.testing.assert_allclose(normalize_to_probs(np.ones(4)), [0.25] * 4)

    def test_three_to_one(self):
        np.testing.assert_allclose(normalize_to_probs(np.array([3.0, 1.0])), [0.75, 0.25])

    def test_all_zero_degenerate(self):
        with pytest.raises(DegenerateWeightsError):
            normalize_to_probs(np.zeros(2))

    def test_negative_rejected(self):
        with pytest.raises(DegenerateWeightsError):
            normalize_to_probs(np.array([1.0, -0.5]))

    def test_nonfinite_rejected(self):
        with pytest.raises(DegenerateWeightsError):
            normalize_to_probs(np.array([1.0, np.nan]))

    def test_sums_to_one(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            p = normalize_to_probs(rng.random(32))
            assert abs(p.sum() - 1.0) <= 1e-9


class TestPerSampleGradients:
    def setup_method(self):
        self.model = build_mlp([4, 6, 3], seed=0)
        rng = np.random.default_rng(3)
        self.x = rng.standard_normal((8, 4)).astype(np.float32)
        self.y = rng.integers(0, 3, size=8)

    def test_singleton_matches_batch_gradient(self):
        g = per_sample_gradients(self.model, self.x[:1], self.y[:1])
        ref = scoped_batch_grad(self.model, self.x[:1], self.y[:1], "final_linear")
        np.testing.assert_allclose(g[0], ref, rtol=1e-6)

    def test_duplicate_rows_identical(self):
        x = np.repeat(self.x[:1], 2, axis=0)
        y = np.repeat(self.y[:1], 2)
        g = per_sample_gradients(self.model, x, y)
        np.testing.assert_array_equal(g[0], g[1])

    def test_mean_matches_batched_backward_f32(self):
        g = per_sample_gradients(self.model, self.x, self.y, grad_scope="all")
        ref = scoped_batch_grad(self.model, self.x, self.y, "all")
        np.testing.assert_allclose(g.mean(axis=0), ref, atol=1e-5)

    def test_mean_matches_batched_backward_f64(self):
        with ad.use_dtype(np.float64):
            model = build_mlp([4, 6, 3], seed=0)
            x = self.x.astype(np.float64)
            g = per_sample_gradients(model, x, self.y, grad_scope="all")
            ref = scoped_batch_grad(model, x, self.y, "all")
        np.testing.assert_allclose(g.mean(axis=0), ref, atol=1e-10)

    def test_unknown_scope_rejected(self):
        with pytest.raises(ConfigError):
            per_sample_gradients(self.model, self.x, self.y, grad_scope="stem")

    def test_row_length_covers_scope(self):
        g = per_sample_gradients(self.model, self.x, self.y)
        assert g.shape == (8, 6 * 3 + 3)


class TestBatchGradient:
    def test_single_vector_identity(self):
        v = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(batch_gradient(v[None, :]), v)

    def test_opposite_pair_cancels(self):
        v = np.array([0.3, -1.2, 4.0])
        np.testing.assert_array_equal(batch_gradient(np.stack([v, -v])), np.zeros(3))

    def test_matches_naive_sum(self):
        rng = np.random.default_rng(4)
        G = rng.standard_normal((8, 17))
        oracle = np.zeros(17)
        for row in G:
            oracle += row
        oracle /= 8.0
        np.testing.assert_allclose(batch_gradient(G), oracle, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            batch_gradient(np.empty((0, 3)))


class TestCosineAlignment:
    def test_self_similarity(self):
        v = np.array([0.5, -1.0, 2.0])
        assert abs(cosine_alignment(v, v) - 1.0) <= 1e-9

    def test_orthogonal(self):
        assert cosine_alignment(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_antiparallel(self):
        v = np.array([1.0, 2.0])
        assert abs(cosine_alignment(-v, v) + 1.0) <= 1e-9

    def test_zero_vector_finite(self):
        sim = cosine_alignment(np.zeros(3), np.array([1.0, 0.0, 0.0]))
        assert np.isfinite(sim) and sim == 0.0

    def test_stack_form(self):
        ref = np.array([1.0, 0.0])
        sims = cosine_alignment(np.array([[2.0, 0.0], [0.0, 3.0], [-1.0, 0.0]]), ref)
        np.testing.assert_allclose(sims, [1.0, 0.0, -1.0], atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_alignment(np.ones(3), np.ones(4))


class TestThresholdWeights:
    def test_clips_negatives(self):
        np.testing.assert_array_equal(
            threshold_weights(np.array([0.8, -0.3, 0.0])), [0.8, 0.0, 0.0])

    def test_all_negative_goes_zero(self):
        assert threshold_weights(np.array([-0.1, -0.9])).sum() == 0.0

    def test_identity_on_unit_interval(self):
        s = np.array([0.0, 0.4, 1.0])
        np.testing.assert_array_equal(threshold_weights(s), s)


class TestSampleSubset:
    def test_point_mass(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            out = sample_subset(np.array([1.0, 0.0, 0.0, 0.0]), 1, rng)
            assert out.tolist() == [0]

    def test_uniform_full_draw(self):
        out = sample_subset(np.full(6, 1 / 6), 6, np.random.default_rng(6))
        assert sorted(out.tolist()) == list(range(6))

    def test_marginal_frequency(self):
        rng = np.random.default_rng(7)
        p = np.array([0.7, 0.3])
        hits = sum(sample_subset(p, 1, rng)[0] == 0 for _ in range(100_000))
        assert abs(hits / 100_000 - 0.7) <= 0.01

    def test_zero_prob_excluded(self):
        rng = np.random.default_rng(8)
        p = np.array([0.5, 0.5, 0.0, 0.0])
        for _ in range(200):
            assert set(sample_subset(p, 2, rng)) == {0, 1}

    def test_uniform_fill_when_mass_runs_out(self):
        rng = np.random.default_rng(9)
        p = np.array([1.0, 0.0, 0.0])
        seen = set()
        for _ in range(200):
            out = sample_subset(p, 2, rng)
            assert out[0] == 0
            seen.add(out[1])
        assert seen == {1, 2}

    def test_distinct_without_replacement(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            out = sample_subset(np.full(8, 0.125), 5, rng)
            assert len(set(out.tolist())) == 5

    def test_replacement_allows_repeats(self):
        rng = np.random.default_rng(11)
        out = sample_subset(np.array([0.5, 0.5]), 10, rng, replacement=True)
        assert len(out) == 10 and set(out.tolist()) <= {0, 1}

    def test_overdraw_rejected(self):
        with pytest.raises(ContractError):
            sample_subset(np.full(3, 1 / 3), 4, np.random.default_rng(0))

    def test_bad_distribution_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ContractError):
            sample_subset(np.array([0.5, 0.2]), 1, rng)
        with pytest.raises(ContractError):
            sample_subset(np.array([1.5, -0.5]), 1, rng)


class TestSelect:
    def setup_method(self):
        self.cfg = SelectionConfig(strategy="margin", rho=0.25, warmup_epochs=2)
        self.state = BatchState(labels=MARGIN_LABELS, logits=MARGIN_LOGITS)

    def test_none_selects_nothing(self):
        d = select("none", self.state, self.cfg, epoch=5, rng=np.random.default_rng(0))
        assert d.strategy_used == "none" and d.chosen.size == 0

    def test_full_selects_everything(self):
        d = select("full", self.state, self.cfg, epoch=5, rng=np.random.default_rng(0))
        assert d.strategy_used == "full"
        np.testing.assert_array_equal(d.chosen, np.arange(4))

    def test_warmup_is_uniform(self):
        for epoch in (0, 1):
            d = select("margin", self.state, self.cfg, epoch, np.random.default_rng(0))
            assert d.strategy_used == "uniform-warmup"
            np.testing.assert_allclose(d.probs, 0.25)
        d = select("margin", self.state, self.cfg, 2, np.random.default_rng(0))
        assert d.strategy_used == "margin"

    def test_margin_fixture_probs(self):
        d = select("margin", self.state, self.cfg, epoch=3, rng=np.random.default_rng(0))
        np.testing.assert_allclose(d.probs, MARGIN_PROBS, atol=1e-9)
        assert d.probs.argmax() == 1
        assert d.chosen.size == 1 and not d.fallback

    def test_grad_match_fixture_probs(self):
        state = BatchState(labels=np.zeros(4, dtype=np.int64), gradients=GRAD_ROWS)
        d = select("grad_match", state, self.cfg, epoch=3, rng=np.random.default_rng(0))
        np.testing.assert_allclose(d.probs, GRAD_PROBS, atol=1e-9)
        assert d.probs[2] == 0.0

    def test_missing_state_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            select("margin", BatchState(labels=MARGIN_LABELS), self.cfg, 3, rng)
        with pytest.raises(ConfigError):
            select("grad_match", BatchState(labels=MARGIN_LABELS), self.cfg, 3, rng)

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ConfigError):
            select("entropy", self.state, self.cfg, 3, np.random.default_rng(0))

    def test_degenerate_weights_fall_back(self, caplog):
        # opposite gradient rows: mean is zero, both cosines are 0, every
        # thresholded weight vanishes
        v = np.array([1.0, -2.0, 0.5])
        state = BatchState(labels=np.zeros(2, dtype=np.int64),
                           gradients=np.stack([v, -v]))
        with caplog.at_level("WARNING", logger="selat.selection"):
            d = select("grad_match", state, self.cfg, 3, np.random.default_rng(0))
        assert d.fallback
        np.testing.assert_allclose(d.probs, 0.5)
        assert any("uniform" in r.message for r in caplog.records)

    def test_probs_always_normalized(self):
        rng = np.random.default_rng(12)
        for strategy in ("random", "margin", "grad_match"):
            for _ in range(10):
                B = int(rng.integers(2, 33))
                state = BatchState(
                    labels=rng.integers(0, 5, size=B),
                    logits=rng.standard_normal((B, 5)),
                    gradients=rng.standard_normal((B, 7)))
                d = select(strategy, state, self.cfg, epoch=4, rng=rng)
                assert abs(d.probs.sum() - 1.0) <= 1e-9
                assert d.probs.min() >= 0.0

    def test_margin_probs_monotone(self):
        rng = np.random.default_rng(13)
        logits = rng.standard_normal((16, 4))
        labels = rng.integers(0, 4, size=16)
        d = select("margin", BatchState(labels=labels, logits=logits), self.cfg, 4, rng)
        m = np.abs(logit_margin(logits, labels))
        order = np.argsort(m)
        assert np.all(np.diff(d.probs[order]) < 0)

    def test_grad_scale_invariance(self):
        rng = np.random.default_rng(14)
        G = rng.standard_normal((12, 9))
        state_a = BatchState(labels=np.zeros(12, dtype=np.int64), gradients=G)
        state_b = BatchState(labels=np.zeros(12, dtype=np.int64), gradients=G * 37.5)
        pa = select("grad_match", state_a, self.cfg, 4, np.random.default_rng(0)).probs
        pb = select("grad_match", state_b, self.cfg, 4, np.random.default_rng(0)).probs
        np.testing.assert_allclose(pa, pb, atol=1e-9)

    def test_warmup_positions_exchangeable(self):
        from scipy import stats
        rng = np.random.default_rng(15)
        counts = np.zeros(8)
        state = BatchState(labels=np.zeros(8, dtype=np.int64),
                           logits=np.tile(np.arange(8.0)[:, None], (1, 3)))
        for _ in range(10_000):
            d = select("margin", state, self.cfg, epoch=0, rng=rng)
            counts[d.chosen] += 1
        assert stats.chisquare(counts).pvalue > 0.01

    def test_config_guards(self):
        rng = np.random.default_rng(0)
        for bad in (SelectionConfig(rho=0.0), SelectionConfig(rho=1.5),
                    SelectionConfig(warmup_epochs=-1), SelectionConfig(eps_stab=0.0)):
            with pytest.raises(ConfigError):
                select("margin", self.state, bad, 3, rng)
