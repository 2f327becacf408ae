"""Tests for the weighted quantile, the α tracker, interval propagation and the streaming calibrators."""

import math

import numpy as np
import pytest

from src.attention import AttentionConfig, AttentionParams, init_attention
from src.calibration import (
    AlphaTracker,
    Method,
    NonFiniteInputError,
    WarmupLengthError,
    WeightedScoreDistribution,
    WindowEntry,
    WindowNotReadyError,
    alpha_update,
    build_distribution,
    coverage_test,
    feature_interval,
    interval_ibp,
    interval_linear_bound,
    new_calibrator,
    observe,
    predict_interval,
    theorem1_bound,
    two_sided_gap,
    warmup,
    weighted_quantile,
)
from src.neuralnet import Activation, MlpParams, TwoStageModel, init_mlp, init_two_stage, mlp_forward, model_forward
from src.scores import InversionConfig, ScoreKind, compute_scores, default_inversion_config
from src.utils import make_rng


def _identity_mlp(dim: int) -> MlpParams:
    eye = np.eye(dim)
    return MlpParams(eye, np.zeros(dim), eye, np.zeros(dim), Activation.IDENTITY)


@pytest.fixture
def scalar_model():
    """μ(x) = x on scalars."""
    return TwoStageModel(extractor=_identity_mlp(1), head=_identity_mlp(1))


@pytest.fixture
def small_model():
    return init_two_stage(3, 4, 1, seed=0)


def _stream(length: int, seed: int = 0, in_dim: int = 3):
    rng = make_rng(seed)
    inputs = rng.normal(size=(length, in_dim))
    targets = inputs.sum(axis=1, keepdims=True) + 0.3 * rng.normal(size=(length, 1))
    return inputs, targets


def _fill_window(state, scores):
    for s in scores:
        state.window.append(WindowEntry(np.zeros(1), np.zeros(1), np.zeros(1), float(s)))
    return state


# ---------------------------------------------------------------------------
# Weighted quantile
# ---------------------------------------------------------------------------

def _brute_force_quantile(scores, weights, infinity_weight, level) -> float:
    if level < 0:
        return -math.inf
    if level > 1:
        return math.inf
    order = sorted(range(len(scores)), key=lambda i: scores[i])
    cumulative = 0.0
    for i in order:
        cumulative += weights[i]
        if cumulative >= level:
            return float(scores[i])
    return math.inf


class TestWeightedQuantile:
    def test_example(self):
        dist = WeightedScoreDistribution(np.array([1.0, 2.0, 3.0]), np.full(3, 0.25), 0.25)
        assert weighted_quantile(dist, 0.5) == 2.0

    def test_level_above_one(self):
        assert weighted_quantile(WeightedScoreDistribution.uniform([1.0, 2.0]), 1.2) == math.inf

    def test_level_below_zero(self):
        assert weighted_quantile(WeightedScoreDistribution.uniform([1.0, 2.0]), -0.1) == -math.inf

    def test_infinity_atom_absorbs_tail(self):
        dist = WeightedScoreDistribution(np.array([1.0, 2.0, 3.0]), np.full(3, 0.25), 0.25)
        assert weighted_quantile(dist, 0.9) == math.inf

    def test_level_zero_gives_smallest_atom(self):
        dist = WeightedScoreDistribution.uniform([4.0, 1.5, 3.0])
        assert weighted_quantile(dist, 0.0) == 1.5

    def test_tied_scores_merge(self):
        dist = WeightedScoreDistribution(np.array([2.0, 2.0, 5.0]), np.array([0.2, 0.2, 0.3]), 0.3)
        assert weighted_quantile(dist, 0.4) == 2.0
        assert weighted_quantile(dist, 0.41) == 5.0

    def test_matches_brute_force(self):
        rng = make_rng(0)
        for _ in range(10_000):
            n = int(rng.integers(1, 13))
            raw = rng.uniform(0.01, 1.0, size=n + 1)
            raw /= raw.sum()
            scores = rng.exponential(size=n)
            dist = WeightedScoreDistribution(scores, raw[:-1], float(raw[-1]))
            level = float(rng.uniform(-0.2, 1.2))
            assert weighted_quantile(dist, level) == _brute_force_quantile(scores, raw[:-1], raw[-1], level)

    def test_non_decreasing_in_level(self):
        dist = WeightedScoreDistribution.uniform(make_rng(1).exponential(size=9))
        levels = np.linspace(-0.1, 1.1, 121)
        values = [weighted_quantile(dist, level) for level in levels]
        assert all(a <= b for a, b in zip(values, values[1:]))

    def test_invalid_total_weight(self):
        with pytest.raises(ValueError):
            WeightedScoreDistribution(np.array([1.0]), np.array([0.6]), 0.6)


# ---------------------------------------------------------------------------
# α tracker
# ---------------------------------------------------------------------------

class TestAlphaTracker:
    def test_error_lowers_alpha(self):
        tracker = alpha_update(AlphaTracker(target_alpha=0.1, step_size=0.01), 1)
        assert tracker.alpha_t == pytest.approx(0.091)

    def test_miss_free_step_raises_alpha(self):
        tracker = alpha_update(AlphaTracker(target_alpha=0.1, step_size=0.01), 0)
        assert tracker.alpha_t == pytest.approx(0.101)

    def test_history_records_alpha_used(self):
        tracker = AlphaTracker(target_alpha=0.1, step_size=0.01)
        alpha_update(tracker, 1)
        alpha_update(tracker, 0)
        assert tracker.history == [(0.1, 1), (pytest.approx(0.091), 0)]
        assert tracker.steps == 2
        assert tracker.errors == 1

    def test_rejects_non_binary_error(self):
        with pytest.raises(ValueError):
            alpha_update(AlphaTracker(target_alpha=0.1, step_size=0.01), 2)

    def test_rejects_invalid_target(self):
        with pytest.raises(ValueError):
            AlphaTracker(target_alpha=1.0, step_size=0.01)

    @pytest.mark.parametrize("error_rate", [0.0, 0.05, 0.3, 1.0])
    def test_long_run_bound(self, error_rate):
        rng = make_rng(42)
        tracker = AlphaTracker(target_alpha=0.1, step_size=0.005)
        for _ in range(10_000):
            alpha_update(tracker, int(rng.random() < error_rate))
        lhs, rhs = theorem1_bound(tracker)
        assert lhs <= rhs
        gap, bound = two_sided_gap(tracker)
        assert gap <= bound + 1e-12

    def test_alpha_stays_in_range_under_feedback(self):
        # err = 1 whenever α_t >= 0; a negative α_t gives an infinite quantile and no error.
        tracker = AlphaTracker(target_alpha=0.1, step_size=0.05)
        for _ in range(5_000):
            alpha_update(tracker, int(tracker.alpha_t >= 0.0))
            assert -0.05 <= tracker.alpha_t <= 1.05
        assert tracker.bound_violations == 0

    def test_empty_bound(self):
        assert theorem1_bound(AlphaTracker(target_alpha=0.2, step_size=0.01)) == (0.0, 0.2)


# ---------------------------------------------------------------------------
# Interval bound propagation
# ---------------------------------------------------------------------------

def _ball_samples(center: np.ndarray, radius: float, count: int, rng) -> np.ndarray:
    directions = rng.normal(size=(count, center.shape[0]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = radius * rng.random(count) ** (1.0 / center.shape[0])
    return center + directions * radii[:, None]


class TestIntervalIbp:
    def test_zero_radius_is_point(self):
        head = init_mlp(4, 6, 2, make_rng(0))
        center = make_rng(1).normal(size=4)
        interval = interval_ibp(head, center, 0.0)
        np.testing.assert_allclose(interval.lower, mlp_forward(head, center), atol=1e-12)
        np.testing.assert_allclose(interval.widths, 0.0, atol=1e-12)

    def test_affine_width(self):
        a = make_rng(2).normal(size=(3, 5))
        head = MlpParams(a, np.zeros(3), np.eye(3), np.zeros(3), Activation.IDENTITY)
        interval = interval_ibp(head, np.zeros(5), 0.7)
        np.testing.assert_allclose(interval.widths, 2 * 0.7 * np.abs(a).sum(axis=1), rtol=1e-12)

    def test_monotone_in_radius(self):
        head = init_mlp(4, 8, 2, make_rng(3))
        center = make_rng(4).normal(size=4)
        small, large = interval_ibp(head, center, 0.2), interval_ibp(head, center, 0.5)
        assert np.all(large.lower <= small.lower)
        assert np.all(small.upper <= large.upper)

    @pytest.mark.parametrize("seed", range(50))
    def test_sound_on_ball_samples(self, seed):
        rng = make_rng(seed + 20)
        head = init_mlp(5, 8, 3, rng)
        center = rng.normal(size=5)
        radius = float(rng.uniform(0.1, 2.0))
        interval = interval_ibp(head, center, radius)
        outputs = mlp_forward(head, _ball_samples(center, radius, 1000, rng))
        assert np.all(outputs >= interval.lower - 1e-12)
        assert np.all(outputs <= interval.upper + 1e-12)

    def test_infinite_radius(self):
        interval = interval_ibp(init_mlp(3, 4, 2, make_rng(0)), np.zeros(3), math.inf)
        assert np.all(np.isinf(interval.lower)) and np.all(np.isinf(interval.upper))
        assert interval.mean_width == math.inf

    def test_non_finite_center(self):
        with pytest.raises(NonFiniteInputError):
            interval_ibp(init_mlp(3, 4, 2, make_rng(0)), np.array([0.0, np.nan, 1.0]), 1.0)


class TestFeatureInterval:
    @pytest.mark.parametrize("seed", range(50))
    def test_sound_on_ball_samples(self, seed):
        rng = make_rng(seed + 200)
        head = init_mlp(6, 10, 3, rng)
        center = rng.normal(size=6)
        radius = float(rng.uniform(0.1, 3.0))
        outputs = mlp_forward(head, _ball_samples(center, radius, 1000, rng))
        for interval in (interval_linear_bound(head, center, radius), feature_interval(head, center, radius)):
            assert np.all(outputs >= interval.lower - 1e-9)
            assert np.all(outputs <= interval.upper + 1e-9)

    def test_identity_activation_is_exact(self):
        rng = make_rng(5)
        head = MlpParams(rng.normal(size=(4, 5)), rng.normal(size=4), rng.normal(size=(2, 4)), rng.normal(size=2),
                         Activation.IDENTITY)
        center = rng.normal(size=5)
        interval = interval_linear_bound(head, center, 0.8)
        combined = head.layer2_weights @ head.layer1_weights
        np.testing.assert_allclose(interval.widths, 1.6 * np.linalg.norm(combined, axis=1), rtol=1e-12)
        np.testing.assert_allclose((interval.lower + interval.upper) / 2, mlp_forward(head, center), atol=1e-12)

    def test_zero_radius_is_point(self):
        head = init_mlp(4, 6, 2, make_rng(0))
        center = make_rng(1).normal(size=4)
        interval = feature_interval(head, center, 0.0)
        np.testing.assert_allclose(interval.lower, mlp_forward(head, center), atol=1e-12)
        np.testing.assert_allclose(interval.widths, 0.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_within_interval_propagation(self, seed):
        rng = make_rng(seed + 300)
        head = init_mlp(8, 12, 4, rng)
        center = rng.normal(size=8)
        box, combined = interval_ibp(head, center, 1.5), feature_interval(head, center, 1.5)
        assert np.all(combined.lower >= box.lower)
        assert np.all(combined.upper <= box.upper)
        assert np.all(combined.lower <= combined.upper)

    def test_tighter_than_box_in_many_dimensions(self):
        rng = make_rng(6)
        head = init_mlp(50, 50, 50, rng)
        center = rng.normal(size=50)
        box, combined = interval_ibp(head, center, 2.0), feature_interval(head, center, 2.0)
        assert combined.mean_width < 0.5 * box.mean_width

    def test_monotone_in_radius(self):
        head = init_mlp(4, 8, 2, make_rng(3))
        center = make_rng(4).normal(size=4)
        widths = [feature_interval(head, center, r).mean_width for r in (0.0, 0.1, 0.5, 1.0, 3.0)]
        assert all(a <= b for a, b in zip(widths, widths[1:]))

    def test_infinite_radius(self):
        interval = feature_interval(init_mlp(3, 4, 2, make_rng(0)), np.zeros(3), math.inf)
        assert interval.mean_width == math.inf

    def test_non_finite_center(self):
        with pytest.raises(NonFiniteInputError):
            interval_linear_bound(init_mlp(3, 4, 2, make_rng(0)), np.array([0.0, np.inf, 1.0]), 1.0)


# ---------------------------------------------------------------------------
# Calibrator protocol
# ---------------------------------------------------------------------------

class TestCalibratorState:
    def test_attention_required_for_attention_methods(self, small_model):
        with pytest.raises(ValueError):
            new_calibrator(Method.AOCP, small_model, 0.1, 5, 0.005, InversionConfig(step_size=0.1))

    def test_attention_dropped_for_uniform_methods(self, small_model):
        attention = init_attention(4, 3, seed=0)
        state = new_calibrator(Method.FOCP, small_model, 0.1, 5, 0.005, InversionConfig(step_size=0.1), attention)
        assert state.attention is None
        assert state.score_kind == ScoreKind.FEATURE_SPACE

    def test_observe_before_warmup(self, small_model):
        state = new_calibrator(Method.OCP, small_model, 0.1, 5, 0.005, InversionConfig(step_size=0.1))
        with pytest.raises(WindowNotReadyError):
            observe(state, np.zeros(3), np.zeros(1))


class TestWarmup:
    def test_fills_window_in_order(self, small_model):
        inputs, targets = _stream(6)
        state = new_calibrator(Method.OCP, small_model, 0.1, 6, 0.005, InversionConfig(step_size=0.1))
        warmup(state, list(zip(inputs, targets)))
        assert len(state.window) == 6
        np.testing.assert_array_equal(np.stack([e.x for e in state.window]), inputs)
        assert state.alpha.steps == 0

    def test_scores_match_recomputation(self, small_model):
        inputs, targets = _stream(5, seed=1)
        cfg = default_inversion_config(small_model.head)
        state = warmup(new_calibrator(Method.FOCP, small_model, 0.1, 5, 0.005, cfg), list(zip(inputs, targets)))
        for entry in state.window:
            (score,), _ = compute_scores(small_model, entry.x[None, :], entry.y[None, :], ScoreKind.FEATURE_SPACE, cfg)
            assert entry.score == pytest.approx(score, rel=1e-9, abs=1e-12)

    def test_wrong_count(self, small_model):
        inputs, targets = _stream(4)
        state = new_calibrator(Method.OCP, small_model, 0.1, 5, 0.005, InversionConfig(step_size=0.1))
        with pytest.raises(WarmupLengthError):
            warmup(state, list(zip(inputs, targets)))


class TestQuantileAndCoverage:
    def test_uniform_distribution(self, small_model):
        inputs, targets = _stream(3)
        state = warmup(
            new_calibrator(Method.OCP, small_model, 0.1, 3, 0.005, InversionConfig(step_size=0.1)),
            list(zip(inputs, targets)),
        )
        dist = build_distribution(state, np.zeros(4))
        np.testing.assert_allclose(dist.weights, [0.25, 0.25, 0.25])
        assert dist.infinity_weight == 0.25

    def test_identical_features_reduce_attention_to_uniform(self, small_model):
        state = new_calibrator(
            Method.AFOCP, small_model, 0.1, 4, 0.005, InversionConfig(step_size=0.1), init_attention(4, 3, seed=1)
        )
        for s in (0.5, 1.0, 1.5, 2.0):
            state.window.append(WindowEntry(np.zeros(3), np.zeros(1), np.ones(4), s))
        dist = build_distribution(state, make_rng(0).normal(size=4))
        np.testing.assert_allclose(dist.weights, np.full(4, 0.2), atol=1e-12)
        assert dist.weights.sum() + dist.infinity_weight == pytest.approx(1.0, abs=1e-12)

    def test_coverage_example(self, scalar_model):
        state = new_calibrator(Method.OCP, scalar_model, 0.25, 3, 0.01, InversionConfig(step_size=0.1))
        _fill_window(state, [1.0, 2.0, 3.0])
        err, score, quantile = coverage_test(state, np.array([0.0]), np.array([2.5]))
        assert (err, score, quantile) == (0, 2.5, 3.0)

    def test_interval_example(self, scalar_model):
        state = new_calibrator(Method.OCP, scalar_model, 0.25, 3, 0.01, InversionConfig(step_size=0.1))
        _fill_window(state, [1.0, 2.0, 3.0])
        interval = predict_interval(state, np.array([2.0]))
        np.testing.assert_allclose(interval.lower, [-1.0])
        np.testing.assert_allclose(interval.upper, [5.0])
        assert interval.quantile_used == 3.0

    def test_zero_quantile_is_degenerate(self, scalar_model):
        state = new_calibrator(Method.OCP, scalar_model, 0.25, 3, 0.01, InversionConfig(step_size=0.1))
        _fill_window(state, [0.0, 0.0, 0.0])
        interval = predict_interval(state, np.array([1.5]))
        assert interval.mean_width == 0.0
        assert interval.contains(np.array([1.5]))

    def test_infinite_quantile_never_errs(self, scalar_model):
        state = new_calibrator(Method.OCP, scalar_model, 0.1, 3, 0.01, InversionConfig(step_size=0.1))
        state.alpha.alpha_t = -0.05
        _fill_window(state, [1.0, 2.0, 3.0])
        err, _, quantile = coverage_test(state, np.array([0.0]), np.array([1e6]))
        assert quantile == math.inf and err == 0
        assert predict_interval(state, np.array([0.0])).mean_width == math.inf

    def test_empty_set_always_errs(self, scalar_model):
        state = new_calibrator(Method.OCP, scalar_model, 0.1, 3, 0.01, InversionConfig(step_size=0.1))
        state.alpha.alpha_t = 1.2
        _fill_window(state, [1.0, 2.0, 3.0])
        err, _, quantile = coverage_test(state, np.array([0.0]), np.array([0.0]))
        assert quantile == -math.inf and err == 1
        interval = predict_interval(state, np.array([0.0]))
        assert interval.empty and interval.mean_width == 0.0
        assert not interval.contains(np.array([0.0]))


class TestObserve:
    @pytest.mark.parametrize("method", list(Method))
    def test_err_agrees_with_quantile(self, small_model, method):
        inputs, targets = _stream(40, seed=3)
        attention = init_attention(4, 3, seed=0) if method.uses_attention else None
        state = new_calibrator(method, small_model, 0.1, 10, 0.005, default_inversion_config(small_model.head), attention)
        warmup(state, list(zip(inputs[:10], targets[:10])))
        for t, (x, y) in enumerate(zip(inputs[10:], targets[10:]), start=1):
            err, interval, state = observe(state, x, y)
            event = state.last_event
            assert event.t == t
            assert err == event.err == int(event.score > event.quantile)
            assert interval.quantile_used == event.quantile
            assert len(state.window) == 10
        assert state.alpha.steps == 30
        np.testing.assert_array_equal(state.window[-1].x, inputs[-1])

    def test_identical_calibrators_agree(self, small_model):
        inputs, targets = _stream(30, seed=4)
        runs = []
        for _ in range(2):
            state = warmup(
                new_calibrator(Method.OCP, small_model, 0.1, 8, 0.005, InversionConfig(step_size=0.1)),
                list(zip(inputs[:8], targets[:8])),
            )
            quantiles = []
            for x, y in zip(inputs[8:], targets[8:]):
                observe(state, x, y)
                quantiles.append(state.last_event.quantile)
            runs.append(quantiles)
        assert runs[0] == runs[1]

    def test_perfect_model_never_errs(self):
        extractor = _identity_mlp(2)
        head = MlpParams(np.eye(2), np.zeros(2), np.array([[1.0, 2.0]]), np.array([0.5]), Activation.IDENTITY)
        model = TwoStageModel(extractor=extractor, head=head)
        inputs = make_rng(5).integers(-4, 5, size=(60, 2)).astype(float)
        targets = model_forward(model, inputs)
        state = new_calibrator(
            Method.AFOCP, model, 0.1, 10, 0.005, InversionConfig(step_size=0.1, num_steps=5), init_attention(2, 3, seed=0)
        )
        warmup(state, list(zip(inputs[:10], targets[:10])))
        errs = [observe(state, x, y)[0] for x, y in zip(inputs[10:], targets[10:])]
        assert errs == [0] * 50
        assert all(e.score == 0.0 for e in state.window)

    def test_uniform_reduction_with_zero_query_weights(self, small_model):
        inputs, targets = _stream(60, seed=6)
        cfg = default_inversion_config(small_model.head, num_steps=20)
        base = init_attention(4, 3, seed=2)
        frozen = AttentionParams(np.zeros_like(base.query_weights), base.key_weights, base.beta)
        attention_cfg = AttentionConfig(latent_dim=3, online_update=False)
        fields = ("t", "alpha_t", "score", "quantile", "err", "mean_interval_length", "inversion_residual")

        for uniform_method, attention_method in ((Method.OCP, Method.AOCP), (Method.FOCP, Method.AFOCP)):
            logs = {}
            for method in (uniform_method, attention_method):
                state = new_calibrator(
                    method, small_model, 0.3, 6, 0.005, cfg,
                    frozen if method.uses_attention else None, attention_cfg,
                )
                warmup(state, list(zip(inputs[:6], targets[:6])))
                logs[method] = []
                for x, y in zip(inputs[6:], targets[6:]):
                    observe(state, x, y)
                    logs[method].append([getattr(state.last_event, name) for name in fields])
            uniform_log = np.array(logs[uniform_method], dtype=float)
            attention_log = np.array(logs[attention_method], dtype=float)
            assert uniform_log.shape == (54, len(fields))
            np.testing.assert_allclose(attention_log, uniform_log, rtol=0, atol=1e-9)

    @pytest.mark.parametrize("method", [Method.OCP, Method.FOCP])
    def test_long_run_bound_on_constant_stream(self, scalar_model, method):
        # every score is 1, so errors only come from α_t > 1 emptying the set
        state = new_calibrator(method, scalar_model, 0.1, 10, 0.005, InversionConfig(step_size=0.5, num_steps=1))
        x, y = np.array([0.0]), np.array([1.0])
        warmup(state, [(x, y)] * 10)
        for _ in range(10_000):
            observe(state, x, y)
        assert state.t == 10_000
        assert all(e.score == 1.0 for e in state.window)
        lhs, rhs = theorem1_bound(state.alpha)
        assert lhs <= rhs
        assert state.alpha.errors > 0
        gap, bound = two_sided_gap(state.alpha)
        assert gap <= bound + 1e-12
        assert state.alpha.bound_violations == 0
