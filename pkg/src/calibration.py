"""Online calibrators OCP, FOCP, AOCP and AFOCP.

Each time step follows the same order: window weights, quantile of the
weighted score distribution at level 1 - α_t, prediction interval, coverage
test in score space, α update, optional attention fine-tuning, then the new
observation enters the window and the oldest one leaves.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Deque, List, Optional, Sequence, Tuple

import numpy as np

from .attention import (
    AttentionConfig,
    AttentionParams,
    AttentionSample,
    attention_weights,
    new_attention_optimizer,
    online_update_attention,
)
from .events import StepEvent
from .neuralnet import Activation, AdamState, MlpParams, TwoStageModel, mlp_forward
from .scores import InversionConfig, ScoreKind, compute_scores

logger = logging.getLogger(__name__)


class WindowNotReadyError(RuntimeError):
    """Raised when a calibrated prediction is requested before warm-up filled the window."""
    pass


class WarmupLengthError(ValueError):
    """Raised when warm-up receives a number of pairs different from L."""
    pass


class NonFiniteInputError(ValueError):
    """Raised when interval propagation gets a non-finite center."""
    pass


class Method(str, Enum):
    OCP = "OCP"
    FOCP = "FOCP"
    AOCP = "AOCP"
    AFOCP = "AFOCP"

    @property
    def score_kind(self) -> ScoreKind:
        if self in (Method.FOCP, Method.AFOCP):
            return ScoreKind.FEATURE_SPACE
        return ScoreKind.OUTPUT_SPACE

    @property
    def uses_attention(self) -> bool:
        return self in (Method.AOCP, Method.AFOCP)


# ---------------------------------------------------------------------------
# Weighted quantile
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeightedScoreDistribution:
    """Finite score atoms plus a point mass at +inf."""

    scores: np.ndarray
    weights: np.ndarray
    infinity_weight: float

    def __post_init__(self) -> None:
        if self.scores.shape != self.weights.shape:
            raise ValueError(f"{self.scores.shape[0]} atoms but {self.weights.shape[0]} weights")
        if np.any(self.weights < 0) or self.infinity_weight < 0:
            raise ValueError("weights must be nonnegative")
        total = float(np.sum(self.weights)) + self.infinity_weight
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {total}, expected 1")

    @classmethod
    def uniform(cls, scores) -> "WeightedScoreDistribution":
        scores = np.asarray(scores, dtype=np.float64)
        mass = 1.0 / (scores.shape[0] + 1.0)
        return cls(scores=scores, weights=np.full(scores.shape[0], mass), infinity_weight=mass)


def weighted_quantile(dist: WeightedScoreDistribution, level: float) -> float:
    """Smallest atom whose cumulative weight reaches ``level``; +inf is the largest atom.

    Levels below 0 give -inf and levels above 1 give +inf.
    """
    if level < 0.0:
        return -math.inf
    if level > 1.0:
        return math.inf
    if dist.scores.size == 0:
        return math.inf
    order = np.argsort(dist.scores, kind="stable")
    cumulative = np.cumsum(dist.weights[order])
    idx = int(np.searchsorted(cumulative, level, side="left"))
    if idx >= cumulative.shape[0]:
        return math.inf
    return float(dist.scores[order][idx])


# ---------------------------------------------------------------------------
# Miscoverage tracker
# ---------------------------------------------------------------------------

@dataclass
class AlphaTracker:
    """α_{t+1} = α_t + λ(α - err_t).

    α_t is evaluated in closed form from the integer error count,
    α_1 + λ(tα - Σ err), so rounding never accumulates over long streams.
    """

    target_alpha: float
    step_size: float
    alpha_t: float = float("nan")
    initial_alpha: float = float("nan")
    steps: int = 0
    errors: int = 0
    history: List[Tuple[float, int]] = field(default_factory=list)
    bound_violations: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.target_alpha < 1.0:
            raise ValueError(f"target alpha must lie in (0, 1), got {self.target_alpha}")
        if not self.step_size > 0.0:
            raise ValueError(f"step size must be positive, got {self.step_size}")
        if math.isnan(self.alpha_t):
            self.alpha_t = self.target_alpha
        if math.isnan(self.initial_alpha):
            self.initial_alpha = self.alpha_t

    @property
    def mean_error(self) -> float:
        return self.errors / self.steps if self.steps else 0.0


def alpha_update(tracker: AlphaTracker, err: int) -> AlphaTracker:
    """Advance α by one feedback step and append (α_t, err_t) to the history."""
    if err not in (0, 1):
        raise ValueError(f"err must be 0 or 1, got {err}")
    tracker.history.append((tracker.alpha_t, int(err)))
    tracker.steps += 1
    tracker.errors += int(err)
    tracker.alpha_t = tracker.initial_alpha + tracker.step_size * (
        tracker.steps * tracker.target_alpha - tracker.errors
    )
    lam = tracker.step_size
    if not -lam <= tracker.alpha_t <= 1.0 + lam:
        tracker.bound_violations += 1
        logger.warning(f"alpha_t={tracker.alpha_t:.6g} left [-{lam:g}, {1 + lam:g}] at step {tracker.steps}")
    return tracker


def theorem1_bound(tracker: AlphaTracker) -> Tuple[float, float]:
    """(mean error, α + (α_1 - α_{T+1}) / (Tλ)) evaluated in exact rational arithmetic.

    α_{T+1} is taken from the recursion over the integer error count, so the
    inequality lhs <= rhs holds exactly and survives the final float rounding.
    """
    if tracker.steps == 0:
        return 0.0, float(tracker.target_alpha)
    steps = tracker.steps
    alpha = Fraction(tracker.target_alpha)
    lam = Fraction(tracker.step_size)
    alpha_first = Fraction(tracker.initial_alpha)
    alpha_next = alpha_first + lam * (steps * alpha - tracker.errors)
    lhs = Fraction(tracker.errors, steps)
    rhs = alpha + (alpha_first - alpha_next) / (steps * lam)
    return float(lhs), float(rhs)


def two_sided_gap(tracker: AlphaTracker) -> Tuple[float, float]:
    """(|mean error - α|, spread of α over the run / (Tλ))."""
    if tracker.steps == 0:
        return 0.0, 0.0
    alphas = [a for a, _ in tracker.history] + [tracker.alpha_t]
    gap = abs(tracker.mean_error - tracker.target_alpha)
    return gap, (max(alphas) - min(alphas)) / (tracker.steps * tracker.step_size)


# ---------------------------------------------------------------------------
# Calibrator state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowEntry:
    x: np.ndarray
    y: np.ndarray
    feature: np.ndarray
    score: float
    residual: float = 0.0


@dataclass(frozen=True)
class PredictionInterval:
    """Per-dimension bounds; infinite when the quantile is +inf, flagged empty when -inf."""

    lower: np.ndarray
    upper: np.ndarray
    quantile_used: float
    empty: bool = False

    @property
    def widths(self) -> np.ndarray:
        if self.empty:
            return np.zeros_like(self.lower)
        return self.upper - self.lower

    @property
    def mean_width(self) -> float:
        return float(np.mean(self.widths))

    def contains(self, y) -> bool:
        if self.empty:
            return False
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        return bool(np.all((self.lower <= y) & (y <= self.upper)))


@dataclass
class CalibratorState:
    method: Method
    model: TwoStageModel
    window_length: int
    alpha: AlphaTracker
    inversion: InversionConfig
    window: Deque[WindowEntry] = field(default_factory=deque)
    attention: Optional[AttentionParams] = None
    attention_optimizer: Optional[AdamState] = None
    attention_config: Optional[AttentionConfig] = None
    attention_samples: Deque[AttentionSample] = field(default_factory=deque)
    t: int = 0
    last_event: Optional[StepEvent] = None
    last_distribution: Optional[WeightedScoreDistribution] = None

    def __post_init__(self) -> None:
        if self.window_length < 1:
            raise ValueError(f"window length must be >= 1, got {self.window_length}")
        if self.method.uses_attention != (self.attention is not None):
            raise ValueError(f"{self.method.value} {'requires' if self.method.uses_attention else 'forbids'} attention")
        self.window = deque(self.window, maxlen=self.window_length)
        self.attention_samples = deque(self.attention_samples, maxlen=self.window_length)
        if self.attention is not None:
            if self.attention_config is None:
                self.attention_config = AttentionConfig(latent_dim=self.attention.latent_dim)
            if self.attention_optimizer is None:
                self.attention_optimizer = new_attention_optimizer(self.attention, self.attention_config)

    @property
    def score_kind(self) -> ScoreKind:
        return self.method.score_kind

    @property
    def is_ready(self) -> bool:
        return len(self.window) == self.window_length


def new_calibrator(
    method: Method,
    model: TwoStageModel,
    alpha: float,
    window_length: int,
    step_size: float,
    inversion: InversionConfig,
    attention: Optional[AttentionParams] = None,
    attention_config: Optional[AttentionConfig] = None,
) -> CalibratorState:
    return CalibratorState(
        method=Method(method),
        model=model,
        window_length=window_length,
        alpha=AlphaTracker(target_alpha=alpha, step_size=step_size),
        inversion=inversion,
        attention=attention if Method(method).uses_attention else None,
        attention_config=attention_config,
    )


def _score(state: CalibratorState, x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    scores, residuals = compute_scores(state.model, x[None, :], y[None, :], state.score_kind, state.inversion)
    return float(scores[0]), float(residuals[0])


def _require_ready(state: CalibratorState) -> None:
    if not state.is_ready:
        raise WindowNotReadyError(
            f"window holds {len(state.window)} of {state.window_length} entries; run warmup first"
        )


def build_distribution(state: CalibratorState, query_feature) -> WeightedScoreDistribution:
    """Uniform 1/(L+1) masses for OCP/FOCP; attention weights for AOCP/AFOCP."""
    _require_ready(state)
    scores = np.array([e.score for e in state.window])
    if state.attention is None:
        return WeightedScoreDistribution.uniform(scores)
    keys = np.stack([e.feature for e in state.window])
    weights = attention_weights(state.attention, np.asarray(query_feature, dtype=np.float64), keys)
    return WeightedScoreDistribution(scores=scores, weights=weights.w[:-1], infinity_weight=float(weights.w[-1]))


def _current_quantile(state: CalibratorState, feature: np.ndarray) -> Tuple[float, WeightedScoreDistribution]:
    dist = build_distribution(state, feature)
    return weighted_quantile(dist, 1.0 - state.alpha.alpha_t), dist


def coverage_test(state: CalibratorState, x, y) -> Tuple[int, float, float]:
    """(err, score, quantile) with err = 1{score > quantile}."""
    x = np.asarray(x, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    quantile, _ = _current_quantile(state, mlp_forward(state.model.extractor, x))
    score, _ = _score(state, x, y)
    return int(score > quantile), score, quantile


# ---------------------------------------------------------------------------
# Intervals
# ---------------------------------------------------------------------------

def _affine_bounds(weights: np.ndarray, bias: np.ndarray, lower: np.ndarray, upper: np.ndarray):
    positive = np.clip(weights, 0.0, None)
    negative = np.clip(weights, None, 0.0)
    new_lower = positive @ lower + negative @ upper + bias
    new_upper = positive @ upper + negative @ lower + bias
    return new_lower, new_upper


def _check_ball(head: MlpParams, center_feature, radius: float) -> np.ndarray:
    center = np.asarray(center_feature, dtype=np.float64)
    if not np.all(np.isfinite(center)):
        raise NonFiniteInputError("interval propagation needs a finite center feature")
    if center.shape != (head.in_dim,):
        raise ValueError(f"center feature {center.shape} does not match head input {head.in_dim}")
    if math.isnan(radius) or radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    return center


def _unbounded(head: MlpParams, radius: float) -> PredictionInterval:
    return PredictionInterval(
        lower=np.full(head.out_dim, -math.inf), upper=np.full(head.out_dim, math.inf), quantile_used=radius
    )


def interval_ibp(head: MlpParams, center_feature, radius: float) -> PredictionInterval:
    """Box [c - r, c + r]^D pushed through the head with interval arithmetic.

    The result contains g(U) for every ||U - c|| <= r.
    """
    center = _check_ball(head, center_feature, radius)
    if math.isinf(radius):
        return _unbounded(head, radius)

    lower, upper = _affine_bounds(head.layer1_weights, head.layer1_bias, center - radius, center + radius)
    if head.activation == Activation.RELU:
        lower, upper = np.maximum(lower, 0.0), np.maximum(upper, 0.0)
    lower, upper = _affine_bounds(head.layer2_weights, head.layer2_bias, lower, upper)
    return PredictionInterval(lower=lower, upper=upper, quantile_used=radius)


def _relu_relaxation(lower: np.ndarray, upper: np.ndarray):
    """Linear lower and upper envelopes of ReLU on [lower, upper], as (slope, intercept) pairs.

    Unstable units take the chord above and zero below, so envelopes of a wider
    interval never cut inside those of a narrower one.
    """
    active = lower >= 0.0
    unstable = (lower < 0.0) & (upper > 0.0)
    span = np.where(unstable, upper - lower, 1.0)
    upper_slope = np.where(active, 1.0, np.where(unstable, upper / span, 0.0))
    upper_intercept = np.where(unstable, -upper_slope * lower, 0.0)
    lower_slope = np.where(active, 1.0, 0.0)
    return lower_slope, np.zeros_like(lower), upper_slope, upper_intercept


def interval_linear_bound(head: MlpParams, center_feature, radius: float) -> PredictionInterval:
    """Bounds on g over the ball ||U - c|| <= r from a linear relaxation of the hidden layer.

    Each output is sandwiched between two affine functions of U, which are then
    maximised and minimised over the ball in closed form. Exact for identity heads.
    """
    center = _check_ball(head, center_feature, radius)
    if math.isinf(radius):
        return _unbounded(head, radius)

    w1, b1, w2, b2 = head.tensors()
    pre_center = w1 @ center + b1
    pre_spread = radius * np.linalg.norm(w1, axis=1)
    if head.activation == Activation.RELU:
        lo_slope, lo_icpt, up_slope, up_icpt = _relu_relaxation(pre_center - pre_spread, pre_center + pre_spread)
    else:
        lo_slope = up_slope = np.ones(head.hidden_dim)
        lo_icpt = up_icpt = np.zeros(head.hidden_dim)

    positive = w2 >= 0.0
    bounds = []
    for slope_pos, icpt_pos, slope_neg, icpt_neg, sign in (
        (up_slope, up_icpt, lo_slope, lo_icpt, 1.0),
        (lo_slope, lo_icpt, up_slope, up_icpt, -1.0),
    ):
        hidden_slope = np.where(positive, w2 * slope_pos, w2 * slope_neg)
        offset = np.where(positive, w2 * icpt_pos, w2 * icpt_neg).sum(axis=1)
        linear = hidden_slope @ w1
        value = linear @ center + hidden_slope @ b1 + offset + b2
        bounds.append(value + sign * radius * np.linalg.norm(linear, axis=1))
    upper, lower = bounds
    return PredictionInterval(lower=lower, upper=upper, quantile_used=radius)


def feature_interval(head: MlpParams, center_feature, radius: float) -> PredictionInterval:
    """Intersection of the interval-propagation box and the linear-relaxation box.

    Both contain g(U) for every ||U - c|| <= r, so the intersection does too.
    """
    box = interval_ibp(head, center_feature, radius)
    linear = interval_linear_bound(head, center_feature, radius)
    lower = np.maximum(box.lower, linear.lower)
    # the two boxes can disagree by rounding when they collapse to a point
    upper = np.maximum(np.minimum(box.upper, linear.upper), lower)
    return PredictionInterval(lower=lower, upper=upper, quantile_used=radius)


def _interval_from_quantile(state: CalibratorState, feature: np.ndarray, quantile: float) -> PredictionInterval:
    if quantile == -math.inf:
        point = mlp_forward(state.model.head, feature)
        return PredictionInterval(lower=point, upper=point.copy(), quantile_used=quantile, empty=True)
    if state.score_kind == ScoreKind.FEATURE_SPACE:
        return feature_interval(state.model.head, feature, quantile)
    prediction = mlp_forward(state.model.head, feature)
    return PredictionInterval(lower=prediction - quantile, upper=prediction + quantile, quantile_used=quantile)


def predict_interval(state: CalibratorState, x) -> PredictionInterval:
    """Box hull of the prediction set at the current α_t."""
    x = np.asarray(x, dtype=np.float64)
    feature = mlp_forward(state.model.extractor, x)
    quantile, _ = _current_quantile(state, feature)
    return _interval_from_quantile(state, feature, quantile)


# ---------------------------------------------------------------------------
# Streaming protocol
# ---------------------------------------------------------------------------

def warmup(state: CalibratorState, initial_pairs: Sequence[Tuple[np.ndarray, np.ndarray]]) -> CalibratorState:
    """Fill the window with L scored pairs, oldest first. No α updates happen here."""
    if len(initial_pairs) != state.window_length:
        raise WarmupLengthError(f"warm-up needs exactly {state.window_length} pairs, got {len(initial_pairs)}")
    inputs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in initial_pairs])
    targets = np.stack([np.atleast_1d(np.asarray(y, dtype=np.float64)) for _, y in initial_pairs])
    features = mlp_forward(state.model.extractor, inputs)
    scores, residuals = compute_scores(state.model, inputs, targets, state.score_kind, state.inversion)
    state.window.clear()
    for i in range(inputs.shape[0]):
        state.window.append(WindowEntry(inputs[i], targets[i], features[i], float(scores[i]), float(residuals[i])))
    logger.debug(f"{state.method.value}: warm-up filled {len(state.window)} entries")
    return state


def _update_attention(state: CalibratorState, feature: np.ndarray, score: float) -> None:
    state.attention_samples.append(
        AttentionSample(
            query=feature,
            keys=np.stack([e.feature for e in state.window]),
            past_scores=np.array([e.score for e in state.window]),
            target=score,
        )
    )
    state.attention, state.attention_optimizer = online_update_attention(
        state.attention, list(state.attention_samples), state.attention_optimizer
    )


def observe(state: CalibratorState, x, y) -> Tuple[int, PredictionInterval, CalibratorState]:
    """Process one labelled step: predict, test coverage, adapt, then slide the window."""
    _require_ready(state)
    x = np.asarray(x, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))

    feature = mlp_forward(state.model.extractor, x)
    quantile, dist = _current_quantile(state, feature)
    interval = _interval_from_quantile(state, feature, quantile)
    score, residual = _score(state, x, y)
    err = int(score > quantile)
    alpha_used = state.alpha.alpha_t
    alpha_update(state.alpha, err)

    if state.attention is not None and state.attention_config.online_update:
        _update_attention(state, feature, score)

    state.window.append(WindowEntry(x, y, feature, score, residual))
    state.t += 1
    state.last_distribution = dist
    state.last_event = StepEvent(
        t=state.t,
        method=state.method.value,
        alpha_t=alpha_used,
        score=score,
        quantile=quantile,
        err=err,
        mean_interval_length=interval.mean_width,
        inversion_residual=residual,
    )
    logger.debug(f"{state.method.value} t={state.t}: score={score:.4g} q={quantile:.4g} err={err}")
    return err, interval, state
