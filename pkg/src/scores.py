"""Nonconformity scores in output space and in the feature space of the head."""

import logging
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field
from tenacity import (
    Retrying,
    before_sleep_log,
    retry_if_exception_type,
    stop_after_attempt,
)

from .neuralnet import MlpParams, ShapeMismatchError, TwoStageModel, mlp_backward, mlp_forward

logger = logging.getLogger(__name__)

DEFAULT_INVERSION_STEPS = 100
DIVERGENCE_RETRY_FACTOR = 0.1


class ScoreKind(str, Enum):
    OUTPUT_SPACE = "output"
    FEATURE_SPACE = "feature"


class InversionDivergedError(RuntimeError):
    """Raised when a gradient-descent iterate stops being finite."""

    def __init__(self, step: int, step_size: float):
        super().__init__(f"head inversion diverged at step {step} (step size {step_size:g})")
        self.step = step
        self.step_size = step_size


class InversionConfig(BaseModel):
    """Plain gradient descent on ||g(V) - y||^2 starting from f(x)."""

    step_size: float = Field(gt=0)
    num_steps: int = Field(default=DEFAULT_INVERSION_STEPS, ge=1)


def default_inversion_config(head: MlpParams, num_steps: int = DEFAULT_INVERSION_STEPS) -> InversionConfig:
    """Step size 0.1 / (1 + ||W1||_2 ||W2||_2), scaled to the head's Lipschitz bound."""
    lipschitz = np.linalg.norm(head.layer1_weights, 2) * np.linalg.norm(head.layer2_weights, 2)
    return InversionConfig(step_size=0.1 / (1.0 + float(lipschitz)), num_steps=num_steps)


def _check_pair(model: TwoStageModel, x: np.ndarray, y: np.ndarray) -> None:
    if x.shape[-1] != model.extractor.in_dim:
        raise ShapeMismatchError(f"input dimension {x.shape[-1]} != {model.extractor.in_dim}")
    if y.shape[-1] != model.head.out_dim:
        raise ShapeMismatchError(f"label dimension {y.shape[-1]} != {model.head.out_dim}")


def output_score(model: TwoStageModel, x, y) -> float:
    """||y - μ(x)||_2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    _check_pair(model, x, y)
    prediction = mlp_forward(model.head, mlp_forward(model.extractor, x))
    return float(np.linalg.norm(y - prediction))


def output_scores(model: TwoStageModel, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Row-wise output_score over a batch."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    _check_pair(model, inputs, targets)
    predictions = mlp_forward(model.head, mlp_forward(model.extractor, inputs))
    return np.linalg.norm(targets - predictions, axis=1)


# ---------------------------------------------------------------------------
# Head inversion
# ---------------------------------------------------------------------------

def _descend(
    head: MlpParams,
    v_init: np.ndarray,
    y: np.ndarray,
    step_size: float,
    num_steps: int,
    residuals: Optional[list] = None,
) -> np.ndarray:
    v = np.array(v_init, dtype=np.float64, copy=True)
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, num_steps + 1):
            residual = mlp_forward(head, v) - y
            if residuals is not None:
                residuals.append(float(np.sum(residual * residual)))
            # grad_V ||g(V) - y||^2 = J^T 2 (g(V) - y), rows independent
            _, grad_v = mlp_backward(head, v, 2.0 * residual)
            v = v - step_size * grad_v
            if not np.all(np.isfinite(v)):
                raise InversionDivergedError(step, step_size)
    return v


def invert_head(head: MlpParams, v_init, y, cfg: InversionConfig) -> np.ndarray:
    """Run exactly cfg.num_steps gradient steps of V <- V - η ∇_V ||g(V) - y||^2.

    Works on a single feature vector or on a batch of rows.
    """
    v_init = np.asarray(v_init, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if v_init.shape[-1] != head.in_dim or y.shape[-1] != head.out_dim:
        raise ShapeMismatchError(
            f"inversion shapes {v_init.shape} -> {y.shape} do not match head {head.in_dim} -> {head.out_dim}"
        )
    return _descend(head, v_init, y, cfg.step_size, cfg.num_steps)


def inversion_residuals(head: MlpParams, v_init, y, cfg: InversionConfig) -> np.ndarray:
    """||g(V_k) - y||^2 for k = 0 .. N along the inversion trajectory."""
    residuals: list = []
    v_final = _descend(
        head, np.asarray(v_init, dtype=np.float64), np.asarray(y, dtype=np.float64),
        cfg.step_size, cfg.num_steps, residuals,
    )
    last = mlp_forward(head, v_final) - y
    residuals.append(float(np.sum(last * last)))
    return np.asarray(residuals)


def _descend_masked(
    head: MlpParams,
    v_init: np.ndarray,
    y: np.ndarray,
    step_size: float,
    num_steps: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """Batched descent where a row that stops being finite is frozen and flagged.

    Rows never interact, so every finite row ends where it would alone.
    """
    v = np.array(v_init, dtype=np.float64, copy=True)
    diverged = np.zeros(v.shape[0], dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(num_steps):
            live = ~diverged
            if not np.any(live):
                break
            residual = mlp_forward(head, v[live]) - y[live]
            _, grad_v = mlp_backward(head, v[live], 2.0 * residual)
            stepped = v[live] - step_size * grad_v
            v[live] = stepped
            diverged[live] = ~np.all(np.isfinite(stepped), axis=1)
    return v, diverged


def _invert_with_retry(head: MlpParams, features: np.ndarray, targets: np.ndarray, cfg: InversionConfig) -> np.ndarray:
    """One automatic retry with η/10 before the divergence error propagates."""
    for attempt in Retrying(
        stop=stop_after_attempt(2),
        retry=retry_if_exception_type(InversionDivergedError),
        before_sleep=before_sleep_log(logger, logging.WARNING),
        reraise=True,
    ):
        with attempt:
            n = attempt.retry_state.attempt_number
            step_size = cfg.step_size * (DIVERGENCE_RETRY_FACTOR ** (n - 1))
            return invert_head(head, features, targets, InversionConfig(step_size=step_size, num_steps=cfg.num_steps))
    raise AssertionError("unreachable")


def feature_scores(
    model: TwoStageModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    cfg: InversionConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    """Batched feature scores ||V̄ - f(x)|| and terminal residuals ||g(V̄) - y||.

    A row whose descent diverges is retried on its own with a smaller step; the
    other rows keep their first-pass result.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    _check_pair(model, inputs, targets)
    features = mlp_forward(model.extractor, inputs)
    v_bar, diverged = _descend_masked(model.head, features, targets, cfg.step_size, cfg.num_steps)
    for i in np.flatnonzero(diverged):
        v_bar[i] = _invert_with_retry(model.head, features[i : i + 1], targets[i : i + 1], cfg)[0]
    scores = np.linalg.norm(v_bar - features, axis=1)
    residuals = np.linalg.norm(mlp_forward(model.head, v_bar) - targets, axis=1)
    return scores, residuals


def feature_score(model: TwoStageModel, x, y, cfg: InversionConfig) -> float:
    """Approximate inf over V in g^-1(y) of ||V - f(x)|| by head inversion from f(x)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    _check_pair(model, x, y)
    scores, _ = feature_scores(model, x[None, :], y[None, :], cfg)
    return float(scores[0])


def compute_scores(
    model: TwoStageModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    kind: ScoreKind,
    cfg: InversionConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    """Scores of the requested family plus terminal residuals (zeros in output space)."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if kind == ScoreKind.FEATURE_SPACE:
        return feature_scores(model, inputs, targets, cfg)
    return output_scores(model, inputs, targets), np.zeros(inputs.shape[0])
