"""Attention weights over the calibration window, learned by score prediction.

The query is the current feature f(x_t); the keys are the L stored window
features in arrival order (oldest first). Only weights are produced; values
are never mixed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .neuralnet import AdamState, ShapeMismatchError, adam_step, init_adam, tensor_from_json, tensor_to_json
from .utils import atomic_write_text, derive_seed, make_rng

logger = logging.getLogger(__name__)

ATTENTION_FORMAT = "attention/1"


class EmptyHistoryError(ValueError):
    """Raised when attention is asked to weigh an empty window."""
    pass


class UnobservedLabelError(ValueError):
    """Raised when an online update sees a sample whose target is not known yet."""
    pass


class AttentionConfig(BaseModel):
    """Training configuration shared by pretraining and online fine-tuning."""

    latent_dim: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=5e-4, gt=0)
    weight_decay: float = Field(default=1e-6, ge=0)
    pretrain_epochs: int = Field(default=20, ge=0)
    online_update: bool = True


@dataclass(frozen=True)
class AttentionParams:
    query_weights: np.ndarray  # W_q [D, D']
    key_weights: np.ndarray  # W_k [D, D']
    beta: float

    def __post_init__(self) -> None:
        if self.query_weights.ndim != 2 or self.query_weights.shape != self.key_weights.shape:
            raise ShapeMismatchError(
                f"W_q {self.query_weights.shape} and W_k {self.key_weights.shape} must share shape [D, D']"
            )
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")

    @property
    def feature_dim(self) -> int:
        return self.query_weights.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.query_weights.shape[1]

    def tensors(self) -> Tuple[np.ndarray, ...]:
        return (self.query_weights, self.key_weights)

    def with_tensors(self, tensors: Sequence[np.ndarray]) -> "AttentionParams":
        wq, wk = tensors
        return AttentionParams(np.asarray(wq, dtype=np.float64), np.asarray(wk, dtype=np.float64), self.beta)


@dataclass(frozen=True)
class AttentionWeights:
    """a: softmax coefficients over the window; w: calibration weights, w[-1] on +inf."""

    a: np.ndarray
    w: np.ndarray


@dataclass(frozen=True)
class AttentionSample:
    """One instantaneous loss term: predict ``target`` from the window scores."""

    query: np.ndarray
    keys: np.ndarray
    past_scores: np.ndarray
    target: float


def init_attention(feature_dim: int, latent_dim: int, seed: int) -> AttentionParams:
    """Glorot-uniform W_q, W_k and beta = 1/sqrt(D')."""
    rng = make_rng(seed)
    bound = np.sqrt(6.0 / (feature_dim + latent_dim))
    return AttentionParams(
        query_weights=rng.uniform(-bound, bound, size=(feature_dim, latent_dim)),
        key_weights=rng.uniform(-bound, bound, size=(feature_dim, latent_dim)),
        beta=1.0 / np.sqrt(latent_dim),
    )


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _logits(params: AttentionParams, query: np.ndarray, keys: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    query = np.asarray(query, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise EmptyHistoryError("attention needs at least one key feature")
    if query.shape != (params.feature_dim,) or keys.shape[1] != params.feature_dim:
        raise ShapeMismatchError(
            f"query {query.shape} / keys {keys.shape} do not match feature dimension {params.feature_dim}"
        )
    embedded_query = query @ params.query_weights
    embedded_keys = keys @ params.key_weights
    return params.beta * (embedded_keys @ embedded_query), embedded_query, embedded_keys


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - np.max(logits))
    return shifted / shifted.sum()


def attention_weights(params: AttentionParams, query_feature, key_features) -> AttentionWeights:
    """a = softmax(β <q W_q, k_l W_k>), w = [L/(L+1) · a, 1/(L+1)]."""
    logits, _, _ = _logits(params, query_feature, key_features)
    a = softmax(logits)
    window = a.shape[0]
    w = np.empty(window + 1)
    w[:window] = (window / (window + 1.0)) * a
    w[window] = 1.0 / (window + 1.0)
    return AttentionWeights(a=a, w=w)


def predict_score(weights: AttentionWeights, past_scores) -> float:
    """Ŝ = Σ_τ a[τ] · S[τ]."""
    past_scores = np.asarray(past_scores, dtype=np.float64)
    if past_scores.shape != weights.a.shape:
        raise ShapeMismatchError(f"{past_scores.shape[0]} scores for {weights.a.shape[0]} attention weights")
    return float(np.dot(weights.a, past_scores))


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

def attention_loss(params: AttentionParams, sample: AttentionSample) -> float:
    predicted = predict_score(attention_weights(params, sample.query, sample.keys), sample.past_scores)
    return (sample.target - predicted) ** 2


def mean_attention_loss(params: AttentionParams, samples: Sequence[AttentionSample]) -> float:
    return float(np.mean([attention_loss(params, s) for s in samples]))


def attention_grad(params: AttentionParams, query_feature, key_features, past_scores, target: float) -> AttentionParams:
    """Gradient of (target - Ŝ)^2 w.r.t. W_q and W_k, returned in AttentionParams shape."""
    logits, embedded_query, embedded_keys = _logits(params, query_feature, key_features)
    past_scores = np.asarray(past_scores, dtype=np.float64)
    if past_scores.shape != logits.shape:
        raise ShapeMismatchError(f"{past_scores.shape} scores for {logits.shape[0]} keys")

    a = softmax(logits)
    predicted = float(np.dot(a, past_scores))
    # dLoss/dlogit_l = -2 r · a_l (s_l - Ŝ)
    grad_logits = -2.0 * (target - predicted) * a * (past_scores - predicted)

    grad_query_embedding = params.beta * (embedded_keys.T @ grad_logits)
    grad_key_embeddings = params.beta * np.outer(grad_logits, embedded_query)
    grad_wq = np.outer(np.asarray(query_feature, dtype=np.float64), grad_query_embedding)
    grad_wk = np.asarray(key_features, dtype=np.float64).T @ grad_key_embeddings
    return params.with_tensors((grad_wq, grad_wk))


def _sample_step(params: AttentionParams, sample: AttentionSample, state: AdamState) -> Tuple[AttentionParams, AdamState]:
    grads = attention_grad(params, sample.query, sample.keys, sample.past_scores, sample.target)
    return adam_step(params, grads, state)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def build_attention_samples(features: np.ndarray, scores: np.ndarray, window: int) -> List[AttentionSample]:
    """Slide a window of length L over a scored stream: sample t predicts scores[t]."""
    features = np.asarray(features, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    return [
        AttentionSample(
            query=features[t],
            keys=features[t - window:t],
            past_scores=scores[t - window:t],
            target=float(scores[t]),
        )
        for t in range(window, features.shape[0])
    ]


def pretrain_attention(
    params: AttentionParams,
    feature_windows: Sequence[AttentionSample],
    epochs: int,
    seed: int,
    learning_rate: float = 5e-4,
    weight_decay: float = 1e-6,
) -> AttentionParams:
    """Adam on the instantaneous losses, one sample per step, shuffled per (seed, epoch)."""
    if len(feature_windows) == 0:
        raise EmptyHistoryError("attention pretraining needs at least one window")
    if epochs <= 0:
        return params

    state = init_adam(params, learning_rate=learning_rate, weight_decay=weight_decay)
    for epoch in range(epochs):
        order = make_rng(derive_seed(seed, "attention-shuffle", f"epoch{epoch}")).permutation(len(feature_windows))
        for i in order:
            params, state = _sample_step(params, feature_windows[i], state)
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug(f"  attention epoch {epoch + 1}/{epochs}: loss={mean_attention_loss(params, feature_windows):.6g}")
    return params


def online_update_attention(
    params: AttentionParams,
    latest_window: Sequence[AttentionSample],
    adam_state: AdamState,
) -> Tuple[AttentionParams, AdamState]:
    """One chronological pass of Adam steps over the current window's losses."""
    for sample in latest_window:
        if not np.isfinite(sample.target) or not np.all(np.isfinite(sample.past_scores)):
            raise UnobservedLabelError("online attention update needs fully observed scores")
    for sample in latest_window:
        params, adam_state = _sample_step(params, sample, adam_state)
    return params, adam_state


def new_attention_optimizer(params: AttentionParams, cfg: AttentionConfig) -> AdamState:
    return init_adam(params, learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_attention(params: AttentionParams, path: Path) -> str:
    blob = {
        "format": ATTENTION_FORMAT,
        "beta": params.beta,
        "query_weights": tensor_to_json(params.query_weights),
        "key_weights": tensor_to_json(params.key_weights),
    }
    return atomic_write_text(Path(path), json.dumps(blob))


def load_attention(path: Path) -> AttentionParams:
    with open(path, "r", encoding="utf-8") as f:
        blob = json.load(f)
    if blob.get("format") != ATTENTION_FORMAT:
        raise ValueError(f"unsupported attention checkpoint format: {blob.get('format')!r}")
    return AttentionParams(
        query_weights=tensor_from_json(blob["query_weights"]),
        key_weights=tensor_from_json(blob["key_weights"]),
        beta=float(blob["beta"]),
    )
