"""Two-layer dense networks with hand-derived gradients, Adam and MSE training.

Every array is float64. A single sample is a 1-D vector; a batch is a 2-D
matrix with one sample per row. Batched parameter gradients are sums over rows.
"""

from __future__ import annotations

import json
import logging
from dataclasses import InitVar, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence, Tuple, TypeVar

import numpy as np

from .utils import atomic_write_text, derive_seed, make_rng

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "two-stage-mlp/1"


class ShapeMismatchError(ValueError):
    """Raised when array dimensions do not line up with the network."""
    pass


class NonFiniteGradientError(ValueError):
    """Raised by adam_step when a gradient holds NaN or inf."""
    pass


class EmptyDatasetError(ValueError):
    """Raised when training is asked to fit zero samples."""
    pass


class NonFiniteParameterError(ValueError):
    """Raised when a weight or bias holds NaN or inf."""
    pass


class Activation(str, Enum):
    RELU = "relu"
    IDENTITY = "identity"


class ParameterSet(Protocol):
    """Anything Adam can optimize: an ordered tuple of arrays plus a rebuild hook."""

    def tensors(self) -> Tuple[np.ndarray, ...]: ...

    def with_tensors(self, tensors: Sequence[np.ndarray]): ...


P = TypeVar("P", bound=ParameterSet)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpParams:
    """Dense -> activation -> dense. Layer 2 is always linear."""

    layer1_weights: np.ndarray  # [hidden, in]
    layer1_bias: np.ndarray  # [hidden]
    layer2_weights: np.ndarray  # [out, hidden]
    layer2_bias: np.ndarray  # [out]
    activation: Activation = Activation.RELU
    check_finite: InitVar[bool] = True

    def __post_init__(self, check_finite: bool) -> None:
        w1, b1, w2, b2 = self.tensors()
        if w1.ndim != 2 or w2.ndim != 2 or b1.ndim != 1 or b2.ndim != 1:
            raise ShapeMismatchError("weights must be matrices and biases vectors")
        if b1.shape[0] != w1.shape[0]:
            raise ShapeMismatchError(f"layer1 bias {b1.shape} does not match weights {w1.shape}")
        if w2.shape[1] != w1.shape[0]:
            raise ShapeMismatchError(f"layer2 weights {w2.shape} do not consume hidden size {w1.shape[0]}")
        if b2.shape[0] != w2.shape[0]:
            raise ShapeMismatchError(f"layer2 bias {b2.shape} does not match weights {w2.shape}")
        if check_finite and not self.is_finite():
            raise NonFiniteParameterError("network parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.layer1_weights.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.layer1_weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layer2_weights.shape[0]

    def tensors(self) -> Tuple[np.ndarray, ...]:
        return (self.layer1_weights, self.layer1_bias, self.layer2_weights, self.layer2_bias)

    def with_tensors(self, tensors: Sequence[np.ndarray], check_finite: bool = True) -> "MlpParams":
        w1, b1, w2, b2 = tensors
        return MlpParams(
            np.asarray(w1, dtype=np.float64),
            np.asarray(b1, dtype=np.float64),
            np.asarray(w2, dtype=np.float64),
            np.asarray(b2, dtype=np.float64),
            self.activation,
            check_finite,
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())


@dataclass(frozen=True)
class TwoStageModel:
    """μ = head ∘ extractor; the extractor output is the feature space of size D."""

    extractor: MlpParams
    head: MlpParams
    history: Tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        if self.extractor.out_dim != self.head.in_dim:
            raise ShapeMismatchError(
                f"extractor emits {self.extractor.out_dim} features, head expects {self.head.in_dim}"
            )

    @property
    def feature_dim(self) -> int:
        return self.extractor.out_dim

    def tensors(self) -> Tuple[np.ndarray, ...]:
        return self.extractor.tensors() + self.head.tensors()

    def with_tensors(self, tensors: Sequence[np.ndarray]) -> "TwoStageModel":
        tensors = list(tensors)
        return TwoStageModel(
            extractor=self.extractor.with_tensors(tensors[:4]),
            head=self.head.with_tensors(tensors[4:]),
            history=self.history,
        )


def init_mlp(
    in_dim: int,
    hidden_dim: int,
    out_dim: int,
    rng: np.random.Generator,
    activation: Activation = Activation.RELU,
) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    a1 = np.sqrt(6.0 / (in_dim + hidden_dim))
    a2 = np.sqrt(6.0 / (hidden_dim + out_dim))
    return MlpParams(
        layer1_weights=rng.uniform(-a1, a1, size=(hidden_dim, in_dim)),
        layer1_bias=np.zeros(hidden_dim),
        layer2_weights=rng.uniform(-a2, a2, size=(out_dim, hidden_dim)),
        layer2_bias=np.zeros(out_dim),
        activation=activation,
    )


def init_two_stage(in_dim: int, feature_dim: int, out_dim: int, seed: int) -> TwoStageModel:
    """Extractor in -> D -> D and head D -> D -> out, both with ReLU hidden layers."""
    rng = make_rng(derive_seed(seed, "model"))
    extractor = init_mlp(in_dim, feature_dim, feature_dim, rng)
    head = init_mlp(feature_dim, feature_dim, out_dim, rng)
    return TwoStageModel(extractor=extractor, head=head)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _as_batch(params: MlpParams, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != params.in_dim:
        raise ShapeMismatchError(f"input of shape {x.shape} does not match in_dim={params.in_dim}")
    return batch, single


def _activate(params: MlpParams, pre: np.ndarray) -> np.ndarray:
    if params.activation == Activation.RELU:
        return np.maximum(pre, 0.0)
    return pre


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Return layer2(act(layer1(x))) for a vector or a batch of rows."""
    batch, single = _as_batch(params, x)
    hidden = _activate(params, batch @ params.layer1_weights.T + params.layer1_bias)
    out = hidden @ params.layer2_weights.T + params.layer2_bias
    return out[0] if single else out


def mlp_backward(params: MlpParams, x, upstream_grad) -> Tuple[MlpParams, np.ndarray]:
    """Gradients of <upstream_grad, mlp_forward(params, x)> w.r.t. parameters and x.

    The ReLU subgradient at exactly 0 is 0.
    """
    batch, single = _as_batch(params, x)
    up = np.asarray(upstream_grad, dtype=np.float64)
    up = up[None, :] if up.ndim == 1 else up
    if up.shape != (batch.shape[0], params.out_dim):
        raise ShapeMismatchError(
            f"upstream gradient {np.shape(upstream_grad)} does not match output ({batch.shape[0]}, {params.out_dim})"
        )

    pre = batch @ params.layer1_weights.T + params.layer1_bias
    hidden = _activate(params, pre)

    grad_w2 = up.T @ hidden
    grad_b2 = up.sum(axis=0)
    grad_hidden = up @ params.layer2_weights
    if params.activation == Activation.RELU:
        grad_hidden = grad_hidden * (pre > 0.0)
    grad_w1 = grad_hidden.T @ batch
    grad_b1 = grad_hidden.sum(axis=0)
    grad_x = grad_hidden @ params.layer1_weights

    # gradients may be non-finite
    grads = params.with_tensors((grad_w1, grad_b1, grad_w2, grad_b2), check_finite=False)
    return grads, (grad_x[0] if single else grad_x)


def model_features(model: TwoStageModel, x) -> np.ndarray:
    """f(x)."""
    return mlp_forward(model.extractor, x)


def model_forward(model: TwoStageModel, x) -> np.ndarray:
    """μ(x) = g(f(x))."""
    return mlp_forward(model.head, mlp_forward(model.extractor, x))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    """Adam moments for one parameter set, with decoupled weight decay."""

    first_moment: Tuple[np.ndarray, ...]
    second_moment: Tuple[np.ndarray, ...]
    step_count: int = 0
    learning_rate: float = 5e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(
    params: ParameterSet,
    learning_rate: float = 5e-4,
    weight_decay: float = 1e-6,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> AdamState:
    zeros = tuple(np.zeros_like(t) for t in params.tensors())
    return AdamState(
        first_moment=zeros,
        second_moment=tuple(np.zeros_like(t) for t in params.tensors()),
        learning_rate=learning_rate,
        weight_decay=weight_decay,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step(params: P, grads: ParameterSet, state: AdamState) -> Tuple[P, AdamState]:
    """One bias-corrected Adam update; weight decay is applied to the parameters directly."""
    grad_tensors = grads.tensors()
    if not all(np.all(np.isfinite(g)) for g in grad_tensors):
        raise NonFiniteGradientError(f"non-finite gradient at Adam step {state.step_count + 1}")
    param_tensors = params.tensors()
    if len(grad_tensors) != len(param_tensors) or any(
        g.shape != p.shape for g, p in zip(grad_tensors, param_tensors)
    ):
        raise ShapeMismatchError("gradient shapes do not match parameter shapes")

    step = state.step_count + 1
    correction1 = 1.0 - state.beta1 ** step
    correction2 = 1.0 - state.beta2 ** step

    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(param_tensors, grad_tensors, state.first_moment, state.second_moment):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        new_params.append(p - state.learning_rate * (update + state.weight_decay * p))
        new_m.append(m)
        new_v.append(v)

    new_state = AdamState(
        first_moment=tuple(new_m),
        second_moment=tuple(new_v),
        step_count=step,
        learning_rate=state.learning_rate,
        weight_decay=state.weight_decay,
        beta1=state.beta1,
        beta2=state.beta2,
        epsilon=state.epsilon,
    )
    return params.with_tensors(new_params), new_state


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def mse(model: TwoStageModel, inputs: np.ndarray, targets: np.ndarray) -> float:
    residual = model_forward(model, inputs) - targets
    return float(np.mean(residual * residual))


def _mse_gradients(model: TwoStageModel, inputs: np.ndarray, targets: np.ndarray) -> TwoStageModel:
    features = mlp_forward(model.extractor, inputs)
    residual = mlp_forward(model.head, features) - targets
    upstream = 2.0 * residual / residual.size
    head_grads, feature_grad = mlp_backward(model.head, features, upstream)
    extractor_grads, _ = mlp_backward(model.extractor, inputs, feature_grad)
    return TwoStageModel(extractor=extractor_grads, head=head_grads)


def _stack_dataset(model: TwoStageModel, dataset: Sequence[Tuple[np.ndarray, np.ndarray]]):
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    inputs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in dataset])
    targets = np.stack([np.atleast_1d(np.asarray(y, dtype=np.float64)) for _, y in dataset])
    if inputs.shape[1] != model.extractor.in_dim or targets.shape[1] != model.head.out_dim:
        raise ShapeMismatchError(
            f"dataset shapes {inputs.shape[1:]} -> {targets.shape[1:]} do not match model "
            f"{model.extractor.in_dim} -> {model.head.out_dim}"
        )
    return inputs, targets


def train_two_stage(
    model: TwoStageModel,
    dataset: Sequence[Tuple[np.ndarray, np.ndarray]],
    epochs: int,
    batch_size: int,
    seed: int,
    learning_rate: float = 5e-4,
    weight_decay: float = 1e-6,
) -> TwoStageModel:
    """Fit μ with mini-batch Adam on the MSE loss.

    The batch order of epoch e is a permutation drawn from a generator keyed on
    (seed, e), so two runs with the same seed are bitwise identical. The
    returned model carries ``history``: the full-dataset MSE before training
    followed by one entry per epoch.
    """
    inputs, targets = _stack_dataset(model, dataset)
    if epochs <= 0:
        return model

    n = inputs.shape[0]
    state = init_adam(model, learning_rate=learning_rate, weight_decay=weight_decay)
    history = [mse(model, inputs, targets)]
    logger.debug(f"Training two-stage model on {n} samples: initial MSE={history[0]:.6g}")

    for epoch in range(epochs):
        order = make_rng(derive_seed(seed, "shuffle", f"epoch{epoch}")).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            grads = _mse_gradients(model, inputs[idx], targets[idx])
            model, state = adam_step(model, grads, state)
        history.append(mse(model, inputs, targets))
        logger.debug(f"  epoch {epoch + 1}/{epochs}: MSE={history[-1]:.6g}")

    return TwoStageModel(extractor=model.extractor, head=model.head, history=tuple(history))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def tensor_to_json(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": np.asarray(arr, dtype=np.float64).ravel(order="C").tolist()}


def tensor_from_json(blob: dict) -> np.ndarray:
    return np.asarray(blob["data"], dtype=np.float64).reshape(blob["shape"], order="C")


def mlp_to_json(params: MlpParams) -> dict:
    return {
        "activation": params.activation.value,
        "layer1_weights": tensor_to_json(params.layer1_weights),
        "layer1_bias": tensor_to_json(params.layer1_bias),
        "layer2_weights": tensor_to_json(params.layer2_weights),
        "layer2_bias": tensor_to_json(params.layer2_bias),
    }


def mlp_from_json(blob: dict) -> MlpParams:
    return MlpParams(
        layer1_weights=tensor_from_json(blob["layer1_weights"]),
        layer1_bias=tensor_from_json(blob["layer1_bias"]),
        layer2_weights=tensor_from_json(blob["layer2_weights"]),
        layer2_bias=tensor_from_json(blob["layer2_bias"]),
        activation=Activation(blob.get("activation", Activation.RELU.value)),
    )


def save_checkpoint(model: TwoStageModel, path: Path) -> str:
    """Write the model as JSON; Python float repr keeps every bit."""
    blob = {
        "format": CHECKPOINT_FORMAT,
        "extractor": mlp_to_json(model.extractor),
        "head": mlp_to_json(model.head),
    }
    return atomic_write_text(Path(path), json.dumps(blob))


def load_checkpoint(path: Path) -> TwoStageModel:
    with open(path, "r", encoding="utf-8") as f:
        blob = json.load(f)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {blob.get('format')!r}")
    return TwoStageModel(extractor=mlp_from_json(blob["extractor"]), head=mlp_from_json(blob["head"]))
