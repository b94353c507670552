"""
Dense multilayer perceptron engine: forward pass, reverse-mode gradients,
Adam/AdamW and finite-difference gradient checking.

Parameters and activations are 32-bit; reductions in the backward pass
accumulate in 64-bit. The gradient checker runs the whole model in 64-bit.
"""

import json
import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from utils.errors import ContractViolation, NumericError, ValidationError, raise_if_problems

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "softmax", "sigmoid", "linear")
PARAM_DTYPE = np.float32


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str


@dataclass(eq=False)
class MlpModel:
    layers: List[LayerSpec]
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def head(self) -> str:
        return self.layers[-1].activation

    @property
    def dtype(self):
        return self.weights[0].dtype

    def parameters(self) -> List[np.ndarray]:
        """Weights and biases interleaved layer by layer: [W0, b0, W1, b1, ...]"""
        params = []
        for weight, bias in zip(self.weights, self.biases):
            params.extend([weight, bias])
        return params

    def with_parameters(self, params: Sequence[np.ndarray]) -> "MlpModel":
        return MlpModel(list(self.layers), list(params[0::2]), list(params[1::2]))


@dataclass(eq=False)
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)
    step: int = 0


def _stream_key(label) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    return int(label)


def make_rng(seed: int, *stream) -> np.random.Generator:
    """
    Counter-based generator for one named stream of a seed.

    Philox keyed through SeedSequence([seed, *stream]): every (seed, stream)
    pair owns an independent sequence, so workers never share RNG state.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_stream_key(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def param_path(index: int) -> str:
    kind = "weights" if index % 2 == 0 else "biases"
    return f"layers[{index // 2}].{kind}"


def validate_model_spec(spec: Dict) -> List[str]:
    """Return problems with a JSON model spec {"layers": [{"in":..,"out":..,"act":..}]}"""
    problems = []
    if not isinstance(spec, dict) or set(spec) != {"layers"}:
        return ["model spec must be an object with exactly the key 'layers'"]
    layers = spec["layers"]
    if not isinstance(layers, list) or not layers:
        return ["model spec needs at least one layer"]
    previous_out = None
    for i, layer in enumerate(layers):
        if not isinstance(layer, dict) or set(layer) != {"in", "out", "act"}:
            problems.append(f"layer {i} must have exactly the keys in, out, act")
            continue
        if not all(isinstance(layer[k], int) and layer[k] > 0 for k in ("in", "out")):
            problems.append(f"layer {i} dims must be positive integers")
        if layer["act"] not in ACTIVATIONS:
            problems.append(f"layer {i} activation {layer['act']!r} not in {ACTIVATIONS}")
        if layer["act"] == "softmax" and i != len(layers) - 1:
            problems.append(f"layer {i}: softmax is only allowed as the final activation")
        if previous_out is not None and layer["in"] != previous_out:
            problems.append(f"layer {i} in_dim {layer['in']} does not chain with {previous_out}")
        previous_out = layer["out"]
    return problems


def parse_model_spec(spec: Dict) -> List[LayerSpec]:
    raise_if_problems(validate_model_spec(spec))
    return [LayerSpec(layer["in"], layer["out"], layer["act"]) for layer in spec["layers"]]


def model_from_spec_json(text: str, seed: int) -> MlpModel:
    """Initialise a model from its JSON spec text"""
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"model spec is not valid JSON: {e}")
    return init(spec, seed)


def model_to_spec(model: MlpModel) -> Dict:
    return {"layers": [{"in": l.in_dim, "out": l.out_dim, "act": l.activation} for l in model.layers]}


def init(model_spec, seed: int) -> MlpModel:
    """Uniform Glorot initialisation with zero biases; same seed gives identical bytes"""
    layers = model_spec if isinstance(model_spec, list) else parse_model_spec(model_spec)
    weights, biases = [], []
    for index, layer in enumerate(layers):
        limit = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
        rng = make_rng(seed, "init", index)
        weights.append(rng.uniform(-limit, limit, size=(layer.out_dim, layer.in_dim)).astype(PARAM_DTYPE))
        biases.append(np.zeros(layer.out_dim, dtype=PARAM_DTYPE))
    return MlpModel(list(layers), weights, biases)


def astype(model: MlpModel, dtype) -> MlpModel:
    return model.with_parameters([p.astype(dtype) for p in model.parameters()])


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0)
    if activation == "sigmoid":
        return expit(z)
    if activation == "softmax":
        shifted = np.exp(z - z.max(axis=1, keepdims=True))
        return shifted / shifted.sum(axis=1, keepdims=True)
    return z


def forward(model: MlpModel, batch: np.ndarray, cache: Optional[list] = None) -> np.ndarray:
    """
    Evaluate the model on an S x I batch.

    Args:
        model: the MLP
        batch: input rows
        cache: when a list is given it is filled with (input, pre-activation,
            activation) per layer for a following `backward` call

    Returns:
        S x D output batch
    """
    values = np.asarray(batch)
    if values.ndim != 2 or values.shape[1] != model.input_dim:
        raise ValidationError(
            f"batch shape {values.shape} does not match model input dimension {model.input_dim}"
        )
    activation = values.astype(model.dtype, copy=False)
    if cache is not None:
        cache.clear()
    for layer, weight, bias in zip(model.layers, model.weights, model.biases):
        z = activation @ weight.T + bias
        out = _activate(z, layer.activation)
        if cache is not None:
            cache.append((activation, z, out))
        activation = out
    return activation


def backward(model: MlpModel, batch: np.ndarray, loss_grad: np.ndarray, cache: Optional[list]) -> List[np.ndarray]:
    """Gradients of the loss w.r.t. every parameter, in `MlpModel.parameters` order"""
    if not cache or len(cache) != len(model.layers):
        raise ContractViolation("backward needs the cache filled by forward on the same batch")
    output = cache[-1][2]
    grad = np.asarray(loss_grad)
    if grad.shape != output.shape or cache[0][0].shape[0] != np.asarray(batch).shape[0]:
        raise ContractViolation(f"loss gradient shape {grad.shape} does not match outputs {output.shape}")
    grad = grad.astype(model.dtype, copy=False)

    grads: List[np.ndarray] = [None] * (2 * len(model.layers))
    for index in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[index]
        layer_input, z, out = cache[index]
        if layer.activation == "relu":
            dz = grad * (z > 0)
        elif layer.activation == "sigmoid":
            dz = grad * out * (1 - out)
        elif layer.activation == "softmax":
            dz = out * (grad - np.sum(grad * out, axis=1, keepdims=True))
        else:
            dz = grad
        dz_wide = dz.astype(np.float64)
        grads[2 * index] = (dz_wide.T @ layer_input.astype(np.float64)).astype(model.dtype)
        grads[2 * index + 1] = dz_wide.sum(axis=0).astype(model.dtype)
        if index:
            grad = dz @ model.weights[index]
    return grads


def make_optimizer(params: Sequence[np.ndarray], kind: str = "adam", lr: float = 1e-3,
                   weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> OptimizerState:
    if kind not in ("adam", "adamw"):
        raise ValidationError(f"optimizer kind must be adam or adamw, got {kind!r}")
    if kind == "adam" and weight_decay:
        raise ValidationError("weight_decay is only used by adamw")
    return OptimizerState(
        kind=kind, lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
    )


def optimizer_step(state: OptimizerState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> List[np.ndarray]:
    """One Adam/AdamW update with bias correction; returns new parameter arrays"""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValidationError("optimizer state, parameters and gradients disagree in length")
    for index, (param, grad) in enumerate(zip(params, grads)):
        if param.shape != grad.shape:
            raise ValidationError(f"{param_path(index)}: gradient shape {grad.shape} != {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient in {param_path(index)}")

    state.step += 1
    correction1 = 1 - state.beta1 ** state.step
    correction2 = 1 - state.beta2 ** state.step
    updated = []
    for index, (param, grad) in enumerate(zip(params, grads)):
        m = state.beta1 * state.first_moment[index] + (1 - state.beta1) * grad
        v = state.beta2 * state.second_moment[index] + (1 - state.beta2) * grad * grad
        state.first_moment[index], state.second_moment[index] = m, v
        new = param
        if state.kind == "adamw" and state.weight_decay:
            new = new - state.lr * state.weight_decay * param
        new = new - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        updated.append(new.astype(param.dtype, copy=False))
    return updated


def finite_difference_error(func: Callable[[np.ndarray], float], values: np.ndarray, analytic: np.ndarray,
                            h: float, indices: Optional[np.ndarray] = None, atol: float = 1e-3) -> float:
    """
    Largest relative error between `analytic` and central differences of `func`.

    Relative errors use max(|analytic|, |numeric|, atol) as denominator so
    coordinates with vanishing gradient are compared absolutely.
    """
    point = np.array(values, dtype=np.float64)
    flat = point.reshape(-1)
    expected = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if indices is None:
        indices = np.arange(flat.size)
    worst = 0.0
    for k in indices:
        original = flat[k]
        flat[k] = original + h
        plus = func(point)
        flat[k] = original - h
        minus = func(point)
        flat[k] = original
        numeric = (plus - minus) / (2 * h)
        scale = max(abs(expected[k]), abs(numeric), atol)
        worst = max(worst, abs(expected[k] - numeric) / scale)
    return worst


def gradient_check(model: MlpModel, loss_fn: Callable[[np.ndarray], Tuple[float, np.ndarray]],
                   batch: np.ndarray, h: float = 1e-3, n_params: int = 200, seed: int = 0,
                   atol: float = 1e-3) -> float:
    """
    Compare backward() against central differences on a random parameter subsample.

    `loss_fn` maps an output batch to (loss, d loss / d outputs). Everything,
    model included, is evaluated in 64-bit.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ValidationError(f"step h={h} outside [1e-5, 1e-2]")
    wide = astype(model, np.float64)
    inputs = np.asarray(batch, dtype=np.float64)
    cache: list = []
    outputs = forward(wide, inputs, cache)
    _, output_grad = loss_fn(outputs)
    grads = backward(wide, inputs, output_grad, cache)

    params = wide.parameters()
    offsets = np.cumsum([0] + [p.size for p in params])
    rng = make_rng(seed, "gradient_check")
    picks = rng.choice(offsets[-1], size=min(n_params, int(offsets[-1])), replace=False)

    worst = 0.0
    for flat_index in np.sort(picks):
        which = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        local = np.array([flat_index - offsets[which]])

        def loss_at(candidate, which=which):
            trial = list(params)
            trial[which] = candidate
            return float(loss_fn(forward(wide.with_parameters(trial), inputs))[0])

        error = finite_difference_error(loss_at, params[which], grads[which], h, local, atol)
        worst = max(worst, error)
    logger.debug("gradient check over %d parameters: max relative error %.3e", picks.size, worst)
    return worst
