"""
Model - shared feature extractor plus per-environment linear heads.

The predictor for environment ``e`` is ``sigmoid(w_e f_theta(x))``: a small
feed-forward extractor ``f_theta`` followed by a linear head and an
elementwise logistic, trained with per-class binary cross-entropy.
Gradients are computed analytically by backpropagation.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

PROB_CLAMP = 1e-7
PARAMS_VERSION = 1
ACTIVATIONS = ("relu", "tanh", "identity")

MERGED = "merged"
HeadSelector = Union[int, str]


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass
class FeatureExtractorParams:
    """Weights ``(W[out x in], b[out])`` of each extractor layer."""

    layers: List[Tuple[np.ndarray, np.ndarray]]
    activation: str
    input_dim: int
    hidden_dims: List[int]
    feature_dim: int

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}")
        dims = [self.input_dim, *self.hidden_dims, self.feature_dim]
        if len(self.layers) != len(dims) - 1:
            raise ValueError(f"expected {len(dims) - 1} layers, got {len(self.layers)}")
        for i, (weight, bias) in enumerate(self.layers):
            if weight.shape != (dims[i + 1], dims[i]) or bias.shape != (dims[i + 1],):
                raise ValueError(
                    f"layer {i} has shapes {weight.shape}/{bias.shape}, "
                    f"expected {(dims[i + 1], dims[i])}/{(dims[i + 1],)}"
                )
            if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
                raise ValueError(f"layer {i} has non-finite entries")


@dataclass
class HeadParams:
    """Linear classifier ``weights[C x F]``, ``bias[C]`` for one environment."""

    weights: np.ndarray
    bias: np.ndarray
    env_id: int = 0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.weights.shape  # type: ignore[return-value]

    def flat(self) -> np.ndarray:
        """Weights (row-major) followed by bias."""
        return np.concatenate([self.weights.ravel(), self.bias])

    @classmethod
    def from_flat(cls, vector: np.ndarray, shape: Tuple[int, int], env_id: int) -> "HeadParams":
        n_weights = shape[0] * shape[1]
        return cls(
            weights=np.array(vector[:n_weights], dtype=np.float64).reshape(shape),
            bias=np.array(vector[n_weights:], dtype=np.float64),
            env_id=env_id,
        )


@dataclass
class ModelParams:
    extractor: FeatureExtractorParams
    heads: List[HeadParams]
    merged: Optional[HeadParams] = None

    def __post_init__(self) -> None:
        if not self.heads:
            raise ValueError("at least one head is required")
        expected = (self.heads[0].weights.shape, self.heads[0].bias.shape)
        for head in self.heads + ([self.merged] if self.merged is not None else []):
            if (head.weights.shape, head.bias.shape) != expected:
                raise ValueError("all heads must share one shape")
        if expected[0][1] != self.extractor.feature_dim:
            raise ValueError("head input dimension must equal the extractor feature_dim")

    @property
    def num_envs(self) -> int:
        return len(self.heads)

    @property
    def num_classes(self) -> int:
        return self.heads[0].weights.shape[0]

    def tensors(self) -> List[Tuple[str, np.ndarray]]:
        """Trainable tensors in a fixed order: extractor layers, then heads."""
        named: List[Tuple[str, np.ndarray]] = []
        for i, (weight, bias) in enumerate(self.extractor.layers):
            named.append((f"extractor.{i}.weight", weight))
            named.append((f"extractor.{i}.bias", bias))
        for head in self.heads:
            named.append((f"head.{head.env_id}.weight", head.weights))
            named.append((f"head.{head.env_id}.bias", head.bias))
        return named

    def copy(self) -> "ModelParams":
        return params_from_dict(params_to_dict(self))

    def zeros_like(self) -> "ModelParams":
        extractor = FeatureExtractorParams(
            layers=[(np.zeros_like(w), np.zeros_like(b)) for w, b in self.extractor.layers],
            activation=self.extractor.activation,
            input_dim=self.extractor.input_dim,
            hidden_dims=list(self.extractor.hidden_dims),
            feature_dim=self.extractor.feature_dim,
        )
        heads = [
            HeadParams(np.zeros_like(h.weights), np.zeros_like(h.bias), h.env_id) for h in self.heads
        ]
        return ModelParams(extractor=extractor, heads=heads)

    def head(self, selector: HeadSelector) -> HeadParams:
        if selector == MERGED:
            if self.merged is None:
                raise ValueError("merged head requested before merge_heads was called")
            return self.merged
        if isinstance(selector, str) or not 0 <= int(selector) < self.num_envs:
            raise ValueError(f"invalid head selector {selector!r} for {self.num_envs} environment(s)")
        return self.heads[int(selector)]


@dataclass
class Batch:
    """Features ``[n x input_dim]`` and class indices ``int[n]`` or multi-hot ``[n x C]``."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty 2-D array")
        if len(self.labels) != self.features.shape[0]:
            raise ValueError(
                f"{len(self.labels)} labels for {self.features.shape[0]} feature rows"
            )

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class ForwardCache:
    """Intermediate values of a forward pass, kept for backpropagation."""

    activations: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)
    logits: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_params(
    input_dim: int,
    hidden_dims: Sequence[int],
    feature_dim: int,
    num_classes: int,
    num_envs: int,
    seed: int,
    activation: str = "relu",
) -> ModelParams:
    """Randomly initialize a model with ``num_envs`` identical heads.

    Weights are uniform in ``[-a, a]`` with ``a = sqrt(6 / (fan_in + fan_out))``
    and biases are zero.  Every head is a copy of the same draw, so the
    initial variance of the heads is exactly zero.
    """
    dims = {"input_dim": input_dim, "feature_dim": feature_dim, "num_classes": num_classes}
    for name, value in dims.items():
        if int(value) < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    for i, value in enumerate(hidden_dims):
        if int(value) < 1:
            raise ValueError(f"hidden_dims[{i}] must be >= 1, got {value}")
    if int(num_envs) < 1:
        raise ValueError(f"number of environments must be >= 1, got {num_envs}")

    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden_dims, feature_dim]
    layers = [
        (_glorot_uniform(rng, sizes[i + 1], sizes[i]), np.zeros(sizes[i + 1]))
        for i in range(len(sizes) - 1)
    ]
    extractor = FeatureExtractorParams(
        layers=layers,
        activation=activation,
        input_dim=input_dim,
        hidden_dims=list(hidden_dims),
        feature_dim=feature_dim,
    )
    head_weights = _glorot_uniform(rng, num_classes, feature_dim)
    heads = [
        HeadParams(head_weights.copy(), np.zeros(num_classes), env_id=e) for e in range(num_envs)
    ]
    return ModelParams(extractor=extractor, heads=heads)


# ---------------------------------------------------------------------------
# Forward pass and loss
# ---------------------------------------------------------------------------

def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    if activation == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


def _as_features(x: Union[Batch, np.ndarray]) -> np.ndarray:
    return x.features if isinstance(x, Batch) else np.asarray(x, dtype=np.float64)


def extract_features(
    params: ModelParams, x: Union[Batch, np.ndarray], cache: Optional[ForwardCache] = None
) -> np.ndarray:
    features = _as_features(x)
    if features.ndim != 2 or features.shape[1] != params.extractor.input_dim:
        raise ValueError(
            f"input has shape {features.shape}, expected (n, {params.extractor.input_dim})"
        )
    a = features
    if cache is not None:
        cache.activations.append(a)
    for weight, bias in params.extractor.layers:
        z = a @ weight.T + bias
        a = _activate(z, params.extractor.activation)
        if cache is not None:
            cache.pre_activations.append(z)
            cache.activations.append(a)
    return a


def head_logits(
    params: ModelParams,
    selector: HeadSelector,
    x: Union[Batch, np.ndarray],
    cache: Optional[ForwardCache] = None,
) -> np.ndarray:
    head = params.head(selector)
    logits = extract_features(params, x, cache) @ head.weights.T + head.bias
    if cache is not None:
        cache.logits = logits
    return logits


def forward(params: ModelParams, head_selector: HeadSelector, x: Union[Batch, np.ndarray]) -> np.ndarray:
    """Per-class probabilities ``[n x C]``, clamped to ``[1e-7, 1 - 1e-7]``."""
    return np.clip(expit(head_logits(params, head_selector, x)), PROB_CLAMP, 1.0 - PROB_CLAMP)


predict = forward


def to_targets(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Multi-hot targets ``[n x C]``; class indices are one-hot encoded."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        if np.any(labels < 0) or np.any(labels >= num_classes):
            raise ValueError(f"class index out of range [0, {num_classes})")
        targets = np.zeros((labels.shape[0], num_classes))
        targets[np.arange(labels.shape[0]), labels.astype(np.int64)] = 1.0
        return targets
    if labels.ndim != 2 or labels.shape[1] != num_classes:
        raise ValueError(f"multi-hot labels must have shape (n, {num_classes}), got {labels.shape}")
    return labels.astype(np.float64)


def loss_bce(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean over examples and classes of the binary cross-entropy."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError("probs must be a 2-D array")
    targets = to_targets(labels, probs.shape[1])
    if targets.shape != probs.shape:
        raise ValueError(f"labels shape {targets.shape} does not match probs shape {probs.shape}")
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(targets * np.log(p) + (1.0 - targets) * np.log(1.0 - p)))


# ---------------------------------------------------------------------------
# Backpropagation
# ---------------------------------------------------------------------------

def backward(
    params: ModelParams, env: int, cache: ForwardCache, grad_logits: np.ndarray
) -> ModelParams:
    """Propagate ``dL/dlogits`` through head ``env`` and the extractor.

    Returns a gradient container shaped like ``params`` whose other heads are
    zero.
    """
    grads = params.zeros_like()
    head = params.heads[env]
    features = cache.activations[-1]
    grads.heads[env].weights[...] = grad_logits.T @ features
    grads.heads[env].bias[...] = grad_logits.sum(axis=0)

    upstream = grad_logits @ head.weights
    activation = params.extractor.activation
    for i in range(len(params.extractor.layers) - 1, -1, -1):
        weight, _ = params.extractor.layers[i]
        delta = upstream * _activate_grad(cache.pre_activations[i], activation)
        grad_w, grad_b = grads.extractor.layers[i]
        grad_w[...] = delta.T @ cache.activations[i]
        grad_b[...] = delta.sum(axis=0)
        upstream = delta @ weight
    return grads


def loss_and_grad(params: ModelParams, env: int, batch: Batch) -> Tuple[float, ModelParams]:
    params.head(env)
    cache = ForwardCache()
    logits = head_logits(params, env, batch, cache)
    targets = to_targets(batch.labels, params.num_classes)
    probs = expit(logits)
    loss = loss_bce(probs, targets)
    grad_logits = (probs - targets) / targets.size
    return loss, backward(params, env, cache, grad_logits)


def grad_model(params: ModelParams, env: int, batch: Batch) -> ModelParams:
    """Exact gradient of ``loss_bce(forward(params, env, x), y)``."""
    return loss_and_grad(params, env, batch)[1]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _head_to_dict(head: HeadParams) -> Dict[str, Any]:
    return {"env_id": head.env_id, "weights": head.weights.tolist(), "bias": head.bias.tolist()}


def _head_from_dict(data: Dict[str, Any]) -> HeadParams:
    return HeadParams(
        weights=np.asarray(data["weights"], dtype=np.float64),
        bias=np.asarray(data["bias"], dtype=np.float64),
        env_id=int(data["env_id"]),
    )


def params_to_dict(params: ModelParams) -> Dict[str, Any]:
    ext = params.extractor
    return {
        "version": PARAMS_VERSION,
        "extractor": {
            "activation": ext.activation,
            "input_dim": ext.input_dim,
            "hidden_dims": list(ext.hidden_dims),
            "feature_dim": ext.feature_dim,
            "layers": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in ext.layers],
        },
        "heads": [_head_to_dict(h) for h in params.heads],
        "merged": _head_to_dict(params.merged) if params.merged is not None else None,
    }


def params_from_dict(data: Dict[str, Any]) -> ModelParams:
    if data.get("version") != PARAMS_VERSION:
        raise ValueError(f"unsupported model version {data.get('version')!r}")
    ext = data["extractor"]
    extractor = FeatureExtractorParams(
        layers=[
            (
                np.asarray(layer["weight"], dtype=np.float64).reshape(len(layer["bias"]), -1),
                np.asarray(layer["bias"], dtype=np.float64),
            )
            for layer in ext["layers"]
        ],
        activation=ext["activation"],
        input_dim=int(ext["input_dim"]),
        hidden_dims=[int(d) for d in ext["hidden_dims"]],
        feature_dim=int(ext["feature_dim"]),
    )
    merged = data.get("merged")
    return ModelParams(
        extractor=extractor,
        heads=[_head_from_dict(h) for h in data["heads"]],
        merged=_head_from_dict(merged) if merged is not None else None,
    )


def save_params(params: ModelParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(params_to_dict(params), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_params(path: Union[str, Path]) -> ModelParams:
    with Path(path).open(encoding="utf-8") as f:
        return params_from_dict(json.load(f))
