"""
Regularizers - variance of the per-environment heads in parameter space.

Each head is flattened to ``v_e = [vec(weights), bias]``.  The absolute
variance is ``(1/E) sum_e ||v_e - v_bar||_2^2``; the relative variance
rescales each term by the head's magnitude,
``(1/E) sum_e (||v_e - v_bar||_2 / ||v_e||_1)^2``.

Also provides the IRMv1 gradient penalty used as a baseline objective.
"""

from enum import Enum
from typing import Sequence, Tuple

import numpy as np
from scipy.special import expit

from unshuffle.model import (
    Batch,
    ForwardCache,
    ModelParams,
    backward,
    head_logits,
    to_targets,
)

L1_EPS = 1e-12


class VarianceMode(str, Enum):
    ABSOLUTE = "absolute"
    RELATIVE = "relative"


class RelDenominator(str, Enum):
    L1 = "l1"
    L2 = "l2"


def head_stack(params: ModelParams) -> np.ndarray:
    """``[E x d]`` matrix of flattened heads (weights row-major, then bias)."""
    return np.stack([head.flat() for head in params.heads])


def _as_stack(stack: Sequence[np.ndarray]) -> np.ndarray:
    array = np.asarray(stack, dtype=np.float64)
    if array.ndim != 2 or array.shape[0] == 0:
        raise ValueError("head stack must be a non-empty [E x d] array")
    if not np.all(np.isfinite(array)):
        raise ValueError("head stack has non-finite entries")
    return array


def _require_pair(stack: np.ndarray) -> None:
    if stack.shape[0] < 2:
        raise ValueError(f"variance needs at least 2 heads, got {stack.shape[0]}")


def mean_head(stack: Sequence[np.ndarray]) -> np.ndarray:
    return _as_stack(stack).mean(axis=0)


def variance_abs(stack: Sequence[np.ndarray]) -> float:
    v = _as_stack(stack)
    _require_pair(v)
    deviations = v - v.mean(axis=0)
    return float(np.mean(np.sum(deviations ** 2, axis=1)))


def _denominators(v: np.ndarray, rel_denominator: RelDenominator) -> np.ndarray:
    if RelDenominator(rel_denominator) is RelDenominator.L1:
        norms = np.sum(np.abs(v), axis=1)
    else:
        norms = np.sqrt(np.sum(v ** 2, axis=1))
    small = np.flatnonzero(norms <= L1_EPS)
    if small.size:
        raise ValueError(
            f"head {int(small[0])} has norm {norms[small[0]]:.3g} <= {L1_EPS}; "
            "relative variance is undefined"
        )
    return norms


def variance_rel(stack: Sequence[np.ndarray], rel_denominator: RelDenominator = RelDenominator.L1) -> float:
    v = _as_stack(stack)
    _require_pair(v)
    norms = _denominators(v, rel_denominator)
    sq_dev = np.sum((v - v.mean(axis=0)) ** 2, axis=1)
    return float(np.mean(sq_dev / norms ** 2))


def variance(
    stack: Sequence[np.ndarray],
    mode: VarianceMode,
    rel_denominator: RelDenominator = RelDenominator.L1,
) -> float:
    if VarianceMode(mode) is VarianceMode.ABSOLUTE:
        return variance_abs(stack)
    return variance_rel(stack, rel_denominator)


def grad_variance(
    stack: Sequence[np.ndarray],
    mode: VarianceMode,
    rel_denominator: RelDenominator = RelDenominator.L1,
) -> np.ndarray:
    """Analytic gradient ``[E x d]`` of the selected variance w.r.t. every head."""
    v = _as_stack(stack)
    _require_pair(v)
    n_envs = v.shape[0]
    deviations = v - v.mean(axis=0)

    if VarianceMode(mode) is VarianceMode.ABSOLUTE:
        # the v_bar terms cancel because the deviations sum to zero
        return (2.0 / n_envs) * deviations

    norms = _denominators(v, rel_denominator)
    inv_sq = 1.0 / norms ** 2
    sq_dev = np.sum(deviations ** 2, axis=1)
    weighted = deviations * inv_sq[:, None]
    grad = 2.0 * weighted - (2.0 / n_envs) * weighted.sum(axis=0)
    if RelDenominator(rel_denominator) is RelDenominator.L1:
        grad -= 2.0 * (sq_dev / norms ** 3)[:, None] * np.sign(v)
    else:
        grad -= 2.0 * (sq_dev / norms ** 4)[:, None] * v
    return grad / n_envs


# ---------------------------------------------------------------------------
# IRMv1 baseline
# ---------------------------------------------------------------------------

def _require_equal_heads(params: ModelParams) -> None:
    first = params.heads[0]
    for head in params.heads[1:]:
        if not (np.array_equal(head.weights, first.weights) and np.array_equal(head.bias, first.bias)):
            raise ValueError(
                f"IRMv1 penalty needs a single shared head; head {head.env_id} differs from head {first.env_id}"
            )


def _scale_gradient(params: ModelParams, batch: Batch) -> Tuple[float, np.ndarray, ForwardCache]:
    """``dL/ds`` at ``s = 1`` for ``L(sigmoid(s z), y)`` and ``d(dL/ds)/dz``."""
    cache = ForwardCache()
    logits = head_logits(params, 0, batch, cache)
    targets = to_targets(batch.labels, params.num_classes)
    probs = expit(logits)
    size = targets.size
    grad_s = float(np.sum((probs - targets) * logits) / size)
    dgrad_dlogits = (probs * (1.0 - probs) * logits + probs - targets) / size
    return grad_s, dgrad_dlogits, cache


def irmv1_penalty(params: ModelParams, batches: Sequence[Batch]) -> float:
    """Sum over environments of the squared gradient w.r.t. a unit scale on the head."""
    _require_equal_heads(params)
    return float(sum(_scale_gradient(params, batch)[0] ** 2 for batch in batches))


def grad_irmv1(params: ModelParams, batches: Sequence[Batch]) -> Tuple[float, ModelParams]:
    """Penalty value and its gradient w.r.t. the extractor and head 0."""
    _require_equal_heads(params)
    total = 0.0
    grads = params.zeros_like()
    for batch in batches:
        grad_s, dgrad_dlogits, cache = _scale_gradient(params, batch)
        total += grad_s ** 2
        accumulate(grads, backward(params, 0, cache, 2.0 * grad_s * dgrad_dlogits))
    return total, grads


def accumulate(target: ModelParams, update: ModelParams, scale: float = 1.0) -> ModelParams:
    """In-place ``target += scale * update`` over every trainable tensor."""
    for (_, dst), (_, src) in zip(target.tensors(), update.tensors()):
        dst += scale * src
    return target


def set_head_gradients(grads: ModelParams, head_grads: np.ndarray, scale: float = 1.0) -> None:
    """Add ``scale * head_grads`` (``[E x d]``) onto the head tensors of ``grads``."""
    for head, vector in zip(grads.heads, head_grads):
        n_weights = head.weights.size
        head.weights += scale * vector[:n_weights].reshape(head.weights.shape)
        head.bias += scale * vector[n_weights:]
