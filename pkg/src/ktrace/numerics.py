"""Dense float tensor primitives the model is built on.

Conventions:

* ``Vector`` is a 1-D ``numpy.ndarray``, ``Matrix`` a 2-D C-contiguous one,
  ``Mask`` a 1-D boolean array. Most operations also accept a leading batch
  dimension and broadcast over it.
* Training and inference default to float32; gradient verification runs in
  float64 because central differences lose too many digits in float32.
* All operations are pure: inputs are never mutated, outputs are fresh
  arrays, and nothing here holds state.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import DivergenceError, MaskError, ShapeError

DTYPE_TRAIN = np.float32
DTYPE_CHECK = np.float64

Vector = np.ndarray
Matrix = np.ndarray
Mask = np.ndarray


def affine(x: Vector, w: Matrix, b: Vector) -> Vector:
    """x @ w + b for a vector or a batch of row vectors."""
    if w.ndim != 2:
        raise ShapeError(f"weight must be 2-D, got {w.ndim}-D")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"input dim {x.shape[-1]} does not match weight rows {w.shape[0]}"
        )
    if b.shape != (w.shape[1],):
        raise ShapeError(
            f"bias dim {b.shape} does not match weight cols {w.shape[1]}"
        )
    return x @ w + b


def elementwise_mul(a: Vector, b: Vector) -> Vector:
    """Component-wise product; operands must have identical shape."""
    if a.shape != b.shape:
        raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")
    return a * b


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, overflow-safe on both tails (never NaN).

    Computed as (1 + tanh(x/2)) / 2, which saturates cleanly instead of
    overflowing exp."""
    x = np.asarray(x)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


_ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def activate(x: np.ndarray, kind: str) -> np.ndarray:
    """Apply a named activation; ``kind`` is "sigmoid" or "tanh"."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def masked_softmax(scores: Vector, mask: Mask) -> Vector:
    """Exp-normalize ``scores`` over positions where ``mask`` is true.

    Works on 1-D inputs or on (batch, length) inputs with a matching mask.
    Invalid positions come out exactly 0. Stabilized by subtracting the
    per-row max over valid positions, so huge scores cannot overflow.
    """
    scores = np.asarray(scores)
    mask = np.asarray(mask, dtype=bool)
    if scores.shape != mask.shape:
        raise ShapeError(
            f"scores shape {scores.shape} does not match mask {mask.shape}"
        )
    valid_counts = mask.sum(axis=-1)
    if np.any(valid_counts == 0):
        raise MaskError("softmax mask has no valid positions")
    neg_inf = np.finfo(scores.dtype if scores.dtype.kind == "f" else np.float64).min
    shifted = np.where(mask, scores, neg_inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    exps = np.exp(shifted) * mask
    return exps / exps.sum(axis=-1, keepdims=True)


def finite_diff_check(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray] | np.ndarray,
    analytic_grads: Mapping[str, np.ndarray] | np.ndarray,
    epsilon: float = 1e-5,
    max_coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``f`` maps named tensors to a scalar. Every coordinate (or a random
    subset of ``max_coords_per_tensor`` per tensor, for large tensors) is
    perturbed by +/- ``epsilon`` and the relative error

        |fd - analytic| / max(|fd|, |analytic|, 1e-8)

    is computed; the max over all checked coordinates is returned.
    Run this in float64: float32 cancellation drowns the signal.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if isinstance(params, np.ndarray):
        params = {"param": params}
        analytic_grads = {"param": np.asarray(analytic_grads)}

    work = {name: np.array(t, dtype=np.float64) for name, t in params.items()}

    def evaluate() -> float:
        value = float(f(work))
        if not np.isfinite(value):
            raise DivergenceError("objective evaluated to a non-finite value")
        return value

    worst = 0.0
    for name, tensor in work.items():
        grad = np.asarray(analytic_grads[name], dtype=np.float64)
        if grad.shape != tensor.shape:
            raise ShapeError(
                f"gradient for {name!r} has shape {grad.shape}, "
                f"expected {tensor.shape}"
            )
        coords = np.arange(tensor.size)
        if max_coords_per_tensor is not None and tensor.size > max_coords_per_tensor:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(tensor.size, size=max_coords_per_tensor, replace=False)
        flat = tensor.reshape(-1)
        grad_flat = grad.reshape(-1)
        for idx in coords:
            original = flat[idx]
            flat[idx] = original + epsilon
            f_plus = evaluate()
            flat[idx] = original - epsilon
            f_minus = evaluate()
            flat[idx] = original
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            denom = max(abs(fd), abs(grad_flat[idx]), 1e-8)
            worst = max(worst, abs(fd - grad_flat[idx]) / denom)
    return worst


def require_finite(name: str, tensor: np.ndarray) -> None:
    """Raise if ``tensor`` contains NaN or infinity."""
    if not np.all(np.isfinite(tensor)):
        raise DivergenceError(f"non-finite values in {name}")
