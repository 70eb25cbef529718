"""Dense numeric kernels the rest of the engine composes.

All kernels are pure functions of their inputs and deterministic for a fixed
process configuration.  ``matmul`` reports its work to the ambient cost
session (see :mod:`gemfilter.counting`); nothing else is counted, by
convention.  Ties in ``topk_indices`` and ``argmax`` always break toward the
lower index so every downstream selection is reproducible.
"""

from __future__ import annotations

import numpy as np

from .counting import count_matmul
from .errors import ContractViolation


def matmul(a: np.ndarray, b: np.ndarray, tag: str = "other") -> np.ndarray:
    """Matrix product of two 2-D arrays.

    Charges ``2 * M * K * N`` FLOPs to the active cost session under ``tag``
    (one multiply-add = 2 FLOPs).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    count_matmul(tag, a.shape[0], a.shape[1], b.shape[1])
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability.

    Each output row sums to 1 within 1e-6 for finite inputs of any magnitude.
    """
    m = np.asarray(m)
    squeeze = m.ndim == 1
    if squeeze:
        m = m[None, :]
    if m.ndim != 2:
        raise ContractViolation(f"softmax_rows expects a vector or matrix, got {m.ndim}-D")
    if m.shape[1] == 0:
        raise ContractViolation("softmax_rows requires at least one column")
    shifted = m - np.max(m, axis=1, keepdims=True)
    out = np.exp(shifted)
    out /= np.sum(out, axis=1, keepdims=True)
    return out[0] if squeeze else out


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    """Root-mean-square normalization: ``x * gain / sqrt(mean(x^2) + eps)``."""
    x = np.asarray(x)
    gain = np.asarray(gain)
    if x.ndim != 1 or gain.ndim != 1:
        raise ContractViolation("rms_norm operates on vectors")
    if x.shape[0] != gain.shape[0]:
        raise ContractViolation(f"rms_norm length mismatch: {x.shape[0]} vs {gain.shape[0]}")
    if eps < 0:
        raise ContractViolation("rms_norm eps must be non-negative")
    scale = 1.0 / np.sqrt(np.mean(np.square(x, dtype=x.dtype)) + x.dtype.type(eps))
    return x * gain * x.dtype.type(scale)


def rms_norm_rows(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    """Row-wise :func:`rms_norm` over a matrix; each row normalized independently."""
    x = np.asarray(x)
    gain = np.asarray(gain)
    if x.ndim != 2 or gain.ndim != 1 or x.shape[1] != gain.shape[0]:
        raise ContractViolation("rms_norm_rows expects (n, d) inputs and a length-d gain")
    mean_sq = np.mean(np.square(x), axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(mean_sq + x.dtype.type(eps))
    return x * inv * gain


def avg_pool_1d(v: np.ndarray, kernel: int) -> np.ndarray:
    """Length-preserving 1-D average pooling with zero padding.

    ``out[i]`` is the mean of the window ``[i - kernel//2, i + kernel//2]``
    where positions outside the vector contribute zeros and still count in
    the denominator.  Only odd kernels preserve length, so even kernels are
    rejected.
    """
    v = np.asarray(v)
    if v.ndim != 1 or v.size == 0:
        raise ContractViolation("avg_pool_1d expects a non-empty vector")
    if kernel < 1 or kernel % 2 == 0:
        raise ContractViolation(f"avg_pool_1d kernel must be odd and >= 1, got {kernel}")
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(np.float64)
    if kernel == 1:
        return v.copy()
    half = kernel // 2
    padded = np.zeros(v.size + 2 * half, dtype=v.dtype)
    padded[half : half + v.size] = v
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel)
    return windows.sum(axis=1) / v.dtype.type(kernel)


def max_pool_1d(v: np.ndarray, kernel: int) -> np.ndarray:
    """Length-preserving 1-D max pooling (windows clipped at the edges).

    The alternate smoothing mode for selection scores; padding positions are
    ignored rather than contributing zeros.
    """
    v = np.asarray(v)
    if v.ndim != 1 or v.size == 0:
        raise ContractViolation("max_pool_1d expects a non-empty vector")
    if kernel < 1 or kernel % 2 == 0:
        raise ContractViolation(f"max_pool_1d kernel must be odd and >= 1, got {kernel}")
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(np.float64)
    if kernel == 1:
        return v.copy()
    half = kernel // 2
    padded = np.full(v.size + 2 * half, -np.inf, dtype=v.dtype)
    padded[half : half + v.size] = v
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel)
    return windows.max(axis=1)


def pool_1d(v: np.ndarray, kernel: int, mode: str = "avg") -> np.ndarray:
    """Dispatch between the two score-smoothing modes."""
    if mode == "avg":
        return avg_pool_1d(v, kernel)
    if mode == "max":
        return max_pool_1d(v, kernel)
    raise ContractViolation(f"unknown pooling mode {mode!r}; expected 'avg' or 'max'")


def topk_indices(v: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest values, in descending-score order.

    Ties break toward the lower index.  Invariant under any strictly
    increasing transform of ``v``.
    """
    v = np.asarray(v)
    if v.ndim != 1 or v.size == 0:
        raise ContractViolation("topk_indices expects a non-empty vector")
    if not 1 <= k <= v.size:
        raise ContractViolation(f"topk k={k} out of range for length {v.size}")
    order = np.argsort(-v, kind="stable")
    return order[:k].astype(np.int64)


def argmax(v: np.ndarray) -> int:
    """Index of the maximum value; lowest index wins ties."""
    v = np.asarray(v)
    if v.ndim != 1 or v.size == 0:
        raise ContractViolation("argmax expects a non-empty vector")
    return int(np.argmax(v))
