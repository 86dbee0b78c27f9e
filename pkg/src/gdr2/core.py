"""Dense kernels with explicit precision control.

Matrices are numpy arrays, row-major, rows are tokens. Every kernel accepts
optional leading batch dimensions so that heads, chunks and sequences can be
processed together without Python loops.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import expit

L2_EPS = 1e-6
RMS_EPS = 1e-5

PRECISIONS = {"f32": np.float32, "f64": np.float64, "binary32": np.float32, "binary64": np.float64}


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class ContractError(ValueError):
    """An input violates an operation's precondition (range, structure)."""


def dtype_of(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ContractError(f"unknown precision {precision!r}") from None
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dt}")
    return dt


def make_rng(seed: int) -> np.random.Generator:
    # PCG64 streams are specified bit-for-bit, independent of platform.
    return np.random.Generator(np.random.PCG64(seed))


def matmul(a: np.ndarray, b: np.ndarray, accumulate=None, ordered: bool = False) -> np.ndarray:
    """Batched ``a @ b`` with accumulation in ``accumulate`` precision.

    The result is returned in the accumulate dtype. With ``ordered=True`` the
    sum over the contracted index runs in ascending order with one rounding per
    multiply and per add, which makes it bitwise equal to a naive triple loop.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape}")
    acc = np.result_type(a, b) if accumulate is None else dtype_of(accumulate)
    a = a.astype(acc, copy=False)
    b = b.astype(acc, copy=False)
    if not ordered:
        return a @ b
    out = np.zeros(np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1]), dtype=acc)
    for k in range(a.shape[-1]):
        out += a[..., :, k, None] * b[..., None, k, :]
    return out


def _row_substitution(t: np.ndarray, x: np.ndarray) -> np.ndarray:
    for r in range(1, t.shape[-1]):
        x[..., r, :] -= (t[..., r, None, :r] @ x[..., :r, :])[..., 0, :]
    return x


def forward_substitution_unitriangular(t: np.ndarray, rhs: np.ndarray, check: bool = True,
                                       block: int = 16) -> np.ndarray:
    """Solve ``(I + T) X = RHS`` for strictly lower triangular ``T``.

    Rows are eliminated in order: ``x_r = rhs_r - sum_{s<r} T[r, s] x_s``.
    For ``n > block`` the elimination is blocked: the unit-diagonal blocks are
    inverted together by row elimination, then each block row is finished
    with one matrix product against the rows already solved.
    """
    t = np.asarray(t)
    rhs = np.asarray(rhs)
    if t.ndim < 2 or t.shape[-1] != t.shape[-2]:
        raise DimensionError(f"T must be square, got {t.shape}")
    if rhs.shape[-2] != t.shape[-1]:
        raise DimensionError(f"T {t.shape} incompatible with rhs {rhs.shape}")
    if block < 1:
        raise ContractError("block must be >= 1")
    n = t.shape[-1]
    if check and np.any(np.triu(t) != 0):
        raise ContractError("T must be strictly lower triangular")
    dt = np.result_type(t, rhs)
    shape = np.broadcast_shapes(t.shape[:-2], rhs.shape[:-2]) + rhs.shape[-2:]
    x = np.array(np.broadcast_to(rhs, shape), dtype=dt, order="C")
    if n <= block:
        return _row_substitution(t, x)
    bounds = [(lo, min(lo + block, n)) for lo in range(0, n, block)]
    full = [lo for lo, hi in bounds if hi - lo == block]
    diag = np.stack([t[..., lo:lo + block, lo:lo + block] for lo in full], axis=-3)
    eye = np.broadcast_to(np.eye(block, dtype=dt), diag.shape)
    inv_full = _row_substitution(diag, np.array(eye, order="C"))
    inverses = {lo: inv_full[..., j, :, :] for j, lo in enumerate(full)}
    for lo, hi in bounds:
        if lo not in inverses:
            part = t[..., lo:hi, lo:hi]
            inverses[lo] = _row_substitution(part, np.array(np.broadcast_to(np.eye(hi - lo, dtype=dt), part.shape)))
    for lo, hi in bounds:
        r = x[..., lo:hi, :]
        if lo:
            r = r - t[..., lo:hi, :lo] @ x[..., :lo, :]
        x[..., lo:hi, :] = inverses[lo] @ r
    return x


def unitriangular_inverse(t: np.ndarray, check: bool = True) -> np.ndarray:
    """``(I + T)^{-1}`` by blocked forward substitution with doubling block size.

    With ``M = [[M11, 0], [M21, M22]]`` the inverse has diagonal blocks
    ``M11^{-1}``, ``M22^{-1}`` and the off-diagonal block
    ``-M22^{-1} M21 M11^{-1}``: the second block row eliminated against the
    first. Every diagonal block of one size is handled in a single batched
    product, so the work is ``log2(n)`` rounds instead of ``n`` row sweeps.
    """
    t = np.asarray(t)
    if t.ndim < 2 or t.shape[-1] != t.shape[-2]:
        raise DimensionError(f"T must be square, got {t.shape}")
    if check and np.any(np.triu(t) != 0):
        raise ContractError("T must be strictly lower triangular")
    n = t.shape[-1]
    lead = t.shape[:-2]
    m = 1 << max(n - 1, 0).bit_length()
    if m == n:
        tp = np.ascontiguousarray(t)
    else:
        # Zero padding keeps the leading n x n block of the inverse unchanged.
        tp = np.zeros(lead + (m, m), dtype=t.dtype)
        tp[..., :n, :n] = t
    x = np.zeros(lead + (m, m), dtype=t.dtype)
    _diag_blocks(x, 1)[..., 0, 0] = 1.0
    size = 1
    while size < m:
        xb = _diag_blocks(x, 2 * size)
        m21 = _diag_blocks(tp, 2 * size)[..., size:, :size]
        off = xb[..., size:, :size]
        np.matmul(xb[..., size:, size:], m21 @ xb[..., :size, :size], out=off)
        np.negative(off, out=off)
        size *= 2
    return x[..., :n, :n]


def _diag_blocks(a: np.ndarray, size: int) -> np.ndarray:
    """Writable view ``(..., m // size, size, size)`` of the diagonal blocks of
    a C-contiguous ``(..., m, m)`` array."""
    m = a.shape[-1]
    item = a.itemsize
    shape = a.shape[:-2] + (m // size, size, size)
    strides = a.strides[:-2] + (size * (m + 1) * item, m * item, item)
    return np.lib.stride_tricks.as_strided(a, shape, strides)


def l2_normalize_rows(m: np.ndarray, eps: float = L2_EPS) -> np.ndarray:
    if eps <= 0:
        raise ContractError("eps must be positive")
    norm = np.sqrt(np.sum(m * m, axis=-1, keepdims=True))
    return m / np.maximum(norm, eps)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    big = x > 20
    return np.where(big, x, np.log1p(np.exp(np.where(big, 0, x))))


def reciprocal(x: np.ndarray) -> np.ndarray:
    return 1.0 / x


_UNARY: dict[str, Callable] = {
    "exp": np.exp,
    "sigmoid": sigmoid,
    "silu": silu,
    "softplus": softplus,
    "reciprocal": reciprocal,
}
_BINARY: dict[str, Callable] = {"mul": np.multiply, "add": np.add, "sub": np.subtract}


def elementwise(op: str, a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    if op in _BINARY:
        if b is None or np.shape(a) != np.shape(b):
            raise DimensionError(f"{op}: shapes {np.shape(a)} and {np.shape(b)}")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](np.asarray(a))
    raise ContractError(f"unknown elementwise op {op!r}")


def cumsum_rows(m: np.ndarray, dtype=None) -> np.ndarray:
    """``out[r] = sum_{s <= r} m[s]`` along the row (token) axis.

    Same left-to-right rounding as ``np.cumsum``; written as a row loop
    because numpy's strided cumsum is slow when rows are short and many.
    """
    out = np.array(m, dtype=dtype, order="C")
    for r in range(1, out.shape[-2]):
        out[..., r, :] += out[..., r - 1, :]
    return out


def reverse_cumsum_rows(m: np.ndarray) -> np.ndarray:
    """``out[r] = sum_{s >= r} m[s]`` along the row (token) axis."""
    out = np.array(m, order="C")
    for r in range(out.shape[-2] - 2, -1, -1):
        out[..., r, :] += out[..., r + 1, :]
    return out


def rms_norm(v: np.ndarray, weight: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    if np.shape(weight)[-1] != np.shape(v)[-1]:
        raise DimensionError(f"rms_norm: {np.shape(v)} vs weight {np.shape(weight)}")
    if eps < 0:
        raise ContractError("eps must be non-negative")
    ms = np.mean(v * v, axis=-1, keepdims=True)
    if eps == 0:
        # Zero rows stay zero instead of producing 0/0.
        return np.where(ms > 0, v / np.sqrt(np.where(ms > 0, ms, 1.0)), 0.0) * weight
    return v / np.sqrt(ms + eps) * weight
