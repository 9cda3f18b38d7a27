"""Dense math core: similarity matmul, row softmax, KL, row normalization,
and bfloat16 storage conversion.

Conventions baked in here and relied on everywhere else:

* all accumulation is float64; bfloat16 appears only at the storage boundary;
* temperatures are expressed as multiplicative logit scales (softmax of
  ``scale * logits``), the reciprocal of the divide-by-tau convention;
* ``kl_rows`` averages the per-row divergences, so callers that average over
  K contributions only need an extra 1/(2K).
"""

from __future__ import annotations

import numpy as np

from .validation import as_float_matrix, check_positive, check_row_stochastic

BF16_MAX = 3.3895313892515355e38  # largest finite bfloat16 value


def matmul_nt(a, b) -> np.ndarray:
    """Product a @ b.T for row-major operands sharing the inner dimension."""
    a = as_float_matrix(a, "a")
    b = as_float_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"matmul_nt: inner dimensions differ, a is {a.shape[0]}x{a.shape[1]}, "
            f"b is {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b.T


def l2_normalize_rows(m) -> np.ndarray:
    """Scale every row to unit Euclidean norm."""
    m = as_float_matrix(m, "m")
    norms = np.linalg.norm(m, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise ValueError(f"l2_normalize_rows: row {zero[0]} is all-zero")
    return m / norms[:, None]


def l2_normalize_rows_vjp(x, grad_out) -> np.ndarray:
    """Pull a gradient w.r.t. normalized rows back to the raw rows.

    For z = x/|x| and upstream g: dL/dx = (g - (g.z) z) / |x|.
    """
    x = as_float_matrix(x, "x")
    g = as_float_matrix(grad_out, "grad_out")
    if x.shape != g.shape:
        raise ValueError(f"l2_normalize_rows_vjp: shapes differ {x.shape} vs {g.shape}")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0.0).any():
        raise ValueError("l2_normalize_rows_vjp: zero row")
    z = x / norms
    return (g - (g * z).sum(axis=1, keepdims=True) * z) / norms


def softmax_rows(logits, scale) -> np.ndarray:
    """Row-wise softmax of ``scale * logits`` (scale is the logit scale)."""
    logits = as_float_matrix(logits, "logits")
    scale = check_positive(scale, "scale")
    z = scale * logits
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def kl_rows(p, q) -> float:
    """Mean over rows of KL(p_row || q_row), with 0*log(0) treated as 0."""
    p = as_float_matrix(p, "p")
    q = as_float_matrix(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"kl_rows: shapes differ {p.shape} vs {q.shape}")
    check_row_stochastic(p, "p")
    check_row_stochastic(q, "q")
    support = p > 0.0
    if (support & (q == 0.0)).any():
        raise ValueError("kl_rows: absolute-continuity violated (q=0 where p>0)")
    terms = np.zeros_like(p)
    np.log(p, out=terms, where=support)
    logq = np.zeros_like(q)
    np.log(q, out=logq, where=support)
    per_row = (np.where(support, p * (terms - logq), 0.0)).sum(axis=1)
    return float(per_row.mean())


def bf16_encode(x) -> np.ndarray:
    """Quantize finite floats to bfloat16 bit patterns (round-to-nearest-even).

    The 16 stored bits are the top half of the IEEE-754 float32 pattern.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("bf16_encode: input must be finite")
    f32 = arr.astype(np.float32)
    if not np.isfinite(f32).all():
        raise ValueError("bf16_encode: value overflows float32 range")
    u = np.ascontiguousarray(f32).view(np.uint32)
    rounded = (u + np.uint32(0x7FFF) + ((u >> np.uint32(16)) & np.uint32(1))) >> np.uint32(16)
    bits = rounded.astype(np.uint16).reshape(arr.shape)
    exp_all_ones = (bits & np.uint16(0x7F80)) == np.uint16(0x7F80)
    if exp_all_ones.any():
        raise ValueError("bf16_encode: value overflows bfloat16 range after rounding")
    return bits


def bf16_decode(bits) -> np.ndarray:
    """Expand bfloat16 bit patterns back to float32."""
    arr = np.asarray(bits, dtype=np.uint16)
    u32 = arr.astype(np.uint32) << np.uint32(16)
    return np.ascontiguousarray(u32).view(np.float32).reshape(arr.shape)


def bf16_round_trip(x) -> np.ndarray:
    """Encode to bfloat16 and decode back; float32 result."""
    return bf16_decode(bf16_encode(x))
