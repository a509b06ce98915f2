"""Integer matmul kernels over packed ternary weights, plus the float reference path.

The ternary inner loop decodes four 2-bit fields per byte and adds or
subtracts int8 activations into int32 accumulators; there is no general
multiply on that path (code +1 adds, -1 subtracts, 0 skips). The float
reference accumulates in float64 with a fixed left-to-right k-order, so both
kernels are bit-deterministic regardless of how many threads numba uses:
every output cell is owned by exactly one parallel task.

Inner dimensions must stay below 2**24 so that |acc| <= 127 * k fits in an
int32 accumulator.
"""

from __future__ import annotations

import time

import numpy as np
from numba import njit, prange

from .errors import DimensionError, ValidationError
from .quantizer import (
    QuantizedActivations,
    QuantizerParams,
    dequantize_output,
    quantize_activations,
)
from .ternary_format import TernaryTensor, pack, packed_row_bytes

MAX_INNER_DIM = 1 << 24


@njit(cache=True, parallel=True)
def _ternary_matmul_kernel(packed, xt, out):  # pragma: no cover - compiled
    # packed: (out_rows, row_bytes) u8; xt: (in, tokens) i8; out: (tokens, out_rows) i32
    # Each 2-bit field is decoded once per output row; the hot loop adds or
    # subtracts a contiguous int8 token vector into int32 accumulators, so
    # there is no multiply anywhere on this path. One task owns one output
    # row, which keeps results bit-identical under any thread partitioning.
    out_rows = packed.shape[0]
    row_bytes = packed.shape[1]
    tokens = xt.shape[1]
    for o in prange(out_rows):
        acc = np.zeros(tokens, dtype=np.int32)
        for bi in range(row_bytes):
            b = packed[o, bi]
            if b == 0:
                continue
            base = bi * 4
            for k in range(4):
                f = (b >> (2 * k)) & 3
                if f == 1:
                    j = base + k
                    for t in range(tokens):
                        acc[t] += xt[j, t]
                elif f == 2:
                    j = base + k
                    for t in range(tokens):
                        acc[t] -= xt[j, t]
        for t in range(tokens):
            out[t, o] = acc[t]


@njit(cache=True, parallel=True)
def _linear_f64_kernel(x, w, out):  # pragma: no cover - compiled
    # x: (tokens, k) f64; w: (out_rows, k) f64; out: (tokens, out_rows) f64
    out_rows = w.shape[0]
    tokens = x.shape[0]
    k = x.shape[1]
    for o in prange(out_rows):
        for t in range(tokens):
            acc = 0.0
            for i in range(k):
                acc += x[t, i] * w[o, i]
            out[t, o] = acc


def ternary_matmul(w: TernaryTensor, x) -> np.ndarray:
    """Exact integer product of packed ternary weights with int8 activation codes.

    w is (out_features x in_features) packed; x is (tokens x in_features)
    int8 codes (a QuantizedActivations works too). Returns int32 accumulators
    of shape (tokens, out_features), equal to the dense integer matmul over
    the unpacked codes.
    """
    if isinstance(x, QuantizedActivations):
        x = x.codes
    codes = np.asarray(x)
    if not np.issubdtype(codes.dtype, np.integer):
        raise ValidationError(f"activation codes must be integers, got dtype {codes.dtype}")
    if codes.ndim != 2:
        raise DimensionError(f"activation codes must be 2-d, got shape {codes.shape}")
    if codes.shape[1] != w.cols:
        raise DimensionError(
            f"inner dimensions differ: weights are {w.rows}x{w.cols}, "
            f"activations are {codes.shape[0]}x{codes.shape[1]}"
        )
    if w.cols >= MAX_INNER_DIM:
        raise ValidationError(
            f"inner dimension {w.cols} exceeds the int32 accumulator bound 2**24"
        )
    if codes.dtype != np.int8:
        if np.abs(codes).max(initial=0) > 127:
            raise ValidationError("activation codes must lie in [-127, 127]")
        codes = codes.astype(np.int8)
    xt = np.ascontiguousarray(codes.T)
    out = np.empty((codes.shape[0], w.rows), dtype=np.int32)
    _ternary_matmul_kernel(w.packed_view(), xt, out)
    return out


def dense_matmul_f32(a, b) -> np.ndarray:
    """Reference float matmul: float64 accumulation, fixed left-to-right k-order."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"operands must be 2-d, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    bt = np.ascontiguousarray(b.T)
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    _linear_f64_kernel(np.ascontiguousarray(a), bt, out)
    return out


def dense_linear(x, w) -> np.ndarray:
    """x @ w.T with float64 accumulation and fixed k-order (w is out x in)."""
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    w = np.ascontiguousarray(np.asarray(w, dtype=np.float64))
    if x.ndim != 2 or w.ndim != 2:
        raise DimensionError(f"operands must be 2-d, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"inner dimensions differ: {x.shape} x {w.shape} (transposed)")
    out = np.empty((x.shape[0], w.shape[0]), dtype=np.float64)
    _linear_f64_kernel(x, w, out)
    return out


def bitlinear_forward(w: TernaryTensor, x, params: QuantizerParams | None = None) -> np.ndarray:
    """Quantized linear layer: quantize activations, integer matmul, rescale.

    out[t, o] = gamma * beta_t / q_b * sum_j code_oj * acode_tj; no bias.
    """
    if params is None:
        params = QuantizerParams()
    qa = quantize_activations(x, params)
    acc = ternary_matmul(w, qa.codes)
    return dequantize_output(acc, w.gamma, qa.betas, params.q_b)


def warm_up() -> None:
    """Trigger JIT compilation of both kernels on tiny inputs."""
    t = pack(np.array([[1, -1, 0, 1]], dtype=np.int8), gamma=1.0)
    ternary_matmul(t, np.zeros((1, 4), dtype=np.int8))
    dense_matmul_f32(np.zeros((1, 4)), np.zeros((4, 1)))


def kernel_bench(
    in_features: int,
    out_features: int,
    tokens: int,
    reps: int = 5,
    seed: int = 0,
) -> dict:
    """Micro-benchmark of the packed integer kernel against the float reference.

    Identical logical shapes on both paths; the report carries median
    wall-clock times, element throughputs, and exact byte accounting for the
    weights: the packed 2-bit payload, the 16-bit-per-weight storage baseline
    the memory claims are stated against, and the float32 bytes the reference
    kernel actually reads.
    """
    if min(in_features, out_features, tokens) < 1:
        raise DimensionError("bench dims must be positive")
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    rng = np.random.default_rng(seed)
    codes = rng.integers(-1, 2, size=(out_features, in_features)).astype(np.int8)
    w = pack(codes, gamma=1.0)
    w_f32 = codes.astype(np.float64)
    x_int = rng.integers(-127, 128, size=(tokens, in_features)).astype(np.int8)
    x_f32 = x_int.astype(np.float64)

    warm_up()
    ternary_matmul(w, x_int)
    dense_linear(x_f32, w_f32)

    def med(fn) -> float:
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return float(np.median(times))

    t_ternary = med(lambda: ternary_matmul(w, x_int))
    t_f32 = med(lambda: dense_linear(x_f32, w_f32))
    elements = tokens * out_features * in_features
    return {
        "shape": {"m": tokens, "k": in_features, "n": out_features},
        "reps": reps,
        "elements": elements,
        "ternary_median_s": t_ternary,
        "f32_median_s": t_f32,
        "ternary_elements_per_s": elements / t_ternary if t_ternary > 0 else float("inf"),
        "f32_elements_per_s": elements / t_f32 if t_f32 > 0 else float("inf"),
        "weight_bytes_ternary": out_features * packed_row_bytes(in_features),
        "weight_bytes_fp16": out_features * in_features * 2,
        "weight_bytes_f32": out_features * in_features * 4,
        "activation_bytes_int8": tokens * in_features,
        "activation_bytes_f32": tokens * in_features * 4,
    }
