"""Absmean ternary weight quantization and per-token int8 activation quantization.

Weights are scaled by the mean absolute value of the whole matrix (a single
per-tensor scale, gamma) and rounded to {-1, 0, +1}. Activations are scaled
per token (row) into the symmetric range [-q_b, q_b] with no zero point; the
per-token scale beta is the row's max absolute value. Both directions of the
mapping live here: quantize_* produce integer codes plus scales, and the
dequantize_* helpers close the loop after the integer matmul.

Rounding is half-away-from-zero everywhere (ties are deterministic and do not
depend on the platform's banker's rounding).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError

DEFAULT_EPSILON = 1e-6
DEFAULT_QB = 127


@dataclass(frozen=True)
class QuantizerParams:
    """Scheme knobs: epsilon guards the division by gamma, q_b bounds activations.

    q_b = 127 keeps codes inside int8 without ever producing -128, so the
    integer kernel has no asymmetric-overflow corner. epsilon may be 0 for
    exactness experiments; the default keeps the division well defined for
    near-zero weight tensors.
    """

    epsilon: float = DEFAULT_EPSILON
    q_b: int = DEFAULT_QB

    def __post_init__(self) -> None:
        if not (np.isfinite(self.epsilon) and self.epsilon >= 0.0):
            raise ValidationError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if not (1 <= int(self.q_b) <= 127):
            raise ValidationError(f"q_b must be in [1, 127], got {self.q_b}")


@dataclass(frozen=True)
class QuantizedActivations:
    """Per-token int8 codes plus the per-token absmax scale.

    codes has shape (tokens, features); betas has shape (tokens,) and is 1.0
    for all-zero rows (which quantize to all-zero codes).
    """

    codes: np.ndarray
    betas: np.ndarray

    @property
    def tokens(self) -> int:
        return self.codes.shape[0]

    @property
    def features(self) -> int:
        return self.codes.shape[1]


def round_half_away(x):
    """Round to the nearest integer, ties away from zero.

    np.rint is correctly rounded but sends ties to even; exact .5 fractions
    are representable in binary floating point, so ties are detected exactly
    and redirected away from zero.
    """
    x = np.asarray(x, dtype=np.float64)
    nearest = np.rint(x)
    tie = np.abs(x - np.trunc(x)) == 0.5
    return np.where(tie, np.trunc(x) + np.copysign(1.0, x), nearest)


def round_clip(x, a: int, b: int):
    """Half-away-from-zero rounding followed by clamping to [a, b].

    Total on finite inputs. Scalars come back as int, arrays as int64.
    """
    if a > b:
        raise ValidationError(f"round_clip bounds must satisfy a <= b, got [{a}, {b}]")
    out = np.clip(round_half_away(x), a, b).astype(np.int64)
    if np.ndim(x) == 0:
        return int(out)
    return out


def absmean_scale(w) -> float:
    """Mean absolute value over all entries of a 2-d matrix (the scale gamma)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise DimensionError(f"expected a non-empty 2-d matrix, got shape {w.shape}")
    return float(np.mean(np.abs(w)))


def quantize_weights(w, params: QuantizerParams | None = None) -> tuple[np.ndarray, float]:
    """Quantize a weight matrix to ternary codes with a per-tensor absmean scale.

    Returns (codes, gamma) where codes is int8 in {-1, 0, +1} and the
    dequantized weight is gamma * codes. Each code is the half-away rounding
    of w_ij / (gamma + epsilon), clipped to [-1, 1].
    """
    if params is None:
        params = QuantizerParams()
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise DimensionError(f"expected a non-empty 2-d matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValidationError("weight matrix contains non-finite entries")
    gamma = absmean_scale(w)
    denom = gamma + params.epsilon
    if denom == 0.0:
        # gamma == 0 with epsilon == 0 implies w is identically zero
        return np.zeros(w.shape, dtype=np.int8), gamma
    codes = round_clip(w / denom, -1, 1).astype(np.int8)
    return codes, gamma


def quantize_activations(x, params: QuantizerParams | None = None) -> QuantizedActivations:
    """Per-token symmetric quantization of activations into [-q_b, q_b].

    beta_t = max_j |x[t, j]| (1.0 for an all-zero row); codes are the
    half-away rounding of x * q_b / beta_t. Because |x| <= beta_t there is
    no clipping loss and the reconstruction codes * beta / q_b is within
    beta / (2 q_b) of x elementwise.
    """
    if params is None:
        params = QuantizerParams()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise DimensionError(f"expected a non-empty 2-d matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("activation matrix contains non-finite entries")
    betas = np.max(np.abs(x), axis=1)
    betas = np.where(betas == 0.0, 1.0, betas)
    scaled = x * (float(params.q_b) / betas[:, None])
    codes = round_clip(scaled, -params.q_b, params.q_b).astype(np.int8)
    return QuantizedActivations(codes=codes, betas=betas)


def dequantize_weights(codes, gamma: float) -> np.ndarray:
    """Dequantized weight matrix gamma * codes, in float64."""
    return np.asarray(codes, dtype=np.float64) * float(gamma)


def dequantize_output(acc, gamma: float, betas, q_b: int = DEFAULT_QB) -> np.ndarray:
    """Rescale integer accumulators back to real values.

    out[t, j] = acc[t, j] * gamma * betas[t] / q_b. This is the epilogue that
    closes the quantized matmul: gamma undoes the weight scaling, beta/q_b
    undoes the per-token activation scaling.
    """
    acc = np.asarray(acc)
    betas = np.asarray(betas, dtype=np.float64)
    if acc.ndim != 2:
        raise DimensionError(f"accumulator must be 2-d, got shape {acc.shape}")
    if betas.ndim != 1 or betas.shape[0] != acc.shape[0]:
        raise DimensionError(
            f"betas length {betas.shape} does not match accumulator rows {acc.shape[0]}"
        )
    return acc.astype(np.float64) * (float(gamma) / float(q_b)) * betas[:, None]
