"""Desk-scale ternary-weight LLM toolkit.

Quantize full-precision weights to {-1, 0, +1} with a per-tensor absmean
scale, run transformer inference through bit-packed add-only integer kernels,
train toy ternary models from scratch with a straight-through estimator, and
reproduce the analytic energy/memory cost comparisons against fp16 baselines.
"""

from .config import TransformerConfig
from .errors import (
    BadMagicError,
    CorruptDataError,
    DimensionError,
    DuplicateTensorError,
    ModelFormatError,
    TernlmError,
    TrainingDivergedError,
    TruncatedFileError,
    UnsupportedVersionError,
    ValidationError,
)
from .quantizer import (
    QuantizedActivations,
    QuantizerParams,
    absmean_scale,
    dequantize_output,
    dequantize_weights,
    quantize_activations,
    quantize_weights,
    round_clip,
)
from .ternary_format import (
    ModelFile,
    TensorRecord,
    TernaryTensor,
    load_model,
    pack,
    read_model,
    save_model,
    unpack,
    write_model,
)

__version__ = "0.1.0"

__all__ = [
    "TransformerConfig",
    "QuantizerParams",
    "QuantizedActivations",
    "TernaryTensor",
    "TensorRecord",
    "ModelFile",
    "absmean_scale",
    "quantize_weights",
    "quantize_activations",
    "dequantize_weights",
    "dequantize_output",
    "round_clip",
    "pack",
    "unpack",
    "read_model",
    "write_model",
    "load_model",
    "save_model",
    "TernlmError",
    "ValidationError",
    "DimensionError",
    "ModelFormatError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedFileError",
    "DuplicateTensorError",
    "CorruptDataError",
    "TrainingDivergedError",
    "__version__",
]
