"""Analytic energy and weight-memory model for fp16 vs ternary transformers.

Matmul MACs are counted from config dimensions and priced with per-operation
energy constants for a 7nm process node: an fp16 MAC costs one fp16 add plus
one fp16 multiply, the ternary path costs one int8 add. Weight bytes follow
the packed 2-bit format for block linears and 2 bytes/param for everything
that stays full precision (embedding, head, norm gains). Attention-score
matmuls are excluded identically in both modes by default; a sensitivity
knob prices them at fp16 rates in both. Latency is deliberately not modeled,
only measured numbers exist for it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

from .config import TransformerConfig
from .errors import ValidationError
from .ternary_format import packed_row_bytes

MODE_FP16 = "fp16"
MODE_TERNARY = "ternary"

FP16_BYTES_PER_PARAM = 2

LATENCY_NOTE = "not modeled (measured-only in paper)"


@dataclass(frozen=True)
class EnergyConstants:
    """Per-operation energies in picojoules for one process node.

    The defaults are 7nm figures chosen so that the per-MAC fp16/ternary
    ratio lands at (0.16 + 0.34) / 0.007 = 71.43.
    """

    fp16_add: float = 0.16
    fp16_mul: float = 0.34
    int8_add: float = 0.007
    process_node: str = "7nm"

    def __post_init__(self) -> None:
        for name in ("fp16_add", "fp16_mul", "int8_add"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be strictly positive")

    @property
    def fp16_mac(self) -> float:
        return self.fp16_add + self.fp16_mul

    @property
    def per_mac_ratio(self) -> float:
        return self.fp16_mac / self.int8_add

    @classmethod
    def from_json_file(cls, path) -> "EnergyConstants":
        with open(path, "r", encoding="utf-8") as f:
            d = json.load(f)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown energy constant fields: {sorted(unknown)}")
        return cls(**d)


def _check_mode(mode: str) -> None:
    if mode not in (MODE_FP16, MODE_TERNARY):
        raise ValidationError(f"mode must be {MODE_FP16!r} or {MODE_TERNARY!r}, got {mode!r}")


def matmul_energy(m: int, k: int, n: int, mode: str, constants: EnergyConstants) -> float:
    """Energy in pJ for an m x k x n matmul: one priced op per MAC."""
    if min(m, k, n) < 1:
        raise ValidationError("matmul dims must be positive")
    _check_mode(mode)
    macs = m * k * n
    if mode == MODE_FP16:
        return macs * constants.fp16_mac
    return macs * constants.int8_add


def block_linear_macs_per_token(config: TransformerConfig) -> int:
    """MACs per token in the block linears: 4 h^2 (QKVO) + 3 h f (gate/up/down) per layer."""
    h, f = config.hidden, config.ffn_dim
    return config.layers * (4 * h * h + 3 * h * f)


def head_macs_per_token(config: TransformerConfig) -> int:
    return config.vocab * config.hidden


def attention_score_macs_per_token(config: TransformerConfig, context: int) -> int:
    """QK^T plus prob-V MACs per token at a given context length (2 h per position per layer)."""
    return config.layers * 2 * config.hidden * context


def model_energy_per_token(
    config: TransformerConfig,
    mode: str,
    constants: EnergyConstants,
    attention_context: int | None = None,
) -> float:
    """pJ per generated token, summing all per-token weight matmuls.

    In ternary mode the block linears are priced at int8-add rates while the
    output head stays at fp16 rates (it remains full precision; the embedding
    is a lookup and contributes no matmul in either mode). attention_context
    prices the score matmuls at fp16 rates in both modes when given.
    """
    _check_mode(mode)
    block = matmul_energy(1, block_linear_macs_per_token(config), 1,
                          mode if mode == MODE_FP16 else MODE_TERNARY, constants)
    head = matmul_energy(1, head_macs_per_token(config), 1, MODE_FP16, constants)
    total = block + head
    if attention_context is not None:
        total += matmul_energy(
            1, attention_score_macs_per_token(config, attention_context), 1, MODE_FP16, constants
        )
    return total


def sequence_energy(
    config: TransformerConfig,
    tokens: int,
    mode: str,
    constants: EnergyConstants,
    attention_context: int | None = None,
) -> float:
    if tokens < 1:
        raise ValidationError("token count must be positive")
    return tokens * model_energy_per_token(config, mode, constants, attention_context)


@dataclass(frozen=True)
class MemoryBreakdown:
    block_linear_bytes: int
    full_precision_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.block_linear_bytes + self.full_precision_bytes


def _gain_params(config: TransformerConfig) -> int:
    # two norm gains per layer plus the final norm
    return (2 * config.layers + 1) * config.hidden


def model_memory_bytes(config: TransformerConfig, mode: str) -> MemoryBreakdown:
    """Weight-only byte counts, split into quantized-eligible and full-precision parts."""
    _check_mode(mode)
    h, f = config.hidden, config.ffn_dim
    fp_params = 2 * config.vocab * h + _gain_params(config)
    if mode == MODE_FP16:
        block = FP16_BYTES_PER_PARAM * config.layers * (4 * h * h + 3 * h * f)
    else:
        per_layer = (
            4 * h * packed_row_bytes(h)
            + 2 * f * packed_row_bytes(h)
            + h * packed_row_bytes(f)
        )
        block = config.layers * per_layer
    return MemoryBreakdown(
        block_linear_bytes=block,
        full_precision_bytes=FP16_BYTES_PER_PARAM * fp_params,
    )


@dataclass(frozen=True)
class CostReport:
    """Energy and memory comparison of one config in fp16 vs ternary form."""

    model_label: str
    config: TransformerConfig
    tokens: int
    weight_bytes_fp16: int
    weight_bytes_ternary: int
    memory_ratio: float
    energy_fp16_pj: float
    energy_ternary_pj: float
    energy_ratio: float
    per_mac_ratio: float
    process_node: str
    latency: str = LATENCY_NOTE

    def __post_init__(self) -> None:
        if self.weight_bytes_ternary > self.weight_bytes_fp16:
            raise ValidationError("ternary weight bytes exceed fp16 weight bytes")
        if self.energy_ternary_pj > self.energy_fp16_pj:
            raise ValidationError("ternary energy exceeds fp16 energy")

    def to_json_dict(self) -> dict:
        return {
            "model_label": self.model_label,
            "config": self.config.to_dict(),
            "tokens": self.tokens,
            "weight_bytes_fp16": self.weight_bytes_fp16,
            "weight_bytes_ternary": self.weight_bytes_ternary,
            "memory_ratio": self.memory_ratio,
            "energy_fp16_pj": self.energy_fp16_pj,
            "energy_ternary_pj": self.energy_ternary_pj,
            "energy_ratio": self.energy_ratio,
            "per_mac_ratio": self.per_mac_ratio,
            "process_node": self.process_node,
            "latency": self.latency,
        }

    def to_text_table(self) -> str:
        gb = 1024.0**3
        rows = [
            ("model", self.model_label),
            ("process node", self.process_node),
            ("tokens", str(self.tokens)),
            ("weights fp16", f"{self.weight_bytes_fp16 / gb:.3f} GiB"),
            ("weights ternary", f"{self.weight_bytes_ternary / gb:.3f} GiB"),
            ("memory ratio", f"{self.memory_ratio:.2f}x"),
            ("energy fp16", f"{self.energy_fp16_pj:.4g} pJ"),
            ("energy ternary", f"{self.energy_ternary_pj:.4g} pJ"),
            ("energy ratio", f"{self.energy_ratio:.2f}x"),
            ("per-MAC ratio", f"{self.per_mac_ratio:.2f}x"),
            ("latency", self.latency),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def cost_report(
    config: TransformerConfig,
    label: str,
    tokens: int = 512,
    constants: EnergyConstants | None = None,
    attention_context: int | None = None,
) -> CostReport:
    if constants is None:
        constants = EnergyConstants()
    mem_fp16 = model_memory_bytes(config, MODE_FP16)
    mem_tern = model_memory_bytes(config, MODE_TERNARY)
    e_fp16 = sequence_energy(config, tokens, MODE_FP16, constants, attention_context)
    e_tern = sequence_energy(config, tokens, MODE_TERNARY, constants, attention_context)
    return CostReport(
        model_label=label,
        config=config,
        tokens=tokens,
        weight_bytes_fp16=mem_fp16.total_bytes,
        weight_bytes_ternary=mem_tern.total_bytes,
        memory_ratio=mem_fp16.total_bytes / mem_tern.total_bytes,
        energy_fp16_pj=e_fp16,
        energy_ternary_pj=e_tern,
        energy_ratio=e_fp16 / e_tern,
        per_mac_ratio=constants.per_mac_ratio,
        process_node=constants.process_node,
    )


def pareto_compare(
    config_a: TransformerConfig,
    config_b: TransformerConfig,
    constants: EnergyConstants | None = None,
    mode_a: str = MODE_TERNARY,
    mode_b: str = MODE_FP16,
) -> dict:
    """Per-metric strict-dominance verdicts of model A over model B.

    Metrics are energy per token and weight bytes; latency is reported as
    not modeled. "dominates" means strictly smaller under this analytic model.
    """
    if constants is None:
        constants = EnergyConstants()
    e_a = model_energy_per_token(config_a, mode_a, constants)
    e_b = model_energy_per_token(config_b, mode_b, constants)
    m_a = model_memory_bytes(config_a, mode_a).total_bytes
    m_b = model_memory_bytes(config_b, mode_b).total_bytes
    return {
        "energy_per_token": {
            "a_pj": e_a,
            "b_pj": e_b,
            "a_dominates": e_a < e_b,
        },
        "weight_bytes": {
            "a_bytes": m_a,
            "b_bytes": m_b,
            "a_dominates": m_a < m_b,
        },
        "latency": LATENCY_NOTE,
    }


# ---------------------------------------------------------------------------
# shipped size configs
# ---------------------------------------------------------------------------

SIZE_LABELS = ["700M", "1.3B", "3B", "3.9B", "7B", "13B", "30B", "70B"]


def available_sizes() -> list[str]:
    return list(SIZE_LABELS)


def load_size_config(label: str) -> TransformerConfig:
    """Resolve a size label to its shipped config file."""
    if label not in SIZE_LABELS:
        raise KeyError(label)
    name = f"{label.replace('.', '_')}.json"
    text = resources.files("ternlm.configs").joinpath(name).read_text(encoding="utf-8")
    return TransformerConfig.from_json(text)
