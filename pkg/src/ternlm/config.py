"""Transformer dimension config, shared by the engine, the trainer, and the cost model."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class TransformerConfig:
    hidden: int
    layers: int
    heads: int
    ffn_dim: int
    max_seq: int
    vocab: int = 256
    rope_theta: float = 10000.0

    def __post_init__(self) -> None:
        for name in ("hidden", "layers", "heads", "ffn_dim", "max_seq", "vocab"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValidationError(f"{name} must be a positive integer, got {v!r}")
        if self.rope_theta <= 0:
            raise ValidationError(f"rope_theta must be positive, got {self.rope_theta}")
        if self.hidden % self.heads != 0:
            raise ValidationError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})"
            )
        if (self.hidden // self.heads) % 2 != 0:
            raise ValidationError(
                f"head_dim ({self.hidden // self.heads}) must be even for rotary pairs"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        # sorted keys so serialized models are byte-stable
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        missing = {f for f in ("hidden", "layers", "heads", "ffn_dim", "max_seq")} - set(d)
        if missing:
            raise ValidationError(f"config is missing required fields: {sorted(missing)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "TransformerConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ValidationError(f"config is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise ValidationError("config JSON must be an object")
        return cls.from_dict(d)
