"""Decoder-only byte-level transformer inference over quantized or float weights.

LLaMA-alike structure: pre-norm residual blocks with RMSNorm, rotary positions
on Q/K, SwiGLU feed-forward, no biases anywhere, full-precision token
embedding and output head. Block linears run through the packed integer
kernel when stored ternary and through the fixed-order float kernel when
stored F32. Attention scores, softmax, and the residual stream stay in
float64; only BitLinear inputs are quantized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .config import TransformerConfig
from .errors import DimensionError, ValidationError
from .kernels import bitlinear_forward, dense_linear
from .quantizer import QuantizerParams, quantize_weights
from .ternary_format import (
    DTYPE_F32,
    DTYPE_TERNARY,
    ModelFile,
    TensorRecord,
    TernaryTensor,
    pack,
)

RMSNORM_EPS = 1e-5

LinearWeight = Union[TernaryTensor, np.ndarray]


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: LinearWeight
    wk: LinearWeight
    wv: LinearWeight
    wo: LinearWeight
    ffn_norm: np.ndarray
    ffn_gate: LinearWeight
    ffn_up: LinearWeight
    ffn_down: LinearWeight


@dataclass
class TransformerWeights:
    config: TransformerConfig
    token_embedding: np.ndarray  # (vocab, hidden)
    layers: list[LayerWeights]
    final_norm: np.ndarray
    output_head: LinearWeight  # (vocab, hidden)


class KVCache:
    """Per-generation-session cache of rotated keys and values, one slot per layer."""

    def __init__(self, n_layers: int):
        self.keys: list[np.ndarray | None] = [None] * n_layers
        self.values: list[np.ndarray | None] = [None] * n_layers

    @property
    def position(self) -> int:
        k = self.keys[0]
        return 0 if k is None else k.shape[0]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k, v
        else:
            self.keys[layer] = np.concatenate([self.keys[layer], k], axis=0)
            self.values[layer] = np.concatenate([self.values[layer], v], axis=0)
        return self.keys[layer], self.values[layer]


def rmsnorm(x, gain, eps: float = RMSNORM_EPS) -> np.ndarray:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if x.shape[-1] != gain.shape[-1] or gain.ndim != 1:
        raise DimensionError(f"gain shape {gain.shape} does not match input {x.shape}")
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x / np.sqrt(ms + eps) * gain


def _rope_cos_sin(head_dim: int, positions: np.ndarray, theta: float):
    # pair i rotates at angle position * theta^(-2i/head_dim)
    i2 = np.arange(0, head_dim, 2, dtype=np.float64)
    inv_freq = theta ** (-i2 / head_dim)
    angles = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def rope_rotate(v, position: int, theta: float = 10000.0) -> np.ndarray:
    """Rotate consecutive coordinate pairs of one head vector by its position."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] % 2 != 0:
        raise DimensionError(f"head vector must be 1-d with even length, got shape {v.shape}")
    cos, sin = _rope_cos_sin(v.shape[0], np.array([position]), theta)
    cos, sin = cos[0], sin[0]
    even, odd = v[0::2], v[1::2]
    out = np.empty_like(v)
    out[0::2] = even * cos - odd * sin
    out[1::2] = even * sin + odd * cos
    return out


def _rope_apply(x: np.ndarray, positions: np.ndarray, theta: float) -> np.ndarray:
    # x: (seq, heads, head_dim)
    cos, sin = _rope_cos_sin(x.shape[-1], positions, theta)
    cos = cos[:, None, :]
    sin = sin[:, None, :]
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _silu(z: np.ndarray) -> np.ndarray:
    # z * sigmoid(z) without overflow for very negative z
    pos = z >= 0
    out = np.empty_like(z)
    out[pos] = z[pos] / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = z[~pos] * ez / (1.0 + ez)
    return out


def apply_linear(w: LinearWeight, x: np.ndarray, params: QuantizerParams) -> np.ndarray:
    """Dispatch one no-bias linear: integer path for ternary, float path for F32."""
    if isinstance(w, TernaryTensor):
        return bitlinear_forward(w, x, params)
    return dense_linear(x, w)


def swiglu_ffn(x, gate_w, up_w, down_w, params: QuantizerParams | None = None) -> np.ndarray:
    """down( silu(gate(x)) * up(x) )."""
    if params is None:
        params = QuantizerParams()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    gated = _silu(apply_linear(gate_w, x, params)) * apply_linear(up_w, x, params)
    return apply_linear(down_w, gated, params)


def attention_block(
    hidden_states: np.ndarray,
    layer: LayerWeights,
    config: TransformerConfig,
    params: QuantizerParams,
    cache: KVCache | None = None,
    layer_index: int = 0,
    offset: int = 0,
    stats: dict | None = None,
) -> np.ndarray:
    """Pre-norm residual attention: h + O(softmax(mask(Q K^T / sqrt(d))) V).

    Q and K are rotated by absolute position; scores and probabilities are
    float64. With a cache, hidden_states holds only the new positions
    starting at `offset` and the cache supplies the earlier rotated
    keys/values (offset must equal the cache length before this chunk).
    """
    seq = hidden_states.shape[0]
    if offset + seq > config.max_seq:
        raise ValidationError(
            f"sequence of {offset + seq} positions exceeds max_seq {config.max_seq}"
        )
    heads, head_dim = config.heads, config.head_dim
    hn = rmsnorm(hidden_states, layer.attn_norm)
    q = apply_linear(layer.wq, hn, params).reshape(seq, heads, head_dim)
    k = apply_linear(layer.wk, hn, params).reshape(seq, heads, head_dim)
    v = apply_linear(layer.wv, hn, params).reshape(seq, heads, head_dim)

    positions = offset + np.arange(seq)
    q = _rope_apply(q, positions, config.rope_theta)
    k = _rope_apply(k, positions, config.rope_theta)

    if cache is not None:
        k_all, v_all = cache.append(layer_index, k, v)
    else:
        k_all, v_all = k, v
    total = k_all.shape[0]

    # (heads, seq, total)
    scores = np.matmul(q.transpose(1, 0, 2), k_all.transpose(1, 2, 0)) / np.sqrt(head_dim)
    allowed = np.arange(total)[None, :] <= (positions[:, None])
    scores = np.where(allowed[None, :, :], scores, -np.inf)
    scores -= np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / np.sum(e, axis=-1, keepdims=True)
    if stats is not None:
        err = float(np.max(np.abs(np.sum(probs, axis=-1) - 1.0)))
        stats.setdefault("softmax_rowsum_err", []).append(err)

    ctx = np.matmul(probs, v_all.transpose(1, 0, 2))  # (heads, seq, head_dim)
    ctx = ctx.transpose(1, 0, 2).reshape(seq, heads * head_dim)
    return hidden_states + apply_linear(layer.wo, ctx, params)


def _ffn_block(h: np.ndarray, layer: LayerWeights, params: QuantizerParams) -> np.ndarray:
    hn = rmsnorm(h, layer.ffn_norm)
    return h + swiglu_ffn(hn, layer.ffn_gate, layer.ffn_up, layer.ffn_down, params)


def forward(
    weights: TransformerWeights,
    token_ids,
    params: QuantizerParams | None = None,
    cache: KVCache | None = None,
    stats: dict | None = None,
) -> np.ndarray:
    """Logits (seq x vocab) for a token sequence; deterministic.

    With a cache, token_ids are appended after the cached positions and only
    their logits are returned.
    """
    if params is None:
        params = QuantizerParams()
    cfg = weights.config
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValidationError(f"token ids must be a non-empty 1-d sequence, got shape {ids.shape}")
    if ids.min() < 0 or ids.max() >= cfg.vocab:
        raise ValidationError(f"token id out of range [0, {cfg.vocab}): {ids.min()}..{ids.max()}")
    offset = cache.position if cache is not None else 0
    if offset + ids.size > cfg.max_seq:
        raise ValidationError(
            f"sequence of {offset + ids.size} positions exceeds max_seq {cfg.max_seq}"
        )
    h = weights.token_embedding[ids]
    for i, layer in enumerate(weights.layers):
        h = attention_block(
            h, layer, cfg, params, cache=cache, layer_index=i, offset=offset, stats=stats
        )
        h = _ffn_block(h, layer, params)
    h = rmsnorm(h, weights.final_norm)
    return apply_linear(weights.output_head, h, params)


def greedy_decode(
    weights: TransformerWeights,
    prompt_ids,
    max_new: int,
    params: QuantizerParams | None = None,
) -> list[int]:
    """Greedy continuation of a prompt; returns only the generated ids.

    A pure function of (weights, prompt): ties in the argmax resolve to the
    lowest token id. Generation stops when max_seq is reached.
    """
    prompt = list(int(t) for t in prompt_ids)
    if not prompt:
        raise ValidationError("prompt must contain at least one token")
    cfg = weights.config
    if len(prompt) >= cfg.max_seq:
        raise ValidationError(f"prompt of {len(prompt)} tokens leaves no room under max_seq")
    budget = min(int(max_new), cfg.max_seq - len(prompt))
    if budget <= 0:
        return []
    cache = KVCache(cfg.layers)
    logits = forward(weights, prompt, params, cache=cache)
    out: list[int] = []
    for step in range(budget):
        nxt = int(np.argmax(logits[-1]))
        out.append(nxt)
        if step + 1 < budget:
            logits = forward(weights, [nxt], params, cache=cache)
    return out


def nll_from_logits(logits: np.ndarray, targets) -> float:
    """Mean negative log-likelihood of targets under rows of logits (float64)."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.ndim != 1 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(
            f"logits {logits.shape} and targets {targets.shape} are inconsistent"
        )
    m = np.max(logits, axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(logits - m), axis=-1))
    picked = logits[np.arange(targets.shape[0]), targets]
    return float(np.mean(lse - picked))


def perplexity(weights: TransformerWeights, token_ids, params: QuantizerParams | None = None) -> float:
    """exp(mean NLL) with teacher forcing over one sequence (len >= 2)."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 2:
        raise ValidationError("sequence too short: perplexity needs at least 2 tokens")
    logits = forward(weights, ids, params)
    return float(np.exp(nll_from_logits(logits[:-1], ids[1:])))


def stream_perplexity(
    weights: TransformerWeights,
    token_ids,
    params: QuantizerParams | None = None,
) -> float:
    """Perplexity of a long token stream, pooled over max_seq-sized windows.

    The stream is split into consecutive non-overlapping windows; each window
    is teacher-forced independently and the NLL is pooled over all predicted
    positions. A trailing 1-token window predicts nothing.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 2:
        raise ValidationError("sequence too short: perplexity needs at least 2 tokens")
    window = weights.config.max_seq
    total_nll = 0.0
    total_preds = 0
    for start in range(0, ids.size - 1, window):
        chunk = ids[start : start + window]
        if chunk.size < 2:
            break
        logits = forward(weights, chunk, params)
        n = chunk.size - 1
        total_nll += nll_from_logits(logits[:-1], chunk[1:]) * n
        total_preds += n
    return float(np.exp(total_nll / total_preds))


# ---------------------------------------------------------------------------
# model file <-> weights
# ---------------------------------------------------------------------------

def block_linear_names(config: TransformerConfig) -> list[str]:
    """Tensor names eligible for ternary quantization (the block linears)."""
    names = []
    for i in range(config.layers):
        for part in ("wq", "wk", "wv", "wo", "ffn_gate", "ffn_up", "ffn_down"):
            names.append(f"layers.{i}.{part}")
    return names


def _linear_shape(config: TransformerConfig, name: str) -> tuple[int, int]:
    part = name.rsplit(".", 1)[-1]
    h, f = config.hidden, config.ffn_dim
    return {
        "wq": (h, h),
        "wk": (h, h),
        "wv": (h, h),
        "wo": (h, h),
        "ffn_gate": (f, h),
        "ffn_up": (f, h),
        "ffn_down": (h, f),
    }[part]


def _record_for_linear(name: str, w: LinearWeight) -> TensorRecord:
    if isinstance(w, TernaryTensor):
        return TensorRecord.from_ternary(name, w)
    return TensorRecord.from_f32(name, w)


def weights_to_model_file(weights: TransformerWeights) -> ModelFile:
    cfg = weights.config
    records = [TensorRecord.from_f32("token_embedding", weights.token_embedding)]
    for i, layer in enumerate(weights.layers):
        p = f"layers.{i}"
        records.append(TensorRecord.from_f32(f"{p}.attn_norm", layer.attn_norm))
        records.append(_record_for_linear(f"{p}.wq", layer.wq))
        records.append(_record_for_linear(f"{p}.wk", layer.wk))
        records.append(_record_for_linear(f"{p}.wv", layer.wv))
        records.append(_record_for_linear(f"{p}.wo", layer.wo))
        records.append(TensorRecord.from_f32(f"{p}.ffn_norm", layer.ffn_norm))
        records.append(_record_for_linear(f"{p}.ffn_gate", layer.ffn_gate))
        records.append(_record_for_linear(f"{p}.ffn_up", layer.ffn_up))
        records.append(_record_for_linear(f"{p}.ffn_down", layer.ffn_down))
    records.append(TensorRecord.from_f32("final_norm", weights.final_norm))
    records.append(_record_for_linear("output_head", weights.output_head))
    return ModelFile(config=cfg, tensors=tuple(records))


def _load_linear(record: TensorRecord, expected_shape: tuple[int, int]) -> LinearWeight:
    if tuple(record.dims) != expected_shape:
        raise DimensionError(
            f"tensor {record.name!r} has dims {record.dims}, expected {expected_shape}"
        )
    if record.dtype == DTYPE_TERNARY:
        return record.to_ternary()
    if record.dtype == DTYPE_F32:
        return record.to_f32()
    raise ValidationError(f"tensor {record.name!r}: dtype {record.dtype} is not a linear weight")


def _load_gain(model: ModelFile, name: str, hidden: int) -> np.ndarray:
    rec = model.tensor(name)
    if tuple(rec.dims) != (hidden,):
        raise DimensionError(f"tensor {name!r} has dims {rec.dims}, expected ({hidden},)")
    return rec.to_f32()


def model_file_to_weights(model: ModelFile) -> TransformerWeights:
    cfg = model.config
    emb = model.tensor("token_embedding")
    if tuple(emb.dims) != (cfg.vocab, cfg.hidden):
        raise DimensionError(
            f"token_embedding dims {emb.dims} do not match config {(cfg.vocab, cfg.hidden)}"
        )
    layers = []
    for i in range(cfg.layers):
        p = f"layers.{i}"
        layers.append(
            LayerWeights(
                attn_norm=_load_gain(model, f"{p}.attn_norm", cfg.hidden),
                wq=_load_linear(model.tensor(f"{p}.wq"), _linear_shape(cfg, "wq")),
                wk=_load_linear(model.tensor(f"{p}.wk"), _linear_shape(cfg, "wk")),
                wv=_load_linear(model.tensor(f"{p}.wv"), _linear_shape(cfg, "wv")),
                wo=_load_linear(model.tensor(f"{p}.wo"), _linear_shape(cfg, "wo")),
                ffn_norm=_load_gain(model, f"{p}.ffn_norm", cfg.hidden),
                ffn_gate=_load_linear(model.tensor(f"{p}.ffn_gate"), _linear_shape(cfg, "ffn_gate")),
                ffn_up=_load_linear(model.tensor(f"{p}.ffn_up"), _linear_shape(cfg, "ffn_up")),
                ffn_down=_load_linear(model.tensor(f"{p}.ffn_down"), _linear_shape(cfg, "ffn_down")),
            )
        )
    head = _load_linear(model.tensor("output_head"), (cfg.vocab, cfg.hidden))
    return TransformerWeights(
        config=cfg,
        token_embedding=emb.to_f32(),
        layers=layers,
        final_norm=_load_gain(model, "final_norm", cfg.hidden),
        output_head=head,
    )


def quantize_model(
    model: ModelFile, params: QuantizerParams | None = None
) -> tuple[ModelFile, dict[str, float]]:
    """Quantize every block-linear tensor of an F32 model to TERNARY_PACKED.

    Embedding, head, and norm gains are copied untouched. Refuses models whose
    block linears are already quantized. Returns the new model and the gamma
    per quantized tensor.
    """
    if params is None:
        params = QuantizerParams()
    eligible = set(block_linear_names(model.config))
    gammas: dict[str, float] = {}
    records: list[TensorRecord] = []
    for rec in model.tensors:
        if rec.name not in eligible:
            records.append(rec)
            continue
        if rec.dtype != DTYPE_F32:
            raise ValidationError(
                f"tensor {rec.name!r} is {rec.dtype}; model is already quantized"
            )
        codes, gamma = quantize_weights(rec.to_f32(), params)
        records.append(TensorRecord.from_ternary(rec.name, pack(codes, gamma)))
        gammas[rec.name] = gamma
    missing = eligible - {r.name for r in records}
    if missing:
        raise ValidationError(f"model is missing block-linear tensors: {sorted(missing)[:3]}")
    return ModelFile(config=model.config, tensors=tuple(records)), gammas
