"""Toy from-scratch trainer: ternary fake-quant forward, straight-through gradients.

Latent weights stay full precision. Every forward quantizes them (and the
activations) through an exact pass-through: the forward value is the
dequantized quantity, the backward gradient is the identity, and the scales
gamma/beta are constants of the step. Deliberately desk-scale: byte
tokenizer, single process, Adam, warmup + cosine schedule, and a
deterministic batch schedule that cycles through a fixed set of slots.

Exports reuse the numpy quantizer and the packed format, so a trained model
round-trips through the same files the inference engine consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import TransformerConfig
from .errors import TrainingDivergedError, ValidationError
from .quantizer import QuantizerParams, quantize_weights
from .ternary_format import ModelFile
from .transformer import (
    LayerWeights,
    TransformerWeights,
    weights_to_model_file,
)


@dataclass
class TrainConfig:
    steps: int
    learning_rate: float = 3e-3
    seed: int = 0
    batch_size: int = 8
    seq_len: int = 128
    warmup_steps: int = 100
    # cyclic schedule period; must divide the 100-step loss-smoothing window so
    # the moving average always compares like batches against like
    batch_slots: int = 50
    adam_betas: tuple[float, float] = (0.9, 0.95)
    grad_clip: float = 1.0
    weight_quant: bool = True
    act_quant: bool = True
    quantize_head: bool = False
    log_every: int = 0

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValidationError(f"steps must be >= 0, got {self.steps}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.seq_len < 2 or self.batch_slots < 1:
            raise ValidationError("batch_size >= 1, seq_len >= 2, batch_slots >= 1 required")


class _Passthrough(torch.autograd.Function):
    """Forward the quantized values exactly; backward the gradient unchanged."""

    @staticmethod
    def forward(ctx, latent, quantized):
        return quantized

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def round_half_away(t: torch.Tensor) -> torch.Tensor:
    # torch.round sends ties to even; .5 fractions are exact, so fix them up
    nearest = torch.round(t)
    tie = (t - torch.trunc(t)).abs() == 0.5
    return torch.where(tie, torch.trunc(t) + torch.sign(t), nearest)


def weight_fake_quant(w: torch.Tensor, epsilon: float) -> torch.Tensor:
    """gamma * RoundClip(w / (gamma + eps), -1, 1) with per-tensor absmean gamma."""
    gamma = w.abs().mean()
    denom = gamma + epsilon
    if denom == 0.0:
        return torch.zeros_like(w)
    codes = round_half_away(w / denom).clamp_(-1.0, 1.0)
    return gamma * codes


def activation_fake_quant(x: torch.Tensor, q_b: int) -> torch.Tensor:
    """Per-token symmetric int8 fake quantization: round(x * q_b / beta) * beta / q_b."""
    beta = x.abs().amax(dim=-1, keepdim=True)
    beta = torch.where(beta == 0, torch.ones_like(beta), beta)
    codes = round_half_away(x * (q_b / beta)).clamp_(-q_b, q_b)
    return codes * (beta / q_b)


class BitLinear(nn.Module):
    """Linear layer with ternary fake-quant weights and int8 fake-quant inputs, no bias."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        quant: QuantizerParams,
        weight_quant: bool = True,
        act_quant: bool = True,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.epsilon = quant.epsilon
        self.q_b = quant.q_b
        self.weight_quant = weight_quant
        self.act_quant = act_quant
        self.weight = nn.Parameter(torch.empty(out_features, in_features, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = self.weight
        if self.weight_quant:
            with torch.no_grad():
                w_fq = weight_fake_quant(self.weight, self.epsilon)
            w = _Passthrough.apply(self.weight, w_fq)
        if self.act_quant:
            with torch.no_grad():
                x_fq = activation_fake_quant(x, self.q_b)
            x = _Passthrough.apply(x, x_fq)
        return F.linear(x, w)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ms = x.pow(2).mean(dim=-1, keepdim=True)
        return x / torch.sqrt(ms + self.eps) * self.weight


class _Rope(nn.Module):
    def __init__(self, head_dim: int, max_seq: int, theta: float, dtype: torch.dtype):
        super().__init__()
        i2 = torch.arange(0, head_dim, 2, dtype=torch.float64)
        inv_freq = theta ** (-i2 / head_dim)
        angles = torch.arange(max_seq, dtype=torch.float64)[:, None] * inv_freq[None, :]
        self.register_buffer("cos", angles.cos().to(dtype), persistent=False)
        self.register_buffer("sin", angles.sin().to(dtype), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, T, heads, head_dim)
        t = x.shape[1]
        cos = self.cos[:t][None, :, None, :]
        sin = self.sin[:t][None, :, None, :]
        even, odd = x[..., 0::2], x[..., 1::2]
        out = torch.empty_like(x)
        out[..., 0::2] = even * cos - odd * sin
        out[..., 1::2] = even * sin + odd * cos
        return out


class _AttentionBlock(nn.Module):
    def __init__(self, config: TransformerConfig, quant, wq_flags, dtype):
        super().__init__()
        h = config.hidden
        self.heads = config.heads
        self.head_dim = config.head_dim
        self.norm = RMSNorm(h, dtype=dtype)
        self.wq = BitLinear(h, h, quant, *wq_flags, dtype=dtype)
        self.wk = BitLinear(h, h, quant, *wq_flags, dtype=dtype)
        self.wv = BitLinear(h, h, quant, *wq_flags, dtype=dtype)
        self.wo = BitLinear(h, h, quant, *wq_flags, dtype=dtype)
        self.rope = _Rope(config.head_dim, config.max_seq, config.rope_theta, dtype)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        b, t, _ = h.shape
        hn = self.norm(h)
        q = self.wq(hn).view(b, t, self.heads, self.head_dim)
        k = self.wk(hn).view(b, t, self.heads, self.head_dim)
        v = self.wv(hn).view(b, t, self.heads, self.head_dim)
        q, k = self.rope(q), self.rope(k)
        q, k, v = (z.transpose(1, 2) for z in (q, k, v))  # (B, heads, T, hd)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=h.device), diagonal=1)
        scores = scores.masked_fill(mask, float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        ctx = (probs @ v).transpose(1, 2).reshape(b, t, self.heads * self.head_dim)
        return h + self.wo(ctx)


class _FFNBlock(nn.Module):
    def __init__(self, config: TransformerConfig, quant, flags, dtype):
        super().__init__()
        h, f = config.hidden, config.ffn_dim
        self.norm = RMSNorm(h, dtype=dtype)
        self.gate = BitLinear(h, f, quant, *flags, dtype=dtype)
        self.up = BitLinear(h, f, quant, *flags, dtype=dtype)
        self.down = BitLinear(f, h, quant, *flags, dtype=dtype)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        hn = self.norm(h)
        return h + self.down(F.silu(self.gate(hn)) * self.up(hn))


class ToyTernaryLM(nn.Module):
    """Byte-level decoder-only LM with fake-quantized block linears."""

    def __init__(
        self,
        config: TransformerConfig,
        quant: QuantizerParams | None = None,
        weight_quant: bool = True,
        act_quant: bool = True,
        quantize_head: bool = False,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if quant is None:
            quant = QuantizerParams()
        self.config = config
        self.quant = quant
        self.quantize_head = quantize_head
        flags = (weight_quant, act_quant)
        self.embedding = nn.Embedding(config.vocab, config.hidden, dtype=dtype)
        self.attn_blocks = nn.ModuleList(
            _AttentionBlock(config, quant, flags, dtype) for _ in range(config.layers)
        )
        self.ffn_blocks = nn.ModuleList(
            _FFNBlock(config, quant, flags, dtype) for _ in range(config.layers)
        )
        self.final_norm = RMSNorm(config.hidden, dtype=dtype)
        if quantize_head:
            self.head = BitLinear(config.hidden, config.vocab, quant, *flags, dtype=dtype)
        else:
            self.head = nn.Linear(config.hidden, config.vocab, bias=False, dtype=dtype)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        h = self.embedding(ids)
        for attn, ffn in zip(self.attn_blocks, self.ffn_blocks):
            h = attn(h)
            h = ffn(h)
        return self.head(self.final_norm(h))

    def init_parameters(self, seed: int) -> None:
        """Latent weights ~ N(0, 0.02), norm gains 1; deterministic in the seed."""
        g = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if p.ndim == 1:
                    p.fill_(1.0)
                else:
                    p.normal_(0.0, 0.02, generator=g)


def build_model(
    config: TransformerConfig,
    quant: QuantizerParams | None = None,
    weight_quant: bool = True,
    act_quant: bool = True,
    quantize_head: bool = False,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> ToyTernaryLM:
    model = ToyTernaryLM(
        config,
        quant=quant,
        weight_quant=weight_quant,
        act_quant=act_quant,
        quantize_head=quantize_head,
        dtype=dtype,
    )
    model.init_parameters(seed)
    return model


def batch_loss(model: ToyTernaryLM, inputs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    logits = model(inputs)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


def corpus_to_tokens(corpus: bytes) -> np.ndarray:
    return np.frombuffer(corpus, dtype=np.uint8).astype(np.int64)


def make_batch_slots(tokens: np.ndarray, train: TrainConfig) -> torch.Tensor:
    """Fixed batch slots (slots, batch, seq_len+1), windows spread evenly over the corpus.

    Window starts are stratified across slots: every slot samples the whole
    corpus rather than one contiguous chunk, so the per-slot gradients all
    approximate the full-corpus gradient.
    """
    window = train.seq_len + 1
    usable = tokens.shape[0] - window
    if usable < 0:
        raise ValidationError(
            f"corpus too small: {tokens.shape[0]} tokens, need at least {window}"
        )
    n = train.batch_slots * train.batch_size
    starts = np.floor(np.linspace(0, usable, num=n)).astype(np.int64)
    # slot s takes starts[s], starts[s + slots], ... (one window per corpus stride)
    strata = starts.reshape(train.batch_size, train.batch_slots).T
    windows = np.stack(
        [np.stack([tokens[s : s + window] for s in row]) for row in strata]
    )
    return torch.from_numpy(windows)


def _lr_at(step: int, train: TrainConfig) -> float:
    peak = train.learning_rate
    if train.warmup_steps > 0 and step < train.warmup_steps:
        return peak * (step + 1) / train.warmup_steps
    span = max(1, train.steps - train.warmup_steps)
    progress = (step - train.warmup_steps) / span
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    """Trained latent weights (float64 numpy) plus the per-step loss trace."""

    config: TransformerConfig
    train: TrainConfig
    quant: QuantizerParams
    loss_trace: list[float]
    latents: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def _linear(self, name: str, quantized: bool):
        w = self.latents[name]
        if not quantized:
            return w
        from .ternary_format import pack

        codes, gamma = quantize_weights(w, self.quant)
        return pack(codes, gamma)

    def to_weights(self, quantized: bool = True) -> TransformerWeights:
        q = quantized
        layers = []
        for i in range(self.config.layers):
            p = f"layers.{i}"
            layers.append(
                LayerWeights(
                    attn_norm=self.latents[f"{p}.attn_norm"],
                    wq=self._linear(f"{p}.wq", q),
                    wk=self._linear(f"{p}.wk", q),
                    wv=self._linear(f"{p}.wv", q),
                    wo=self._linear(f"{p}.wo", q),
                    ffn_norm=self.latents[f"{p}.ffn_norm"],
                    ffn_gate=self._linear(f"{p}.ffn_gate", q),
                    ffn_up=self._linear(f"{p}.ffn_up", q),
                    ffn_down=self._linear(f"{p}.ffn_down", q),
                )
            )
        head_quant = q and self.train.quantize_head
        return TransformerWeights(
            config=self.config,
            token_embedding=self.latents["token_embedding"],
            layers=layers,
            final_norm=self.latents["final_norm"],
            output_head=self._linear("output_head", head_quant),
        )

    def to_quantized_model_file(self) -> ModelFile:
        return weights_to_model_file(self.to_weights(quantized=True))

    def to_fp32_model_file(self) -> ModelFile:
        return weights_to_model_file(self.to_weights(quantized=False))


def extract_latents(model: ToyTernaryLM) -> dict[str, np.ndarray]:
    """Latent parameter tensors as float64 numpy arrays under their file names."""
    out: dict[str, np.ndarray] = {"token_embedding": _np(model.embedding.weight)}
    for i, (attn, ffn) in enumerate(zip(model.attn_blocks, model.ffn_blocks)):
        p = f"layers.{i}"
        out[f"{p}.attn_norm"] = _np(attn.norm.weight)
        out[f"{p}.wq"] = _np(attn.wq.weight)
        out[f"{p}.wk"] = _np(attn.wk.weight)
        out[f"{p}.wv"] = _np(attn.wv.weight)
        out[f"{p}.wo"] = _np(attn.wo.weight)
        out[f"{p}.ffn_norm"] = _np(ffn.norm.weight)
        out[f"{p}.ffn_gate"] = _np(ffn.gate.weight)
        out[f"{p}.ffn_up"] = _np(ffn.up.weight)
        out[f"{p}.ffn_down"] = _np(ffn.down.weight)
    out["final_norm"] = _np(model.final_norm.weight)
    out["output_head"] = _np(model.head.weight)
    return out


def _np(p: torch.Tensor) -> np.ndarray:
    return p.detach().cpu().numpy().astype(np.float64)


def train_toy(
    config: TransformerConfig,
    corpus: bytes,
    train: TrainConfig,
    quant: QuantizerParams | None = None,
) -> TrainResult:
    """Train a toy ternary model from scratch on raw bytes.

    Deterministic in (config, corpus, train): the same inputs produce
    bit-identical exported model files. Raises TrainingDivergedError with
    step diagnostics if the loss goes non-finite.
    """
    if quant is None:
        quant = QuantizerParams()
    if config.vocab != 256:
        raise ValidationError("the toy trainer is byte-level; config.vocab must be 256")
    if train.seq_len > config.max_seq:
        raise ValidationError(
            f"seq_len {train.seq_len} exceeds config.max_seq {config.max_seq}"
        )
    tokens = corpus_to_tokens(corpus)
    slots = make_batch_slots(tokens, train)

    torch.manual_seed(train.seed)
    model = build_model(
        config,
        quant=quant,
        weight_quant=train.weight_quant,
        act_quant=train.act_quant,
        quantize_head=train.quantize_head,
        seed=train.seed,
    )
    opt = torch.optim.Adam(
        model.parameters(), lr=train.learning_rate, betas=train.adam_betas
    )
    trace: list[float] = []
    for step in range(train.steps):
        lr = _lr_at(step, train)
        for group in opt.param_groups:
            group["lr"] = lr
        batch = slots[step % train.batch_slots]
        inputs, targets = batch[:, :-1], batch[:, 1:]
        loss = batch_loss(model, inputs, targets)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss {loss.item()} at step {step} (lr {lr:.3g}); "
                f"last finite losses: {trace[-3:]}"
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if train.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), train.grad_clip)
        opt.step()
        trace.append(float(loss.item()))
        if train.log_every and (step + 1) % train.log_every == 0:
            print(f"step {step + 1}/{train.steps}  loss {trace[-1]:.4f}  lr {lr:.3g}")

    return TrainResult(
        config=config,
        train=train,
        quant=quant,
        loss_trace=trace,
        latents=extract_latents(model),
    )
