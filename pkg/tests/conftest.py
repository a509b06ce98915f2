"""Shared fixtures: deterministic corpora and random model builders."""

import math
import random
import string

import numpy as np
import pytest

from ternlm.config import TransformerConfig
from ternlm.quantizer import quantize_weights
from ternlm.ternary_format import pack
from ternlm.transformer import LayerWeights, TransformerWeights


def make_wordlist(n: int, seed: int) -> list[str]:
    rng = random.Random(seed)
    words = set()
    while len(words) < n:
        k = rng.randint(3, 9)
        words.add("".join(rng.choice(string.ascii_lowercase) for _ in range(k)))
    return sorted(words)


def synth_corpus(n_bytes: int, seed: int, n_words: int = 800, p_common: float = 0.35) -> bytes:
    """Deterministic English-like text: seeded pseudo-words, 40 of them Zipf-weighted."""
    rng = random.Random(seed)
    words = make_wordlist(n_words, seed + 1)
    common = words[:40]
    parts, size = [], 0
    while size < n_bytes:
        n = rng.randint(4, 12)
        chosen = [
            rng.choice(common) if rng.random() < p_common else rng.choice(words)
            for _ in range(n)
        ]
        s = " ".join(chosen).capitalize() + ". "
        parts.append(s)
        size += len(s)
    return "".join(parts).encode("ascii")


def unigram_perplexity(corpus: bytes) -> float:
    """Independent baseline: exp of the mean NLL under corpus byte frequencies."""
    tok = np.frombuffer(corpus, dtype=np.uint8)
    counts = np.bincount(tok, minlength=256).astype(np.float64)
    probs = counts / counts.sum()
    return float(math.exp(-np.mean(np.log(probs[tok]))))


def random_weights(
    config: TransformerConfig, seed: int = 0, quantized: bool = True
) -> TransformerWeights:
    """Random engine weights, scaled so activations stay tame through the stack."""
    rng = np.random.default_rng(seed)

    def linear(out_dim, in_dim):
        w = rng.normal(0.0, 0.6 / math.sqrt(in_dim), size=(out_dim, in_dim))
        if quantized:
            codes, gamma = quantize_weights(w)
            return pack(codes, gamma)
        return w

    def gain(dim):
        return 1.0 + 0.05 * rng.normal(size=dim)

    h, f = config.hidden, config.ffn_dim
    layers = [
        LayerWeights(
            attn_norm=gain(h),
            wq=linear(h, h),
            wk=linear(h, h),
            wv=linear(h, h),
            wo=linear(h, h),
            ffn_norm=gain(h),
            ffn_gate=linear(f, h),
            ffn_up=linear(f, h),
            ffn_down=linear(h, f),
        )
        for _ in range(config.layers)
    ]
    return TransformerWeights(
        config=config,
        token_embedding=rng.normal(0.0, 0.5, size=(config.vocab, h)),
        layers=layers,
        final_norm=gain(h),
        output_head=rng.normal(0.0, 0.4 / math.sqrt(h), size=(config.vocab, h)),
    )


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    from ternlm.kernels import warm_up

    warm_up()


@pytest.fixture
def tiny_config() -> TransformerConfig:
    return TransformerConfig(hidden=16, layers=2, heads=2, ffn_dim=24, max_seq=32)
