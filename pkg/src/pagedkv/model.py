"""A seeded miniature transformer decoder used to generate real tokens.

Weights come from ``numpy.random.default_rng(weight_seed)`` (PCG64) and are
drawn in a fixed order, each ``uniform(-1, 1) / sqrt(hidden)``:

    embedding [V, d]
    per layer: W_q, W_k, W_v, W_o [d, d], W_1 [d, m*d], W_2 [m*d, d]
    W_out [d, V]

Row vectors are multiplied on the left (``y = x @ W``).  Positions are added
as a sinusoidal encoding scaled by ``1/sqrt(d)``.  Each block is
``x += attn(x) @ W_o; x += tanh(x @ W_1) @ W_2`` (optionally pre-normalised).

The model talks to KV memory through a cache object (see
:class:`pagedkv.attention.PagedKvCache` and
:class:`pagedkv.baselines.ContiguousKvCache`) so the same arithmetic runs on
paged and contiguous storage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence as Seq

import numpy as np

from .attention import contiguous_attention


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    num_layers: int = 2
    num_heads: int = 2
    head_dim: int = 8
    max_seq_len: int = 2048
    weight_seed: int = 0
    mlp_mult: int = 4
    layer_norm: bool = False

    def __post_init__(self) -> None:
        for name in ("vocab_size", "num_layers", "num_heads", "head_dim", "max_seq_len", "mlp_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def hidden_size(self) -> int:
        return self.num_heads * self.head_dim


@dataclass
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_1: np.ndarray
    w_2: np.ndarray


@dataclass
class ModelWeights:
    embedding: np.ndarray
    layers: list[LayerWeights] = field(default_factory=list)
    w_out: np.ndarray = None

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> ModelWeights:
        rng = np.random.default_rng(cfg.weight_seed)
        d = cfg.hidden_size
        scale = 1.0 / math.sqrt(d)

        def draw(*shape):
            return rng.uniform(-1.0, 1.0, size=shape) * scale

        emb = draw(cfg.vocab_size, d)
        layers = []
        for _ in range(cfg.num_layers):
            layers.append(
                LayerWeights(
                    w_q=draw(d, d),
                    w_k=draw(d, d),
                    w_v=draw(d, d),
                    w_o=draw(d, d),
                    w_1=draw(d, cfg.mlp_mult * d),
                    w_2=draw(cfg.mlp_mult * d, d),
                )
            )
        return cls(emb, layers, draw(d, cfg.vocab_size))


def sinusoidal_positions(positions: np.ndarray, d: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)[:, None]
    i = np.arange(d)
    freq = 1.0 / np.power(10000.0, (i - i % 2) / d)
    angle = positions * freq[None, :]
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)) / math.sqrt(d)


def _normalize(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


class TinyModel:
    def __init__(self, config: ModelConfig, weights: ModelWeights | None = None):
        self.config = config
        self.weights = weights if weights is not None else ModelWeights.from_config(config)
        self.H = config.num_heads
        self.dh = config.head_dim
        self.d = config.hidden_size

    # -- position-wise pieces ----------------------------------------------

    def _embed(self, tokens: Seq[int], positions: np.ndarray) -> np.ndarray:
        tok = np.asarray(tokens, dtype=np.intp)
        if tok.size and (tok.min() < 0 or tok.max() >= self.config.vocab_size):
            raise ValueError("token id outside the vocabulary")
        return self.weights.embedding[tok] + sinusoidal_positions(positions, self.d)

    def _qkv(self, layer: int, x: np.ndarray):
        lw = self.weights.layers[layer]
        h = _normalize(x) if self.config.layer_norm else x
        m = x.shape[0]
        q = (h @ lw.w_q).reshape(m, self.H, self.dh)
        k = (h @ lw.w_k).reshape(m, self.H, self.dh)
        v = (h @ lw.w_v).reshape(m, self.H, self.dh)
        return q, k, v

    def _finish_layer(self, layer: int, x: np.ndarray, attn: np.ndarray) -> np.ndarray:
        lw = self.weights.layers[layer]
        x = x + attn.reshape(x.shape[0], self.d) @ lw.w_o
        h = _normalize(x) if self.config.layer_norm else x
        return x + np.tanh(h @ lw.w_1) @ lw.w_2

    def _logits(self, x: np.ndarray) -> np.ndarray:
        h = _normalize(x) if self.config.layer_norm else x
        return h @ self.weights.w_out

    def _check_len(self, n: int) -> None:
        if n > self.config.max_seq_len:
            raise ValueError(f"sequence of {n} tokens exceeds max_seq_len {self.config.max_seq_len}")

    # -- cached execution --------------------------------------------------

    def prefill(self, tokens: Seq[int], table: Any, cache: Any, start: int = 0, return_all: bool = False) -> np.ndarray:
        """Run positions ``start .. len(tokens)-1`` and store their K/V.

        Positions below ``start`` must already be cached in ``table`` (shared
        prefix, or the prompt part of a recomputation).  Returns next-token
        logits, or logits for every computed position with ``return_all``.
        """
        n = len(tokens)
        self._check_len(n)
        if not 0 <= start < n:
            raise ValueError("prefill needs at least one position to compute")
        pos = np.arange(start, n)
        x = self._embed(tokens[start:], pos)
        causal = pos[:, None] >= np.arange(n)[None, :]  # [M, n]
        scale = 1.0 / math.sqrt(self.dh)
        for layer in range(self.config.num_layers):
            q, k, v = self._qkv(layer, x)
            cache.write_range(layer, table, start, k, v)
            K, V = cache.gather(layer, table, n)  # [H, n, dh]
            scores = np.einsum("mhd,hnd->hmn", q, K) * scale
            scores = np.where(causal[None], scores, -np.inf)
            scores -= scores.max(axis=-1, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(axis=-1, keepdims=True)
            attn = np.einsum("hmn,hnd->mhd", w, V)
            x = self._finish_layer(layer, x, attn)
        if return_all:
            return self._logits(x)
        return self._logits(x[-1:])[0]

    def recompute_prefill(self, tokens: Seq[int], table: Any, cache: Any, start: int = 0) -> np.ndarray:
        """Rebuild the KV of ``prompt + generated`` in one prompt-phase pass."""
        return self.prefill(tokens, table, cache, start=start)

    def decode_batch(self, tokens: Seq[int], positions: Seq[int], tables: Seq[Any], cache: Any) -> np.ndarray:
        """One new position per sequence; the slot must already be provisioned."""
        pos = np.asarray(positions, dtype=np.intp)
        if pos.size and pos.max() >= self.config.max_seq_len:
            raise ValueError("decode position beyond max_seq_len")
        batch = cache.prepare(tables, pos)
        x = self._embed(tokens, pos)
        for layer in range(self.config.num_layers):
            q, k, v = self._qkv(layer, x)
            cache.write_batch(layer, batch, k, v)
            attn = cache.attend_batch(layer, q, batch)
            x = self._finish_layer(layer, x, attn)
        return self._logits(x)

    def decode_step(self, token: int, position: int, table: Any, cache: Any) -> np.ndarray:
        return self.decode_batch([token], [position], [table], cache)[0]

    # -- cache-free oracle -------------------------------------------------

    def forward(self, tokens: Seq[int]) -> np.ndarray:
        """Logits at every position from a from-scratch pass with no KV cache."""
        n = len(tokens)
        self._check_len(n)
        x = self._embed(tokens, np.arange(n))
        for layer in range(self.config.num_layers):
            q, k, v = self._qkv(layer, x)
            attn = np.empty_like(q)
            for i in range(n):
                for h in range(self.H):
                    attn[i, h] = contiguous_attention(q[i, h], k[: i + 1, h], v[: i + 1, h])
            x = self._finish_layer(layer, x, attn)
        return self._logits(x)
