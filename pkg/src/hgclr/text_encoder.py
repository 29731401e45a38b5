"""Compact pre-norm transformer encoder with first-token pooling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor_autodiff as ad
from .nn import Module, glorot, normal, ones, zeros
from .tensor_autodiff import RngStream, Tensor

PAD, UNK, CLS, SEP, ZERO = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[ZERO]")


@dataclass
class EncoderConfig:
    vocab_size: int
    d_h: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_h % self.n_heads:
            raise ValueError(f"d_h={self.d_h} is not divisible by n_heads={self.n_heads}")


@dataclass
class TokenBatch:
    ids: np.ndarray        # (N, n) int
    pad_mask: np.ndarray   # (N, n) bool, True at padding
    labels: np.ndarray     # (N, num_classes) 0/1

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class EncodedBatch:
    hidden: Tensor
    pooled: Tensor


class Block(Module):
    def __init__(self, d: int, n_heads: int, rng: RngStream, dtype):
        self.n_heads = n_heads
        self.ln1_g, self.ln1_b = ones(d, dtype), zeros(d, dtype)
        self.w_q = glorot(rng, d, d, dtype)
        self.w_k = glorot(rng, d, d, dtype)
        self.w_v = glorot(rng, d, d, dtype)
        self.w_o = glorot(rng, d, d, dtype)
        self.b_q, self.b_k, self.b_v, self.b_o = (zeros(d, dtype) for _ in range(4))
        self.ln2_g, self.ln2_b = ones(d, dtype), zeros(d, dtype)
        self.w_1 = glorot(rng, d, 4 * d, dtype)
        self.b_1 = zeros(4 * d, dtype)
        self.w_2 = glorot(rng, 4 * d, d, dtype)
        self.b_2 = zeros(d, dtype)

    def _heads(self, x: Tensor) -> Tensor:
        N, n, d = x.shape
        return x.reshape(N, n, self.n_heads, d // self.n_heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, key_mask: np.ndarray, rate: float, rng: Optional[RngStream]) -> Tensor:
        N, n, d = x.shape
        h = ad.layer_norm(x, self.ln1_g, self.ln1_b)
        q = self._heads(h @ self.w_q + self.b_q)
        k = self._heads(h @ self.w_k + self.b_k)
        v = self._heads(h @ self.w_v + self.b_v)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d // self.n_heads))
        att = ad.softmax_lastdim(scores, mask=key_mask[:, None, None, :]) @ v
        att = att.transpose(0, 2, 1, 3).reshape(N, n, d)
        x = x + ad.dropout(att @ self.w_o + self.b_o, rate, rng)
        h = ad.layer_norm(x, self.ln2_g, self.ln2_b)
        f = ad.relu(h @ self.w_1 + self.b_1) @ self.w_2 + self.b_2
        return x + ad.dropout(f, rate, rng)


class TextEncoder(Module):
    """Token table, learned positions, ``n_layers`` pre-norm blocks.

    ``token_emb`` is the one embedding table of the model; the graph encoder
    reads label-name embeddings from this same object.
    """

    def __init__(self, config: EncoderConfig, rng: RngStream, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        d = config.d_h
        self.token_emb = normal(rng, (config.vocab_size, d), 0.1, dtype)
        self.token_emb.data[ZERO] = 0
        self.pos_emb = normal(rng, (config.max_len, d), 0.02, dtype)
        self.blocks = [Block(d, config.n_heads, rng, dtype) for _ in range(config.n_layers)]
        self.lnf_g, self.lnf_b = ones(d, dtype), zeros(d, dtype)

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        """Raw token embeddings, without positions."""
        ids = np.asarray(ids)
        if ids.size and ids.max() >= self.config.vocab_size:
            raise IndexError(f"token id {ids.max()} >= vocab_size {self.config.vocab_size}")
        return ad.embedding(self.token_emb, ids)

    def encode(self, emb: Tensor, pad_mask: np.ndarray, dropout_rng: Optional[RngStream] = None) -> EncodedBatch:
        N, n, d = emb.shape
        if n > self.config.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        rate = self.config.dropout if dropout_rng is not None else 0.0
        x = ad.dropout(emb + self.pos_emb[:n], rate, dropout_rng)
        key_mask = ~np.asarray(pad_mask, dtype=bool)
        for block in self.blocks:
            x = block(x, key_mask, rate, dropout_rng)
        hidden = ad.layer_norm(x, self.lnf_g, self.lnf_b)
        return EncodedBatch(hidden=hidden, pooled=hidden[:, 0, :])

    def pin_zero_token(self) -> None:
        """Keep the zero token's row at exactly zero with no gradient."""
        if self.token_emb.grad is not None:
            self.token_emb.grad[ZERO] = 0
        self.token_emb.data[ZERO] = 0
