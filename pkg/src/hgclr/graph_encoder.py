"""Graphormer-style attention over the label tree.

One attention layer whose logits carry two structural biases shared by all
heads: a learnable scalar per tree distance (spatial encoding) and the mean
learnable edge weight along the tree path (edge encoding).
"""

from __future__ import annotations

import numpy as np

from . import tensor_autodiff as ad
from .nn import Module, glorot, normal, ones, zeros
from .taxonomy import Taxonomy, path_incidence
from .tensor_autodiff import RngStream, Tensor


class GraphEncoder(Module):
    def __init__(self, taxonomy: Taxonomy, name_ids: list, token_emb: Tensor, d_h: int,
                 n_heads: int, rng: RngStream, dtype=np.float32, n_layers: int = 1,
                 use_name: bool = True, use_spatial: bool = True, use_edge: bool = True):
        if d_h % n_heads:
            raise ValueError("d_h must be divisible by n_heads")
        self.taxonomy = taxonomy
        self.token_emb = token_emb  # shared with the text encoder, not owned
        self.d_h = d_h
        self.n_heads = n_heads
        self.use_name = use_name
        self.use_spatial = use_spatial
        self.use_edge = use_edge
        k = taxonomy.k
        self.label_emb = normal(rng, (k, d_h), 0.1, dtype)
        self.layers = [GraphLayer(d_h, rng, dtype) for _ in range(n_layers)]
        # distances clamped to the table size
        self.n_buckets = taxonomy.max_dist + 1
        self.spatial = zeros((self.n_buckets, 1), dtype)
        self.edge_w = zeros((len(taxonomy.edges), 1), dtype)
        if not use_spatial:
            self.spatial.requires_grad = False
        if not use_edge:
            self.edge_w.requires_grad = False
        self._buckets = np.minimum(taxonomy.dist, taxonomy.max_dist)
        self._incidence = path_incidence(taxonomy).astype(dtype)
        width = max([len(ids) for ids in name_ids] + [1])
        self._name_ids = np.zeros((k, width), dtype=np.int64)
        self._name_w = np.zeros((k, width, 1), dtype=dtype)
        for i, ids in enumerate(name_ids):
            if ids:
                self._name_ids[i, :len(ids)] = ids
                self._name_w[i, :len(ids)] = 1.0 / len(ids)
        self.forward_calls = 0

    def named_parameters(self, prefix: str = ""):
        for name, p in super().named_parameters(prefix):
            if p is not self.token_emb:
                yield name, p

    def node_features(self) -> Tensor:
        """label_emb + mean of the live token embeddings of each label name."""
        f = self.label_emb
        if self.use_name and self._name_w.any():
            names = ad.embedding(self.token_emb, self._name_ids) * self._name_w
            f = f + names.sum(axis=1)
        return f

    def structural_bias(self) -> Tensor:
        """(k, k) matrix c + b[dist]; zero for ablated terms."""
        k = self.taxonomy.k
        bias = Tensor(np.zeros((k, k), dtype=self.label_emb.dtype))
        if self.use_edge:
            bias = bias + (ad.matmul(Tensor(self._incidence), self.edge_w)).reshape(k, k)
        if self.use_spatial:
            bias = bias + ad.embedding(self.spatial, self._buckets).reshape(k, k)
        return bias

    def attention_logits(self, f: Tensor, layer: "GraphLayer") -> Tensor:
        k = f.shape[0]
        dh = self.d_h // self.n_heads
        q = (f @ layer.w_q).reshape(k, self.n_heads, dh).transpose(1, 0, 2)
        kk = (f @ layer.w_k).reshape(k, self.n_heads, dh).transpose(1, 2, 0)
        return (q @ kk) * (1.0 / np.sqrt(dh)) + self.structural_bias()

    def __call__(self) -> Tensor:
        self.forward_calls += 1
        f = self.node_features()
        for layer in self.layers:
            f = layer(f, self)
        return f


class GraphLayer(Module):
    def __init__(self, d_h: int, rng: RngStream, dtype):
        self.w_q = glorot(rng, d_h, d_h, dtype)
        self.w_k = glorot(rng, d_h, d_h, dtype)
        self.w_v = glorot(rng, d_h, d_h, dtype)
        self.w_o = glorot(rng, d_h, d_h, dtype)
        self.ln_g, self.ln_b = ones(d_h, dtype), zeros(d_h, dtype)

    def __call__(self, f: Tensor, enc: GraphEncoder) -> Tensor:
        k, d = f.shape
        heads = enc.n_heads
        probs = ad.softmax_lastdim(enc.attention_logits(f, self))
        v = (f @ self.w_v).reshape(k, heads, d // heads).transpose(1, 0, 2)
        mixed = (probs @ v).transpose(1, 0, 2).reshape(k, d)
        return ad.layer_norm(mixed @ self.w_o + f, self.ln_g, self.ln_b)


def node_features(enc: GraphEncoder) -> Tensor:
    return enc.node_features()


def graph_attention_matrix(f: Tensor, enc: GraphEncoder, layer: int = 0) -> Tensor:
    """Pre-softmax attention logits, shape (heads, k, k)."""
    return enc.attention_logits(f, enc.layers[layer])


def encode_labels(enc: GraphEncoder) -> Tensor:
    """Label feature matrix, shape (k, d_h)."""
    return enc()
