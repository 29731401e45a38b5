"""Finite-difference verification of every backward pass, at three scales:
single primitives, the label-graph layer, and the complete training loss."""

from __future__ import annotations

import numpy as np

from . import tensor_autodiff as ad
from .graph_encoder import GraphEncoder
from .losses import ntxent_batch_loss
from .pipeline.data import make_batch
from .pipeline.model import HGCLR, ModelConfig
from .taxonomy import build_taxonomy
from .tensor_autodiff import RngStream, Tensor, gradcheck_parameters
from .text_encoder import CLS, SEP


def _t(rng: np.random.Generator, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def primitive_cases():
    """(name, builder) pairs; builder(rng) -> (loss_fn, params)."""

    def binary(op):
        def build(rng):
            a, b = _t(rng, 3, 4), _t(rng, 1, 4, low=0.5, high=1.5)
            w = rng.normal(size=(3, 4))
            return (lambda: (op(a, b) * w).sum()), [a, b]
        return build

    def unary(op, low=-1.0, high=1.0, shape=(3, 5)):
        def build(rng):
            a = _t(rng, *shape, low=low, high=high)
            w = rng.normal(size=op(Tensor(a.data)).shape)
            return (lambda: (op(a) * w).sum()), [a]
        return build

    def matmul(rng):
        a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
        w = rng.normal(size=(2, 3, 5))
        return (lambda: (ad.matmul(a, b) * w).sum()), [a, b]

    def masked_softmax(rng):
        a = _t(rng, 2, 3, 5, low=-3, high=3)
        mask = rng.uniform(size=(2, 1, 5)) > 0.3
        mask[..., 0] = True
        w = rng.normal(size=(2, 3, 5))
        return (lambda: (ad.softmax_lastdim(a, mask) * w).sum()), [a]

    def layer_norm(rng):
        x, g, b = _t(rng, 2, 3, 6), _t(rng, 6), _t(rng, 6)
        w = rng.normal(size=(2, 3, 6))
        return (lambda: (ad.layer_norm(x, g, b) * w).sum()), [x, g, b]

    def embedding(rng):
        table = _t(rng, 7, 3)
        ids = rng.integers(0, 7, size=(2, 5))
        w = rng.normal(size=(2, 5, 3))
        return (lambda: (ad.embedding(table, ids) * w).sum()), [table]

    def cosine(rng):
        u, v = _t(rng, 4, 6), _t(rng, 4, 6)
        w = rng.normal(size=4)
        return (lambda: (ad.cosine_similarity(u, v) * w).sum()), [u, v]

    def gumbel(rng):
        a = _t(rng, 3, 4, low=-2, high=2)
        g = RngStream(int(rng.integers(1 << 30)), "gumbel").gumbel((3, 4))
        w = rng.normal(size=(3, 4))
        return (lambda: (ad.gumbel_softmax(a, 0.7, g) * w).sum()), [a]

    def bce(rng):
        z = _t(rng, 3, 4, low=-4, high=4)
        y = (rng.uniform(size=(3, 4)) > 0.5).astype(float)
        return (lambda: ad.bce_with_logits(z, y)), [z]

    def shape_ops(rng):
        a, b = _t(rng, 2, 3, 4), _t(rng, 2, 1, 4)
        w = rng.normal(size=(4, 2, 2))
        return (lambda: (ad.concat([a, b], axis=1).transpose(2, 0, 1)[:, :, 1:3] * w).sum()
                + ad.reshape(a, (6, 4)).mean(axis=0).sum()), [a, b]

    def ntxent(rng):
        c, cp = _t(rng, 4, 5), _t(rng, 4, 5)
        return (lambda: ntxent_batch_loss(c, cp, 0.5)), [c, cp]

    def detach_mix(rng):
        a = _t(rng, 3, 3, low=0.1, high=0.9)
        w = rng.normal(size=(3, 3))
        return (lambda: ((a + ad.detach(1 - a)) * a * w).sum()), [a]

    return [
        ("add", binary(ad.add)), ("sub", binary(ad.sub)), ("mul", binary(ad.mul)),
        ("div", binary(ad.div)), ("matmul", matmul), ("exp", unary(ad.exp)),
        ("log", unary(ad.log, 0.2, 2.0)), ("relu", unary(ad.relu)), ("sigmoid", unary(ad.sigmoid, -5, 5)),
        ("softmax", masked_softmax), ("logsumexp", unary(ad.logsumexp_lastdim, -3, 3)),
        ("layer_norm", layer_norm), ("l2_normalize", unary(ad.l2_normalize)),
        ("embedding", embedding), ("cosine_similarity", cosine), ("gumbel_softmax", gumbel),
        ("bce_with_logits", bce), ("shape_ops", shape_ops), ("ntxent", ntxent),
        ("detach", detach_mix),
    ]


def check_primitives(seeds=range(10), step: float = 1e-5) -> dict:
    """Worst relative error per primitive over ``seeds``."""
    out = {}
    for name, build in primitive_cases():
        worst = 0.0
        for s in seeds:
            fn, params = build(np.random.default_rng(1000 + s))
            worst = max(worst, gradcheck_parameters(fn, params, step=step))
        out[name] = worst
    return out


FIVE_NODE_TREE = [("root", "a"), ("root", "b"), ("a", "a one"), ("a", "a two")]


def check_graph_layer(seed: int = 0, step: float = 1e-5) -> float:
    """Gradient of a random projection of the label features w.r.t. every
    graph-encoder parameter and the shared token table, on a 5-node tree."""
    tax = build_taxonomy(FIVE_NODE_TREE)
    rng = RngStream(seed, "init")
    vocab = 9
    table = Tensor(rng.normal((vocab, 8), 0.5), requires_grad=True)
    name_ids = [[5], [6], [7], [6, 8], [7, 8]]
    enc = GraphEncoder(tax, name_ids, table, d_h=8, n_heads=2, rng=rng, dtype=np.float64)
    # move b and w off their zero init so their gradients are generic
    enc.spatial.data[:] = rng.normal(enc.spatial.shape, 0.5)
    enc.edge_w.data[:] = rng.normal(enc.edge_w.shape, 0.5)
    w = np.random.default_rng(seed).normal(size=(tax.k, 8))
    return gradcheck_parameters(lambda: (enc() * w).sum(), enc.parameters() + [table], step=step)


def toy_batch(seed: int = 0):
    """Two documents over the 5-node tree with a 12-token vocabulary."""
    tax = build_taxonomy(FIVE_NODE_TREE)
    seqs = [[CLS, 5, 6, 7, 8, SEP], [CLS, 9, 10, 11, SEP]]
    y = np.array([[1, 0, 1, 0], [1, 0, 0, 1]], dtype=np.float64)
    return tax, make_batch(seqs, y, dtype=np.float64)


def full_loss_setup(seed: int = 0, gamma: float = 0.2):
    tax, batch = toy_batch(seed)
    cfg = ModelConfig(d_h=8, n_layers=1, n_heads=2, max_len=8, dropout=0.0, graph_heads=2,
                      gamma=gamma, lam=0.5, tau=1.0)
    name_ids = [[], [5], [6], [7, 9], [8]]
    model = HGCLR(tax, 12, name_ids, cfg, seed=seed, dtype=np.float64)
    for p in (model.graph.spatial, model.graph.edge_w):
        p.data[:] = np.random.default_rng(seed).normal(size=p.shape) * 0.5
    # pick Gumbel noise that leaves every gate decision well away from gamma,
    # so central differences never straddle the threshold
    k = tax.num_classes
    for trial in range(100):
        noise = RngStream(seed + trial, "gumbel").gumbel(batch.ids.shape + (k,))
        out = model.training_loss(batch, noise, None)
        body = batch.ids >= 5
        p = out.gate.probs.data[body]
        kept = out.gate.keep[body]
        if np.abs(p - gamma).min() > 1e-3 and kept.any() and not kept.all():
            return model, batch, noise
    raise RuntimeError("no Gumbel draw with a clear gate margin")


def check_full_loss(seed: int = 0, step: float = 1e-5) -> float:
    """Whole objective (both classification terms and NT-Xent) with fixed
    Gumbel noise, against central differences on every parameter."""
    model, batch, noise = full_loss_setup(seed)
    return gradcheck_parameters(lambda: model.training_loss(batch, noise, None).loss,
                                model.parameters(), step=step)
