"""Projection head, contrastive and classification losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_autodiff as ad
from .nn import Module, glorot, zeros
from .tensor_autodiff import Tensor

PROB_CLAMP = 1e-7


class ProjectionHead(Module):
    """W2 relu(W1 h), no biases. Applied to both branches."""

    def __init__(self, d_h: int, rng, dtype=np.float32):
        self.w_1 = glorot(rng, d_h, d_h, dtype)
        self.w_2 = glorot(rng, d_h, d_h, dtype)


class Classifier(Module):
    """Flat sigmoid classifier over all non-root labels; row j of ``weight``
    is the representation of label j."""

    def __init__(self, d_h: int, num_classes: int, rng, dtype=np.float32):
        self.weight = glorot(rng, num_classes, d_h, dtype)
        self.bias = zeros(num_classes, dtype)

    def logits(self, h: Tensor) -> Tensor:
        return h @ self.weight.T + self.bias


@dataclass
class LossReport:
    cls: float
    cls_pos: float
    con: float
    total: float


def project(h: Tensor, head: ProjectionHead) -> Tensor:
    return ad.relu(h @ head.w_1.T) @ head.w_2.T


def ntxent_batch_loss(c: Tensor, c_pos: Tensor, tau: float = 1.0) -> Tensor:
    """NT-Xent over the 2N rows [c; c_pos]; row m's partner is m +/- N and
    its denominator runs over every other row."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = c.shape[0]
    if n < 1 or c_pos.shape != c.shape:
        raise ValueError("need two equally shaped non-empty batches")
    z = ad.l2_normalize(ad.concat([c, c_pos], axis=0))
    sim = (z @ z.T) * (1.0 / tau)
    m = 2 * n
    rows = np.repeat(np.arange(m), m - 1).reshape(m, m - 1)
    cols = np.array([[j for j in range(m) if j != i] for i in range(m)], dtype=np.int64).reshape(m, m - 1)
    partner = (np.arange(m) + n) % m
    others = sim[rows, cols]
    positive = sim[np.arange(m), partner]
    return (ad.logsumexp_lastdim(others) - positive).mean()


def bce_multilabel_loss(p: np.ndarray, y: np.ndarray) -> float:
    """Summed binary cross-entropy on probabilities, clamped away from 0/1."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).sum())


def classification_loss(logits: Tensor, y: np.ndarray, reduction: str = "sum") -> Tensor:
    return ad.bce_with_logits(logits, y, reduction=reduction)


def total_loss(cls: Tensor, cls_pos, con, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    out = cls
    if cls_pos is not None:
        out = out + cls_pos
    if con is not None and lam > 0:
        out = out + con * lam
    return out
