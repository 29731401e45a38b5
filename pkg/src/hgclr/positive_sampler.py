"""Hierarchy-guided positive samples.

Each token attends to every label feature, a Gumbel-Softmax over labels turns
the scores into sampling probabilities, and the probabilities of the
document's gold labels are summed into one retain probability per token.
Tokens above ``gamma`` keep their embedding, the rest become the zero token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensor_autodiff as ad
from .nn import Module, glorot
from .tensor_autodiff import RngStream, Tensor


@dataclass
class PositiveGate:
    probs: Tensor          # (N, n) retain probability per token
    keep: np.ndarray       # (N, n) bool
    gated: Tensor          # (N, n, d_h)


class Sampler(Module):
    def __init__(self, d_h: int, rng: RngStream, dtype=np.float32):
        self.w_q = glorot(rng, d_h, d_h, dtype)
        self.w_k = glorot(rng, d_h, d_h, dtype)
        self.forward_calls = 0


def token_label_scores(e: Tensor, labels: Tensor, state: Sampler) -> Tensor:
    """Scaled dot product of projected tokens (N, n, d) against labels (k, d)."""
    state.forward_calls += 1
    d = e.shape[-1]
    q = e @ state.w_q
    k = labels @ state.w_k
    return (q @ k.T) * (1.0 / np.sqrt(d))


def sample_token_probs(scores: Tensor, label_matrix: np.ndarray, temperature: float,
                       noise: Union[RngStream, np.ndarray, None]) -> Tensor:
    """Retain probability of each token: Gumbel-Softmax over labels, summed
    over the document's gold labels. ``label_matrix`` is (N, k) in {0, 1}."""
    y = np.asarray(label_matrix)
    if (y.sum(axis=1) == 0).any():
        raise ValueError("every document needs a non-empty label set")
    per_label = ad.gumbel_softmax(scores, temperature, noise)
    return (per_label * y[:, None, :].astype(scores.dtype)).sum(axis=-1)


def build_positive_embeddings(e: Tensor, probs: Tensor, gamma: float,
                              force_keep: Optional[np.ndarray] = None,
                              force_drop: Optional[np.ndarray] = None) -> PositiveGate:
    """Hard threshold whose derivative w.r.t. the probability is the embedding.

    The gate is ``(P - detach(P)) + 1`` where kept: it is exactly 1 in the
    forward pass (x - x == 0 in IEEE arithmetic) and has unit derivative in P,
    which is ``P + detach(1 - P)`` without the rounding of ``1 - P``.
    Forced-keep positions get a constant gate of 1; forced-drop positions 0.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    keep = probs.data > gamma
    learn = keep.copy()
    if force_keep is not None:
        keep |= force_keep
        learn &= ~force_keep
    if force_drop is not None:
        keep &= ~force_drop
        learn &= ~force_drop
    dt = e.dtype
    gate = (probs - ad.detach(probs)) * learn.astype(dt) + keep.astype(dt)
    gated = e * gate.reshape(*gate.shape, 1)
    return PositiveGate(probs=probs, keep=keep, gated=gated)


def random_mask_embeddings(e: Tensor, keep_prob: float, rng: RngStream,
                           force_keep: np.ndarray, force_drop: np.ndarray) -> PositiveGate:
    """Baseline pair: keep each token with a fixed probability."""
    keep = (rng.uniform(e.shape[:2]) < keep_prob) | force_keep
    keep &= ~force_drop
    probs = Tensor(keep.astype(e.dtype))
    return PositiveGate(probs=probs, keep=keep, gated=e * keep[..., None].astype(e.dtype))
