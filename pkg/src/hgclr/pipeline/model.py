"""The full training-time model and its inference-time restriction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import tensor_autodiff as ad
from ..graph_encoder import GraphEncoder
from ..losses import Classifier, ProjectionHead, classification_loss, ntxent_batch_loss, project, total_loss
from ..nn import Module
from ..positive_sampler import (
    PositiveGate,
    Sampler,
    build_positive_embeddings,
    random_mask_embeddings,
    sample_token_probs,
    token_label_scores,
)
from ..taxonomy import Taxonomy
from ..tensor_autodiff import RngStream, Tensor
from ..text_encoder import CLS, PAD, SEP, EncoderConfig, TextEncoder, TokenBatch

PAIR_STRATEGIES = ("hierarchy", "random_mask", "dropout", "none")


@dataclass
class ModelConfig:
    d_h: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 128
    dropout: float = 0.1
    graph_heads: int = 4
    graph_layers: int = 1
    no_graph: bool = False
    use_name: bool = True
    use_spatial: bool = True
    use_edge: bool = True
    pair_strategy: str = "hierarchy"
    gamma: float = 0.02
    lam: float = 0.1
    tau: float = 1.0
    gumbel_temp: float = 1.0
    random_keep: float = 0.5
    reduction: str = "sum"

    def __post_init__(self):
        if self.pair_strategy not in PAIR_STRATEGIES:
            raise ValueError(f"pair_strategy must be one of {PAIR_STRATEGIES}")


@dataclass
class StepOutput:
    loss: Tensor
    cls: float
    cls_pos: float
    con: float
    gate: Optional[PositiveGate] = None


class HGCLR(Module):
    def __init__(self, taxonomy: Taxonomy, vocab_size: int, name_ids: list,
                 config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.taxonomy = taxonomy
        self.dtype = dtype
        init = RngStream(seed, "init")
        enc_cfg = EncoderConfig(vocab_size=vocab_size, d_h=config.d_h, n_layers=config.n_layers,
                                n_heads=config.n_heads, max_len=config.max_len, dropout=config.dropout)
        self.encoder = TextEncoder(enc_cfg, init, dtype)
        self.graph = GraphEncoder(taxonomy, name_ids, self.encoder.token_emb, config.d_h,
                                  config.graph_heads, init, dtype,
                                  n_layers=0 if config.no_graph else config.graph_layers,
                                  use_name=config.use_name, use_spatial=config.use_spatial,
                                  use_edge=config.use_edge)
        self.sampler = Sampler(config.d_h, init, dtype)
        self.head = ProjectionHead(config.d_h, init, dtype)
        self.classifier = Classifier(config.d_h, taxonomy.num_classes, init, dtype)

    def after_step(self) -> None:
        self.encoder.pin_zero_token()

    def label_features(self) -> Tensor:
        """Non-root rows of the graph encoder output."""
        return self.graph()[1:]

    def training_loss(self, batch: TokenBatch, gumbel: RngStream | np.ndarray | None,
                      dropout_rng: Optional[RngStream], mask_rng: Optional[RngStream] = None) -> StepOutput:
        cfg = self.config
        ids = batch.ids
        y = batch.labels
        e = self.encoder.embed_tokens(ids)
        h = self.encoder.encode(e, batch.pad_mask, dropout_rng).pooled
        cls = classification_loss(self.classifier.logits(h), y, cfg.reduction)

        force_keep = (ids == CLS) | (ids == SEP)
        force_drop = ids == PAD
        gate = None
        h_pos = None
        if cfg.pair_strategy == "hierarchy":
            scores = token_label_scores(e, self.label_features(), self.sampler)
            probs = sample_token_probs(scores, y, cfg.gumbel_temp, gumbel)
            gate = build_positive_embeddings(e, probs, cfg.gamma, force_keep, force_drop)
            h_pos = self.encoder.encode(gate.gated, batch.pad_mask, dropout_rng).pooled
        elif cfg.pair_strategy == "random_mask":
            gate = random_mask_embeddings(e, cfg.random_keep, mask_rng, force_keep, force_drop)
            h_pos = self.encoder.encode(gate.gated, batch.pad_mask, dropout_rng).pooled
        elif cfg.pair_strategy == "dropout":
            h_pos = self.encoder.encode(e, batch.pad_mask, dropout_rng).pooled

        cls_pos = con = None
        if h_pos is not None:
            cls_pos = classification_loss(self.classifier.logits(h_pos), y, cfg.reduction)
            if cfg.lam > 0:
                con = ntxent_batch_loss(project(h, self.head), project(h_pos, self.head), cfg.tau)
        loss = total_loss(cls, cls_pos, con, cfg.lam)
        return StepOutput(loss=loss, cls=cls.item(),
                          cls_pos=0.0 if cls_pos is None else cls_pos.item(),
                          con=0.0 if con is None else con.item(), gate=gate)

    def predict_proba(self, batch: TokenBatch) -> np.ndarray:
        """Inference path: text encoder and classifier only."""
        e = self.encoder.embed_tokens(batch.ids)
        h = self.encoder.encode(e, batch.pad_mask, None).pooled
        return ad.sigmoid(self.classifier.logits(h)).data
