"""Training loop with early stopping, F1 evaluation, checkpoints and exports."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from ..nn import Adam
from ..positive_sampler import build_positive_embeddings, sample_token_probs, token_label_scores
from ..taxonomy import Taxonomy, build_taxonomy, sibling_groups
from ..tensor_autodiff import NonFiniteError, RngStream
from ..text_encoder import CLS, PAD, SEP
from .data import EncodedCorpus, Vocabulary, build_vocab, encode_corpus
from .model import HGCLR, ModelConfig

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LR_PRESETS = {"desk": 1e-3, "finetune": 3e-5}


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.02
    lam: float = 0.1
    tau: float = 1.0
    gumbel_temp: float = 1.0
    lr: float = 1e-3
    batch_size: int = 12
    max_epochs: int = 30
    patience: int = 6
    seed: int = 0
    no_graph: bool = False
    pair_strategy: str = "hierarchy"
    use_name: bool = True
    use_spatial: bool = True
    use_edge: bool = True
    mean_reduction: bool = False
    random_keep: float = 0.5
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    graph_heads: int = 4
    graph_layers: int = 1
    max_len: int = 128
    dropout: float = 0.1
    threshold: float = 0.5
    min_freq: int = 1

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_h=self.hidden, n_layers=self.layers, n_heads=self.heads,
                           max_len=self.max_len, dropout=self.dropout, graph_heads=self.graph_heads,
                           graph_layers=self.graph_layers, no_graph=self.no_graph,
                           use_name=self.use_name, use_spatial=self.use_spatial, use_edge=self.use_edge,
                           pair_strategy=self.pair_strategy, gamma=self.gamma, lam=self.lam,
                           tau=self.tau, gumbel_temp=self.gumbel_temp, random_keep=self.random_keep,
                           reduction="mean" if self.mean_reduction else "sum")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- metrics ----------------------------------------------------------------

@dataclass
class Metrics:
    micro_f1: float
    macro_f1: float
    precision: list
    recall: list
    f1: list
    path_consistency: Optional[float] = None

    def summary(self) -> dict:
        return {"micro_f1": self.micro_f1, "macro_f1": self.macro_f1,
                "path_consistency": self.path_consistency}


def _safe_div(a, b):
    return np.divide(a, b, out=np.zeros(np.shape(a), dtype=np.float64), where=np.asarray(b) > 0)


def f1_scores(pred: np.ndarray, gold: np.ndarray) -> Metrics:
    """Micro-F1 from pooled counts, Macro-F1 as the unweighted label mean;
    a label with no gold and no predicted positives scores 0."""
    pred = np.asarray(pred, dtype=bool)
    gold = np.asarray(gold, dtype=bool)
    tp = (pred & gold).sum(axis=0).astype(np.float64)
    fp = (pred & ~gold).sum(axis=0).astype(np.float64)
    fn = (~pred & gold).sum(axis=0).astype(np.float64)
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * tp, 2 * tp + fp + fn)
    denom = 2 * tp.sum() + fp.sum() + fn.sum()
    micro = float(2 * tp.sum() / denom) if denom > 0 else 0.0
    return Metrics(micro_f1=micro, macro_f1=float(f1.mean()), precision=precision.tolist(),
                   recall=recall.tolist(), f1=f1.tolist())


def path_consistency(pred: np.ndarray, taxonomy: Taxonomy) -> float:
    """Share of predicted label sets that are closed under fathers."""
    fathers = np.array([lab.father for lab in taxonomy.labels[1:]])
    ok = 0
    for row in np.asarray(pred, dtype=bool):
        members = np.flatnonzero(row) + 1
        ok += all(fathers[m - 1] == 0 or row[fathers[m - 1] - 1] for m in members)
    return ok / len(pred)


def predict(model: HGCLR, corpus: EncodedCorpus, batch_size: int = 64) -> np.ndarray:
    out = np.zeros(corpus.labels.shape, dtype=np.float64)
    for idx, batch in corpus.batches(batch_size, dtype=model.dtype):
        out[idx] = model.predict_proba(batch)
    return out


def evaluate_f1(model: HGCLR, corpus: EncodedCorpus, threshold: float = 0.5,
                batch_size: int = 64) -> Metrics:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    if len(corpus) == 0:
        raise ValueError("cannot evaluate an empty corpus")
    pred = predict(model, corpus, batch_size) > threshold
    m = f1_scores(pred, corpus.labels > 0.5)
    m.path_consistency = path_consistency(pred, model.taxonomy)
    return m


# -- training ---------------------------------------------------------------

@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_score: float = -1.0
    best_epoch: int = -1
    bad_epochs: int = 0
    stopped: bool = False
    history: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)


class Trainer:
    """Owns the model, optimizer, random streams and early-stopping state."""

    def __init__(self, config: TrainConfig, taxonomy: Taxonomy, vocab: Vocabulary,
                 train_corpus: EncodedCorpus, dev_corpus: EncodedCorpus, dtype=np.float32):
        self.config = config
        self.taxonomy = taxonomy
        self.vocab = vocab
        self.train_corpus = train_corpus
        self.dev_corpus = dev_corpus
        self.dtype = dtype
        self.model = HGCLR(taxonomy, len(vocab), vocab.name_ids(taxonomy), config.model_config(),
                           seed=config.seed, dtype=dtype)
        self.optimizer = Adam(self.model.parameters(), lr=config.lr)
        self.rngs = {name: RngStream(config.seed, name) for name in ("gumbel", "dropout", "mask", "shuffle")}
        self.state = TrainState()
        self.best_params = [p.data.copy() for p in self.model.parameters()]
        self.keep_fraction = []

    def train_epoch(self) -> dict:
        cfg = self.config
        order = self.rngs["shuffle"].permutation(len(self.train_corpus))
        totals = np.zeros(4)
        kept = seen = 0
        for _, batch in self.train_corpus.batches(cfg.batch_size, order, self.dtype):
            self.optimizer.zero_grad()
            try:
                out = self.model.training_loss(batch, self.rngs["gumbel"], self.rngs["dropout"], self.rngs["mask"])
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {self.state.epoch} step {self.state.step}: {exc}") from exc
            value = out.loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"epoch {self.state.epoch} step {self.state.step}: loss={value}")
            out.loss.backward()
            self.model.after_step()
            self.optimizer.step()
            self.model.after_step()
            self.state.step += 1
            self.state.step_losses.append(value)
            totals += (value, out.cls, out.cls_pos, out.con)
            if out.gate is not None:
                body = (batch.ids != PAD) & (batch.ids != CLS) & (batch.ids != SEP)
                kept += int((out.gate.keep & body).sum())
                seen += int(body.sum())
        n_batches = -(-len(self.train_corpus) // cfg.batch_size)
        stats = dict(zip(("loss", "cls", "cls_pos", "con"), (totals / n_batches).tolist()))
        stats["keep_fraction"] = kept / seen if seen else None
        return stats

    def fit(self, max_epochs: Optional[int] = None, on_epoch=None) -> TrainState:
        """Train until ``patience`` epochs without a dev Macro-F1 gain or
        ``max_epochs``; the best parameters are restored at the end."""
        cfg = self.config
        limit = cfg.max_epochs if max_epochs is None else max_epochs
        st = self.state
        while not st.stopped and st.epoch < limit:
            stats = self.train_epoch()
            metrics = evaluate_f1(self.model, self.dev_corpus, cfg.threshold)
            st.epoch += 1
            record = {"epoch": st.epoch, **stats, **metrics.summary()}
            st.history.append(record)
            log.info("epoch %d loss %.4f dev micro %.4f macro %.4f", st.epoch, stats["loss"],
                     metrics.micro_f1, metrics.macro_f1)
            if metrics.macro_f1 > st.best_score:
                st.best_score = metrics.macro_f1
                st.best_epoch = st.epoch
                st.bad_epochs = 0
                self.best_params = [p.data.copy() for p in self.model.parameters()]
            else:
                st.bad_epochs += 1
                if st.bad_epochs >= cfg.patience:
                    st.stopped = True
            if on_epoch is not None:
                on_epoch(self, record)
        return st

    def restore_best(self) -> None:
        for p, best in zip(self.model.parameters(), self.best_params):
            p.data[...] = best


def prepare(config: TrainConfig, taxonomy: Taxonomy, train_docs: list, dev_docs: list,
            vocab: Optional[Vocabulary] = None) -> tuple:
    if vocab is None:
        vocab = build_vocab((d.text for d in train_docs), config.min_freq, extra=taxonomy.names)
    train_c = encode_corpus(train_docs, vocab, taxonomy, config.max_len)
    dev_c = encode_corpus(dev_docs, vocab, taxonomy, config.max_len)
    return vocab, train_c, dev_c


def train(config: TrainConfig, taxonomy: Taxonomy, train_docs: list, dev_docs: list,
          out_dir=None, dtype=np.float32) -> Trainer:
    """Fit a model and leave the best-dev parameters in ``trainer.model``.

    With ``out_dir`` the per-epoch metrics go to ``history.jsonl`` and the
    best model to ``best.ckpt``.
    """
    vocab, train_c, dev_c = prepare(config, taxonomy, train_docs, dev_docs)
    trainer = Trainer(config, taxonomy, vocab, train_c, dev_c, dtype)
    hist_fh = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        hist_fh = open(Path(out_dir) / "history.jsonl", "w", encoding="utf-8")

    def on_epoch(_, record):
        if hist_fh is not None:
            hist_fh.write(json.dumps(record) + "\n")
            hist_fh.flush()

    try:
        trainer.fit(on_epoch=on_epoch)
    finally:
        if hist_fh is not None:
            hist_fh.close()
    trainer.restore_best()
    if out_dir is not None:
        save_checkpoint(trainer, Path(out_dir) / "best.ckpt")
    return trainer


# -- checkpoints ------------------------------------------------------------

def _arrays(trainer: Trainer) -> list:
    out = [(f"param.{n}", p.data) for n, p in trainer.model.named_parameters()]
    out += [(f"adam_m.{i}", m) for i, m in enumerate(trainer.optimizer.m)]
    out += [(f"adam_v.{i}", v) for i, v in enumerate(trainer.optimizer.v)]
    out += [(f"best.{i}", b) for i, b in enumerate(trainer.best_params)]
    return out


def save_checkpoint(trainer: Trainer, path) -> None:
    """Write ``path/manifest.json`` and ``path/values.bin`` (little-endian)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / "values.bin", "wb") as fh:
        for name, arr in _arrays(trainer):
            le = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                            "offset": offset, "nbytes": len(raw)})
            fh.write(raw)
            offset += len(raw)
    st = trainer.state
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": np.dtype(trainer.dtype).name,
        "config": asdict(trainer.config),
        "taxonomy": [[trainer.taxonomy.names[f], trainer.taxonomy.names[c]] for f, c in trainer.taxonomy.edges],
        "vocab": trainer.vocab.tokens,
        "min_freq": trainer.vocab.min_freq,
        "rng": {k: r.state() for k, r in trainer.rngs.items()},
        "optimizer": {"t": trainer.optimizer.t, "lr": trainer.optimizer.lr,
                      "betas": list(trainer.optimizer.betas), "eps": trainer.optimizer.eps},
        "state": asdict(st),
        "arrays": entries,
    }
    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def load_checkpoint(path, train_docs: Optional[list] = None, dev_docs: Optional[list] = None,
                    taxonomy: Optional[Taxonomy] = None) -> Trainer:
    """Rebuild a Trainer; corpora are optional (needed only to keep training).

    Passing ``taxonomy`` forces the model onto that tree, and any parameter
    whose shape no longer fits raises ``CheckpointError``.
    """
    path = Path(path)
    with open(path / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')!r}, "
                              f"expected {FORMAT_VERSION}")
    config = TrainConfig.from_dict(manifest["config"])
    if taxonomy is None:
        taxonomy = build_taxonomy([tuple(p) for p in manifest["taxonomy"]])
    vocab = Vocabulary(manifest["vocab"], manifest["min_freq"])
    dtype = np.dtype(manifest["dtype"]).type
    empty = EncodedCorpus([], [], np.zeros((0, taxonomy.num_classes)))
    train_c = encode_corpus(train_docs, vocab, taxonomy, config.max_len) if train_docs else empty
    dev_c = encode_corpus(dev_docs, vocab, taxonomy, config.max_len) if dev_docs else empty
    trainer = Trainer(config, taxonomy, vocab, train_c, dev_c, dtype)

    blob = (path / "values.bin").read_bytes()
    arrays = {}
    for e in manifest["arrays"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])

    def fill(target: np.ndarray, name: str) -> None:
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks array {name!r}")
        src = arrays[name]
        if src.shape != target.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {src.shape}, model {target.shape}")
        target[...] = src

    for n, p in trainer.model.named_parameters():
        fill(p.data, f"param.{n}")
    for i, m in enumerate(trainer.optimizer.m):
        fill(m, f"adam_m.{i}")
    for i, v in enumerate(trainer.optimizer.v):
        fill(v, f"adam_v.{i}")
    for i, b in enumerate(trainer.best_params):
        fill(b, f"best.{i}")
    trainer.optimizer.t = manifest["optimizer"]["t"]
    for k, r in manifest["rng"].items():
        trainer.rngs[k] = RngStream(r["seed"], r["name"], r["counter"])
    trainer.state = TrainState(**manifest["state"])
    return trainer


# -- analysis ---------------------------------------------------------------

def sibling_cohesion(weights: np.ndarray, taxonomy: Taxonomy) -> float:
    """Mean cosine between rows of sibling labels minus mean cosine between
    rows of labels with different fathers. Row j is label id j + 1."""
    w = weights / np.linalg.norm(weights, axis=1, keepdims=True)
    cos = w @ w.T
    group = np.zeros(taxonomy.num_classes, dtype=np.int64)
    for g, members in enumerate(sibling_groups(taxonomy)):
        group[np.asarray(members) - 1] = g
    same = group[:, None] == group[None, :]
    off = ~np.eye(len(group), dtype=bool)
    intra = cos[same & off]
    cross = cos[~same]
    if not intra.size or not cross.size:
        return 0.0
    return float(intra.mean() - cross.mean())


def export_label_weights(model: HGCLR, path) -> float:
    """Write classifier rows as ``name<TAB>w_0<TAB>...`` after a header line
    carrying the sibling-cohesion score; returns that score."""
    w = model.classifier.weight.data.astype(np.float64)
    score = sibling_cohesion(w, model.taxonomy)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# sibling_cohesion\t{score!r}\n")
        for name, row in zip(model.taxonomy.names[1:], w):
            fh.write(name + "\t" + "\t".join(repr(float(x)) for x in row) + "\n")
    return score


def retain_rates(model: HGCLR, corpus: EncodedCorpus, vocab: Vocabulary, keywords: dict,
                 seed: int = 12345, batch_size: int = 64) -> tuple:
    """Fraction of planted keyword tokens and of other body tokens that the
    sampler keeps, using fresh Gumbel noise."""
    kw_ids = {}
    for lab, words in keywords.items():
        kw_ids[lab] = {vocab.id(w) for w in words}
    noise = RngStream(seed, "gumbel-eval")
    cfg = model.config
    kept_kw = n_kw = kept_other = n_other = 0
    feats = model.label_features()
    for idx, batch in corpus.batches(batch_size, dtype=model.dtype):
        e = model.encoder.embed_tokens(batch.ids)
        probs = sample_token_probs(token_label_scores(e, feats, model.sampler), batch.labels,
                                   cfg.gumbel_temp, noise)
        keep = build_positive_embeddings(e, probs, cfg.gamma).keep
        for r, doc_i in enumerate(idx):
            planted = set().union(*(kw_ids[i] for i in corpus.docs[doc_i].labels))
            for pos, tok in enumerate(batch.ids[r]):
                if tok in (PAD, CLS, SEP):
                    continue
                if tok in planted:
                    n_kw += 1
                    kept_kw += keep[r, pos]
                else:
                    n_other += 1
                    kept_other += keep[r, pos]
    return kept_kw / max(n_kw, 1), kept_other / max(n_other, 1)


def dump_positives(model: HGCLR, corpus: EncodedCorpus, vocab: Vocabulary, path,
                   seed: int = 0, batch_size: int = 64) -> None:
    """One line per document: tokens kept for the positive sample, dropped
    tokens shown as ``_``."""
    noise = RngStream(seed, "gumbel-dump")
    cfg = model.config
    feats = model.label_features()
    with open(path, "w", encoding="utf-8") as fh:
        for idx, batch in corpus.batches(batch_size, dtype=model.dtype):
            e = model.encoder.embed_tokens(batch.ids)
            probs = sample_token_probs(token_label_scores(e, feats, model.sampler), batch.labels,
                                       cfg.gumbel_temp, noise)
            keep = build_positive_embeddings(e, probs, cfg.gamma).keep
            for r, doc_i in enumerate(idx):
                toks = [vocab.tokens[t] if keep[r, p] else "_"
                        for p, t in enumerate(batch.ids[r]) if t not in (PAD, CLS, SEP)]
                fh.write(f"{doc_i}\t{' '.join(toks)}\n")


def save_metrics(path, records: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


__all__ = [
    "TrainConfig", "Trainer", "Metrics", "train", "evaluate_f1", "f1_scores", "save_checkpoint",
    "load_checkpoint", "export_label_weights", "sibling_cohesion", "retain_rates", "dump_positives",
    "TrainingDiverged", "CheckpointError", "LR_PRESETS",
]
