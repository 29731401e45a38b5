"""Tokenization, corpus ingestion, batching and the synthetic corpus."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from ..taxonomy import ROOT, Taxonomy, TaxonomyError, build_taxonomy, validate_label_set
from ..text_encoder import CLS, PAD, SEP, SPECIAL_TOKENS, UNK, TokenBatch

log = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> list:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Document:
    text: str
    labels: frozenset  # label ids, root excluded


@dataclass
class Vocabulary:
    tokens: list
    min_freq: int = 1
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, text: str, max_len: int) -> list:
        body = [self.id(t) for t in tokenize(text)][: max_len - 2]
        return [CLS] + body + [SEP]

    def decode(self, ids: Iterable[int]) -> list:
        return [self.tokens[i] for i in ids]

    def name_ids(self, taxonomy: Taxonomy) -> list:
        return [[self.id(t) for t in tokenize(name)] for name in taxonomy.names]


def build_vocab(texts: Iterable[str], min_freq: int = 1, extra: Iterable[str] = ()) -> Vocabulary:
    """Reserved tokens first, then corpus tokens by descending frequency
    (ties alphabetical). ``extra`` tokens (label names) bypass the cutoff."""
    counts = Counter()
    n = 0
    for text in texts:
        counts.update(tokenize(text))
        n += 1
    if n == 0:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    keep = {t for t, c in counts.items() if c >= min_freq}
    for name in extra:
        keep.update(tokenize(name))
    keep -= set(SPECIAL_TOKENS)
    ordered = sorted(keep, key=lambda t: (-counts.get(t, 0), t))
    return Vocabulary(list(SPECIAL_TOKENS) + ordered, min_freq)


def build_vocab_and_tokenize(docs: list, taxonomy: Taxonomy, min_freq: int = 1,
                             max_len: int = 128) -> tuple:
    vocab = build_vocab((d.text for d in docs), min_freq, extra=taxonomy.names)
    return vocab, [vocab.encode(d.text, max_len) for d in docs]


def parse_record(record: dict, taxonomy: Taxonomy, where: str = "") -> Document:
    if not isinstance(record, dict) or not isinstance(record.get("text"), str) \
            or not isinstance(record.get("labels"), list):
        raise CorpusError(f"{where}malformed record; expected {{'text': str, 'labels': [str]}}")
    ids = set()
    for name in record["labels"]:
        if name == ROOT:
            continue
        try:
            ids.add(taxonomy.index(name))
        except TaxonomyError:
            raise CorpusError(f"{where}unknown label {name!r}") from None
    if not ids:
        raise CorpusError(f"{where}record has no labels")
    closed = taxonomy.closure(ids)
    if closed != ids:
        added = sorted(taxonomy.names[i] for i in closed - ids)
        log.warning("%sadded missing ancestors %s", where, added)
    return Document(record["text"], validate_label_set(taxonomy, closed))


def iter_corpus(path, taxonomy: Taxonomy) -> Iterator[Document]:
    """Stream one JSON record per line; labels are closed under fathers."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: {exc}") from None
            yield parse_record(record, taxonomy, f"line {lineno}: ")


def load_corpus(path, taxonomy: Taxonomy) -> list:
    return list(iter_corpus(path, taxonomy))


def write_corpus(path, docs: list, taxonomy: Taxonomy) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            names = [taxonomy.names[i] for i in sorted(d.labels)]
            fh.write(json.dumps({"text": d.text, "labels": names}) + "\n")


def label_matrix(docs: list, taxonomy: Taxonomy) -> np.ndarray:
    """(N, num_classes) targets; column j is label id j + 1."""
    y = np.zeros((len(docs), taxonomy.num_classes), dtype=np.float64)
    for r, d in enumerate(docs):
        for i in d.labels:
            y[r, i - 1] = 1
    return y


def make_batch(seqs: list, labels: np.ndarray, dtype=np.float32) -> TokenBatch:
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), PAD, dtype=np.int64)
    for r, s in enumerate(seqs):
        ids[r, :len(s)] = s
    return TokenBatch(ids=ids, pad_mask=ids == PAD, labels=np.asarray(labels, dtype=dtype))


@dataclass
class EncodedCorpus:
    docs: list
    seqs: list
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.docs)

    def batches(self, batch_size: int, order: Optional[np.ndarray] = None, dtype=np.float32):
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield idx, make_batch([self.seqs[i] for i in idx], self.labels[idx], dtype)


def encode_corpus(docs: list, vocab: Vocabulary, taxonomy: Taxonomy, max_len: int) -> EncodedCorpus:
    if not docs:
        raise CorpusError("empty corpus")
    return EncodedCorpus(docs, [vocab.encode(d.text, max_len) for d in docs], label_matrix(docs, taxonomy))


# -- synthetic corpus -------------------------------------------------------

_ONSETS = "b c d f g h j k l m n p r s t v w z br ch cl dr fl gr kr pl pr sh st tr".split()
_VOWELS = "a e i o u ai ea io ou".split()


def _words(rng: np.random.Generator, count: int, taken: set) -> list:
    out = []
    while len(out) < count:
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(rng.integers(2, 4)))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


@dataclass
class SyntheticCorpus:
    taxonomy: Taxonomy
    docs: list
    keywords: dict  # label id -> list of keyword tokens

    def keyword_tokens(self, doc: Document) -> set:
        return {w for i in doc.labels for w in self.keywords[i]}


def generate_synthetic_corpus(depth: int = 2, branching: int = 3, docs_per_leaf: int = 100,
                              keywords_per_label: int = 6, noise_ratio: float = 0.5,
                              doc_keywords: int = 3, seed: int = 0) -> SyntheticCorpus:
    """A complete ``branching``-ary tree of ``depth`` levels below the root
    and documents whose labels are determined by planted keywords.

    Each label's name is its first keyword. A document for leaf ``l`` draws
    ``doc_keywords`` keywords from every label on the root path of ``l``, fills
    up with shared noise words so that ``noise_ratio`` of the document is
    noise, and shuffles the tokens.
    """
    if depth < 1 or branching < 1 or docs_per_leaf < 1 or keywords_per_label < 1:
        raise ValueError("synthetic corpus parameters must be positive")
    rng = np.random.default_rng(seed)
    taken: set = set()
    pairs = []
    level = [ROOT]
    names = {}
    for lvl in range(depth):
        nxt = []
        for father in level:
            for _ in range(branching):
                words = _words(rng, keywords_per_label, taken)
                names[words[0]] = words
                pairs.append((father, words[0]))
                nxt.append(words[0])
        level = nxt
    leaves = level
    taxonomy = build_taxonomy(pairs)
    keywords = {taxonomy.index(n): w for n, w in names.items()}
    noise_vocab = _words(rng, max(4 * keywords_per_label * len(keywords), 50), taken)

    docs = []
    for leaf in leaves:
        path = taxonomy.root_path(taxonomy.index(leaf))
        n_kw = doc_keywords * len(path)
        if noise_ratio >= 1:
            raise ValueError("noise_ratio must be < 1")
        n_noise = int(round(n_kw * noise_ratio / (1 - noise_ratio)))
        for _ in range(docs_per_leaf):
            toks = []
            for lab in path:
                toks.extend(rng.choice(keywords[lab], size=doc_keywords))
            toks.extend(rng.choice(noise_vocab, size=n_noise))
            rng.shuffle(toks)
            docs.append(Document(" ".join(toks), frozenset(path)))
    order = rng.permutation(len(docs))
    return SyntheticCorpus(taxonomy, [docs[i] for i in order], keywords)
