"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training-based criteria (5-10) share one set of runs on a synthetic
keyword corpus, built once per session.
"""

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import pytest

from hgclr.checks import check_full_loss, check_graph_layer, check_primitives
from hgclr.losses import ntxent_batch_loss
from hgclr.pipeline.data import generate_synthetic_corpus
from hgclr.pipeline.training import (
    TrainConfig,
    Trainer,
    evaluate_f1,
    load_checkpoint,
    prepare,
    retain_rates,
    save_checkpoint,
    sibling_cohesion,
    train,
)
from hgclr.positive_sampler import build_positive_embeddings
from hgclr.taxonomy import build_taxonomy, node_distance
from hgclr.tensor_autodiff import Tensor

SEEDS = (0, 1, 2)
CORPUS = dict(depth=2, branching=3, docs_per_leaf=267, keywords_per_label=30, noise_ratio=0.8,
              doc_keywords=1, seed=0)
N_TRAIN, N_DEV = 2000, 400
BASE = dict(gamma=0.25, lam=0.1, max_epochs=30, patience=6, hidden=64)
VARIANTS = {
    "full": {},
    "no_graph": {"no_graph": True},
    "lambda_0": {"lam": 0.0},
    "random_mask": {"pair_strategy": "random_mask"},
    "dropout": {"pair_strategy": "dropout"},
    "baseline": {"pair_strategy": "none", "lam": 0.0, "no_graph": True},
}


@dataclass
class Run:
    macro_f1: float
    best_epoch: int
    epochs: int
    seconds: float
    cohesion: float
    keep_fraction: float = math.nan
    retain: tuple = ()
    trainer: object = field(default=None, repr=False)


@pytest.fixture(scope="session")
def corpus():
    syn = generate_synthetic_corpus(**CORPUS)
    return syn, syn.docs[:N_TRAIN], syn.docs[N_TRAIN:N_TRAIN + N_DEV]


def _fit(syn, train_docs, dev_docs, cfg: TrainConfig) -> Run:
    start = time.perf_counter()
    tr = train(cfg, syn.taxonomy, train_docs, dev_docs)
    seconds = time.perf_counter() - start
    fractions = [h["keep_fraction"] for h in tr.state.history if h["keep_fraction"] is not None]
    return Run(macro_f1=tr.state.best_score, best_epoch=tr.state.best_epoch, epochs=tr.state.epoch,
               seconds=seconds, cohesion=sibling_cohesion(tr.model.classifier.weight.data, syn.taxonomy),
               keep_fraction=float(np.mean(fractions)) if fractions else math.nan, trainer=tr)


@pytest.fixture(scope="session")
def runs(corpus):
    syn, train_docs, dev_docs = corpus
    out = {name: {} for name in VARIANTS}
    for seed in SEEDS:
        for name, overrides in VARIANTS.items():
            extra = dict(overrides)
            if name == "random_mask":
                # same expected number of kept tokens as the learned sampler
                extra["random_keep"] = out["full"][seed].keep_fraction
            run = _fit(syn, train_docs, dev_docs, TrainConfig(**{**BASE, **extra, "seed": seed}))
            if name == "full":
                run.retain = retain_rates(run.trainer.model, run.trainer.dev_corpus, run.trainer.vocab, syn.keywords)
            if not (name == "full" and seed == 0):
                run.trainer = None
            out[name][seed] = run
    return out


def mean(runs, variant, attr="macro_f1"):
    return float(np.mean([getattr(r, attr) for r in runs[variant].values()]))


def test_criterion_01_gradients(criterion):
    start = time.perf_counter()
    prims = check_primitives(range(10))
    graph = check_graph_layer(0)
    full = check_full_loss(0)
    seconds = time.perf_counter() - start
    worst = max(max(prims.values()), graph, full)
    criterion(1, "finite-difference gradients", worst < 1e-4 and seconds < 120,
              f"primitives {max(prims.values()):.2e}, graph layer {graph:.2e}, full loss {full:.2e}, "
              f"{seconds:.1f}s")


def test_criterion_02_gate_contract(criterion):
    rng = np.random.default_rng(2024)
    bad_forward = bad_backward = 0
    for _ in range(100):
        N, n, d = (int(x) for x in rng.integers(1, [5, 17, 9]))
        e = Tensor(rng.normal(size=(N, n, d)), requires_grad=True)
        p = Tensor(rng.uniform(size=(N, n)), requires_grad=True)
        gamma = float(rng.uniform(0.01, 0.99))
        gate = build_positive_embeddings(e, p, gamma)
        hard = p.data > gamma
        bad_forward += not np.array_equal(gate.gated.data, np.where(hard[..., None], e.data, 0.0))
        g = rng.normal(size=e.shape)
        (gate.gated * g).sum().backward()
        symbolic = np.where(hard, (g * e.data).sum(-1), 0.0)
        bad_backward += not np.allclose(p.grad, symbolic, rtol=1e-12, atol=1e-12)
        bad_backward += not np.array_equal(e.grad, np.where(hard[..., None], g, 0.0))
    criterion(2, "gate forward is the hard mask, gradient on P is e_i / 0",
              bad_forward == 0 and bad_backward == 0,
              f"100 cases, {bad_forward} forward and {bad_backward} backward mismatches")


def _ntxent_brute(c, cp, tau):
    z = np.concatenate([c, cp])
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    m, n = len(z), len(c)
    sim = np.array([[z[a] @ z[b] / tau for b in range(m)] for a in range(m)])
    terms = []
    for a in range(m):
        denom = sum(math.exp(sim[a, b]) for b in range(m) if b != a)
        terms.append(-math.log(math.exp(sim[a, (a + n) % m]) / denom))
    return sum(terms) / m


def test_criterion_03_ntxent_oracle(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    single = []
    for n in range(1, 9):
        for _ in range(5):
            c, cp = rng.normal(size=(n, 6)), rng.normal(size=(n, 6))
            tau = float(rng.uniform(0.1, 2.0))
            got = ntxent_batch_loss(Tensor(c), Tensor(cp), tau).item()
            worst = max(worst, abs(got - _ntxent_brute(c, cp, tau)))
            if n == 1:
                single.append(got)
    criterion(3, "NT-Xent equals brute-force enumeration", worst < 1e-6 and all(v == 0.0 for v in single),
              f"max abs diff {worst:.2e}, N=1 values {sorted(set(single))}")


def test_criterion_04_distances(criterion):
    rng = np.random.default_rng(11)
    mismatches = 0
    sizes = []
    for _ in range(50):
        k = int(rng.integers(2, 201))
        sizes.append(k)
        pairs = [(f"n{rng.integers(0, i)}".replace("n0", "root"), f"n{i}") for i in range(1, k)]
        tax = build_taxonomy(pairs)
        d = np.full((k, k), np.inf)
        np.fill_diagonal(d, 0)
        for f, c in tax.edges:
            d[f, c] = d[c, f] = 1
        for m in range(k):
            d = np.minimum(d, d[:, m:m + 1] + d[m:m + 1, :])
        got = np.array([[node_distance(tax, i, j) for j in range(k)] for i in range(k)])
        mismatches += int((got != d).sum())
    criterion(4, "tree distances equal Floyd-Warshall", mismatches == 0,
              f"50 trees, k from {min(sizes)} to {max(sizes)}, {mismatches} mismatching pairs")


def test_criterion_05_synthetic_end_to_end(criterion, runs):
    r = runs["full"][0]
    criterion(5, "full model reaches dev Macro-F1 >= 0.90 within 30 epochs, < 10 min",
              r.macro_f1 >= 0.90 and r.best_epoch <= 30 and r.seconds < 600,
              f"Macro-F1 {r.macro_f1:.4f} at epoch {r.best_epoch}, {r.epochs} epochs in {r.seconds:.0f}s")


def test_criterion_06_ablations(criterion, runs):
    full = mean(runs, "full")
    deltas = {v: full - mean(runs, v) for v in ("no_graph", "lambda_0")}
    criterion(6, "full >= each ablation (3-seed mean Macro-F1)", all(d >= 0 for d in deltas.values()),
              f"full {full:.4f}; " + ", ".join(f"full - {v} = {d:+.4f}" for v, d in deltas.items()))


def test_criterion_07_pair_strategies(criterion, runs):
    h, r, d = (mean(runs, v) for v in ("full", "random_mask", "dropout"))
    keep = [round(runs["random_mask"][s].keep_fraction, 3) for s in SEEDS]
    per_seed = {v: [round(runs[v][s].macro_f1, 4) for s in SEEDS] for v in ("full", "random_mask", "dropout")}
    criterion(7, "hierarchy >= random masking >= dropout (3-seed mean)", h >= r >= d,
              f"hierarchy {h:.4f}, random mask {r:.4f} (keep {keep}), dropout {d:.4f}; per seed {per_seed}")


def test_criterion_08_sibling_cohesion(criterion, runs):
    full, base = mean(runs, "full", "cohesion"), mean(runs, "baseline", "cohesion")
    per_seed = [(round(runs["full"][s].cohesion, 4), round(runs["baseline"][s].cohesion, 4)) for s in SEEDS]
    criterion(8, "classifier-row sibling cohesion higher than the plain baseline", full > base,
              f"full {full:.4f} vs baseline {base:.4f}; per seed (full, baseline) {per_seed}")


def test_criterion_09_keyword_recovery(criterion, runs):
    kw = float(np.mean([runs["full"][s].retain[0] for s in SEEDS]))
    other = float(np.mean([runs["full"][s].retain[1] for s in SEEDS]))
    criterion(9, "keyword tokens kept at >= 2x the rate of noise tokens", kw >= 2 * other,
              f"keywords {kw:.3f}, noise {other:.3f}, ratio {kw / max(other, 1e-12):.2f}")


def test_criterion_10_determinism_and_persistence(criterion, corpus, runs, tmp_path):
    syn, train_docs, dev_docs = corpus
    cfg = TrainConfig(**BASE)
    same = {}
    for dtype in (np.float32, np.float64):
        trajectories = []
        for _ in range(2):
            vocab, tr_c, dev_c = prepare(cfg, syn.taxonomy, train_docs, dev_docs)
            tr = Trainer(cfg, syn.taxonomy, vocab, tr_c, dev_c, dtype)
            tr.fit(1)
            trajectories.append(np.asarray(tr.state.step_losses).tobytes())
        same[np.dtype(dtype).name] = trajectories[0] == trajectories[1]

    trained = runs["full"][0].trainer
    before = evaluate_f1(trained.model, trained.dev_corpus)
    save_checkpoint(trained, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck", dev_docs=dev_docs)
    after = evaluate_f1(back.model, back.dev_corpus)
    criterion(10, "bit-exact reruns and lossless checkpoint round trip",
              all(same.values()) and asdict(after) == asdict(before),
              f"identical trajectories {same}, Macro-F1 {before.macro_f1:.6f} -> {after.macro_f1:.6f}")
