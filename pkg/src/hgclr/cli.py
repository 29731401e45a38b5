"""Command line entry point: ``hgclr {train,eval,sweep,synth,export-labels,gradcheck}``."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .pipeline.data import encode_corpus, generate_synthetic_corpus, load_corpus, write_corpus
from .pipeline.training import (
    LR_PRESETS,
    TrainConfig,
    dump_positives,
    evaluate_f1,
    export_label_weights,
    load_checkpoint,
    save_metrics,
    train,
)
from .taxonomy import load_taxonomy

log = logging.getLogger("hgclr")


def _floats(text: str) -> list:
    return [float(x) for x in text.split(",") if x]


def add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--test")
    p.add_argument("--out", default="run")
    p.add_argument("--gamma", type=float, default=0.02)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--gumbel-temp", type=float, default=1.0)
    p.add_argument("--lr", default="desk",
                   help="learning rate, or a preset: " + ", ".join(f"{k}={v}" for k, v in LR_PRESETS.items()))
    p.add_argument("--batch-size", type=int, default=12)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--max-len", type=int, default=128)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--pair-strategy", choices=["hierarchy", "random_mask", "dropout", "none"],
                   default="hierarchy")
    p.add_argument("--random-keep", type=float, default=0.5,
                   help="keep probability for --pair-strategy random_mask")
    p.add_argument("--no-graph", action="store_true")
    p.add_argument("--no-name-emb", action="store_true")
    p.add_argument("--no-spatial", action="store_true")
    p.add_argument("--no-edge", action="store_true")
    p.add_argument("--mean-reduction", action="store_true")
    p.add_argument("--dump-positives", metavar="PATH",
                   help="write the kept tokens of each dev document after training")


def config_from_args(args) -> TrainConfig:
    lr = LR_PRESETS[args.lr] if args.lr in LR_PRESETS else float(args.lr)
    return TrainConfig(gamma=args.gamma, lam=args.lam, tau=args.tau, gumbel_temp=args.gumbel_temp,
                       lr=lr, batch_size=args.batch_size, max_epochs=args.epochs,
                       patience=args.patience, seed=args.seed, hidden=args.hidden,
                       layers=args.layers, heads=args.heads, max_len=args.max_len,
                       threshold=args.threshold, pair_strategy=args.pair_strategy,
                       random_keep=args.random_keep, no_graph=args.no_graph,
                       use_name=not args.no_name_emb, use_spatial=not args.no_spatial,
                       use_edge=not args.no_edge, mean_reduction=args.mean_reduction)


def _run_one(args, config: TrainConfig, out: Path) -> dict:
    tax = load_taxonomy(args.taxonomy)
    train_docs = load_corpus(args.train, tax)
    dev_docs = load_corpus(args.dev, tax)
    trainer = train(config, tax, train_docs, dev_docs, out_dir=out)
    result = {"config": asdict(config), "best_epoch": trainer.state.best_epoch,
              "dev": evaluate_f1(trainer.model, trainer.dev_corpus, config.threshold).summary()}
    if args.test:
        test = encode_corpus(load_corpus(args.test, tax), trainer.vocab, tax, config.max_len)
        result["test"] = evaluate_f1(trainer.model, test, config.threshold).summary()
    if getattr(args, "dump_positives", None):
        dump_positives(trainer.model, trainer.dev_corpus, trainer.vocab, args.dump_positives, seed=config.seed)
    return result


def cmd_train(args) -> int:
    out = Path(args.out)
    result = _run_one(args, config_from_args(args), out)
    save_metrics(out / "metrics.jsonl", [result])
    print(json.dumps({k: v for k, v in result.items() if k != "config"}))
    return 0


def cmd_sweep(args) -> int:
    base = config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    best = None
    for gamma, lam in itertools.product(_floats(args.gammas), _floats(args.lambdas)):
        cfg = TrainConfig(**{**asdict(base), "gamma": gamma, "lam": lam})
        result = _run_one(args, cfg, out / f"gamma={gamma}_lambda={lam}")
        rec = {"gamma": gamma, "lambda": lam, **result["dev"]}
        records.append(rec)
        print(json.dumps(rec))
        if best is None or rec["macro_f1"] > best["macro_f1"]:
            best = rec
    save_metrics(out / "sweep.jsonl", records)
    print(json.dumps({"best": best}))
    return 0


def cmd_eval(args) -> int:
    trainer = load_checkpoint(args.checkpoint)
    docs = load_corpus(args.test, trainer.taxonomy)
    corpus = encode_corpus(docs, trainer.vocab, trainer.taxonomy, trainer.config.max_len)
    m = evaluate_f1(trainer.model, corpus, args.threshold)
    record = {**m.summary(), "labels": trainer.taxonomy.names[1:], "f1": m.f1,
              "precision": m.precision, "recall": m.recall}
    if args.out:
        save_metrics(args.out, [record])
    print(json.dumps(m.summary()))
    return 0


def cmd_synth(args) -> int:
    syn = generate_synthetic_corpus(depth=args.depth, branching=args.branching,
                                    docs_per_leaf=args.docs_per_leaf,
                                    keywords_per_label=args.keywords, noise_ratio=args.noise,
                                    doc_keywords=args.doc_keywords, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tax = syn.taxonomy
    with open(out / "taxonomy.tsv", "w", encoding="utf-8") as fh:
        for f, c in tax.edges:
            fh.write(f"{tax.names[f]}\t{tax.names[c]}\n")
    n = len(syn.docs)
    n_dev = int(round(n * args.dev_fraction))
    n_test = int(round(n * args.test_fraction))
    n_train = n - n_dev - n_test
    write_corpus(out / "train.jsonl", syn.docs[:n_train], tax)
    write_corpus(out / "dev.jsonl", syn.docs[n_train:n_train + n_dev], tax)
    if n_test:
        write_corpus(out / "test.jsonl", syn.docs[n_train + n_dev:], tax)
    with open(out / "keywords.json", "w", encoding="utf-8") as fh:
        json.dump({tax.names[i]: w for i, w in syn.keywords.items()}, fh, indent=1)
    print(json.dumps({"labels": tax.k, "docs": n, "train": n_train, "dev": n_dev, "test": n_test}))
    return 0


def cmd_export(args) -> int:
    trainer = load_checkpoint(args.checkpoint)
    score = export_label_weights(trainer.model, args.out)
    print(json.dumps({"rows": trainer.taxonomy.num_classes, "sibling_cohesion": score}))
    return 0


def cmd_gradcheck(args) -> int:
    from . import checks
    results = {f"primitive:{k}": v for k, v in checks.check_primitives(range(args.seeds)).items()}
    results["graph_layer"] = checks.check_graph_layer()
    results["full_loss"] = checks.check_full_loss()
    ok = True
    for name, err in results.items():
        passed = err < args.tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:32s} max rel err {err:.3e}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hgclr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid search over gamma and lambda")
    add_train_args(p)
    p.add_argument("--gammas", default="0.005,0.02")
    p.add_argument("--lambdas", default="0.1,0.3")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic keyword corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--branching", type=int, default=3)
    p.add_argument("--docs-per-leaf", type=int, default=267)
    p.add_argument("--keywords", type=int, default=30)
    p.add_argument("--doc-keywords", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.8)
    p.add_argument("--dev-fraction", type=float, default=1 / 6)
    p.add_argument("--test-fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-labels", help="write classifier rows and sibling cohesion")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
