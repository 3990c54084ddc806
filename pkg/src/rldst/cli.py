"""Command-line entry point: ``rldst <subcommand>`` or ``python -m rldst``.

Every command writes machine-readable tables (CSV/JSON) next to its main output
and prints a short human-readable summary. Wall-clock timings go to separate
``*.timing.csv`` files so that metric tables are byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import numerics as nx
from .corpus import CorpusError, SyntheticSpec, generate_synthetic_corpus, load_corpus, save_corpus
from .evaluation import (curve_to_csv, run_setup_matrix, run_weak_supervision_curve, weak_subset)
from .metrics import evaluate_dialogues
from .pg import PGConfig, finetune_pg
from .statenet import CheckpointError, ModelConfig, StateNet, load_checkpoint, save_checkpoint
from .supervised import TrainConfig, train_supervised

log = logging.getLogger("rldst")

METRIC_KEYS = {"turn-acc": "turn_acc", "jga": "jga", "reward": "reward"}


class CLIError(Exception):
    pass


# -- config files --------------------------------------------------------------

def _read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CLIError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise CLIError(f"{path}: expected a JSON object")
    return doc


def load_train_config(path) -> tuple:
    """TrainConfig fields plus an optional ``model`` object of ModelConfig fields."""
    doc = _read_json(path) if path else {}
    model = ModelConfig.from_dict(doc.pop("model", {}))
    train = TrainConfig.from_dict(doc)
    train.validate()
    return train, model


def load_pg_config(path) -> PGConfig:
    cfg = PGConfig.from_dict(_read_json(path) if path else {})
    cfg.validate()
    return cfg


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _check_domain(corpus, name):
    if name not in corpus.ontology.domains:
        raise CLIError(f"domain {name!r} not in corpus (have {corpus.domains})")


# -- subcommands ---------------------------------------------------------------

def cmd_gen_corpus(args):
    spec = SyntheticSpec(domains=args.domains, slots=args.slots, values=args.values,
                         dialogues=args.dialogues, turns=args.turns, overlap=args.overlap, seed=args.seed)
    spec.validate()
    corpus = generate_synthetic_corpus(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out)
    rows = ["domain,slots,train,dev,test"]
    for d in corpus.domains:
        rows.append(",".join([d, str(len(corpus.ontology.slots(d)))] +
                             [str(len(corpus.domain_split(s, d))) for s in ("train", "dev", "test")]))
    _write(_sidecar(out, ".stats.csv"), "\n".join(rows) + "\n")
    print(f"wrote {out}: domains {', '.join(corpus.domains)}")
    print("\n".join(rows))


def cmd_pretrain(args):
    corpus = load_corpus(args.corpus)
    _check_domain(corpus, args.domain)
    train_cfg, model_cfg = load_train_config(args.config)
    t0 = time.perf_counter()
    best, history = train_supervised(StateNet(model_cfg), corpus, train_cfg, domain=args.domain)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, {"stage": "pretrain", "domain": args.domain, "train_config": train_cfg,
                           "best_epoch": history.best_epoch}, out)
    _write(_sidecar(out, ".history.csv"), history.to_csv(timing=False))
    _write(_sidecar(out, ".timing.csv"), _timing_csv(history, time.perf_counter() - t0))
    scores = evaluate_dialogues(best, corpus.domain_split("dev", args.domain), corpus.ontology)
    print(f"pretrained on {args.domain}: {len(history.epochs)} epochs, best epoch {history.best_epoch}")
    print(f"dev turn accuracy {scores['turn_acc']:.4f}, joint goal accuracy {scores['jga']:.4f}")
    print(f"checkpoint {out}")


def _timing_csv(history, total: float) -> str:
    lines = ["epoch,seconds"] + [f"{r.epoch},{r.seconds:.3f}" for r in history.epochs]
    return "\n".join(lines + [f"total,{total:.3f}"]) + "\n"


def cmd_evaluate(args):
    corpus = load_corpus(args.corpus)
    _check_domain(corpus, args.domain)
    model, _ = load_checkpoint(args.model)
    dialogues = corpus.domain_split(args.split, args.domain)
    scores = evaluate_dialogues(model, dialogues, corpus.ontology)
    keys = [METRIC_KEYS[args.metric]] if args.metric else list(METRIC_KEYS.values())
    table = "metric,value\n" + "".join(f"{k},{scores[k]:.6f}\n" for k in keys)
    if args.out:
        _write(Path(args.out), table)
    sys.stdout.write(table)
    print(f"# {args.domain}/{args.split}: {scores['dialogues']} dialogues, {scores['turns']} turns "
          f"({scores['empty_gold_turns']} with empty gold label)", file=sys.stderr)


def cmd_finetune_pg(args):
    corpus = load_corpus(args.corpus)
    _check_domain(corpus, args.target_domain)
    model, meta = load_checkpoint(args.model)
    cfg = load_pg_config(args.config)
    t0 = time.perf_counter()
    best, history = finetune_pg(model, corpus, cfg, args.target_domain)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, {"stage": "finetune-pg", "target_domain": args.target_domain, "pg_config": cfg,
                           "parent": meta, "rollbacks": history.rollbacks}, out)
    _write(_sidecar(out, ".history.csv"), history.to_csv())
    _write(_sidecar(out, ".timing.csv"), f"total_seconds\n{time.perf_counter() - t0:.3f}\n")
    test = corpus.domain_split("test", args.target_domain)
    before = evaluate_dialogues(model, test, corpus.ontology)["turn_acc"]
    after = evaluate_dialogues(best, test, corpus.ontology)["turn_acc"]
    print(f"policy-gradient fine-tuning on {args.target_domain}: {len(history.batches)} batches, "
          f"{history.rollbacks} rollbacks, best dev reward {history.best_dev_reward:.4f}")
    print(f"test turn accuracy {before:.4f} -> {after:.4f}")
    print(f"checkpoint {out}")


def cmd_finetune_weak(args):
    corpus = load_corpus(args.corpus)
    _check_domain(corpus, args.target_domain)
    model, meta = load_checkpoint(args.model)
    train_cfg, _ = load_train_config(args.config)
    try:
        subset = weak_subset(corpus, args.target_domain, args.samples, train_cfg.seed)
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    best, history = train_supervised(model, corpus, train_cfg, domain=args.target_domain, train=subset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, {"stage": "finetune-weak", "target_domain": args.target_domain,
                           "samples": args.samples, "train_ids": [d.id for d in subset],
                           "train_config": train_cfg, "parent": meta}, out)
    _write(_sidecar(out, ".history.csv"), history.to_csv(timing=False))
    acc = evaluate_dialogues(best, corpus.domain_split("test", args.target_domain), corpus.ontology)["turn_acc"]
    print(f"weakly supervised fine-tuning on {args.samples} {args.target_domain} dialogues: "
          f"best epoch {history.best_epoch}, test turn accuracy {acc:.4f}")
    print(f"checkpoint {out}")


def cmd_transfer_matrix(args):
    corpus = load_corpus(args.corpus)
    train_cfg, model_cfg = load_train_config(args.train_config)
    pg_cfg = load_pg_config(args.pg_config)
    t0 = time.perf_counter()
    matrix = run_setup_matrix(corpus, train_cfg, pg_cfg, model_cfg, seed=args.seed)
    out = Path(args.out)
    _write(out / "matrix.csv", matrix.to_csv())
    _write(out / "summary.txt", matrix.summary() + "\n")
    _write(out / "config.json", _dump({"seed": args.seed, "train_config": asdict(train_cfg),
                                       "model_config": asdict(model_cfg), "pg_config": asdict(pg_cfg),
                                       "domains": matrix.domains}))
    for source, hist in matrix.pretrain_histories.items():
        _write(out / f"pretrain_{source}.csv", hist.to_csv(timing=False))
    for (source, target), run in matrix.pg_histories.items():
        _write(out / f"pg_{source}_{target}.csv", run.to_csv())
    _write(out / "timing.csv", f"total_seconds\n{time.perf_counter() - t0:.3f}\n")
    print(matrix.summary())
    print(f"tables in {out}")


def cmd_weak_curve(args):
    corpus = load_corpus(args.corpus)
    _check_domain(corpus, args.target_domain)
    model, _ = load_checkpoint(args.model)
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError as exc:
        raise CLIError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from exc
    if not sizes:
        raise CLIError("--sizes is empty")
    train_cfg, _ = load_train_config(args.train_config)
    pg_cfg = load_pg_config(args.pg_config)
    t0 = time.perf_counter()
    points = run_weak_supervision_curve(model, corpus, args.target_domain, sizes, train_cfg, pg_cfg,
                                        seed=args.seed)
    out = Path(args.out)
    _write(out / "curve.csv", curve_to_csv(points))
    summary = "\n".join([f"{'s':>4}{'weak':>9}{'pg':>9}{'gain':>9}"] +
                        [f"{p.s:>4}{p.weak_accuracy:9.4f}{p.pg_accuracy:9.4f}{p.pg_gain:9.4f}" for p in points])
    _write(out / "summary.txt", summary + "\n")
    _write(out / "config.json", _dump({"seed": args.seed, "sizes": sizes, "target_domain": args.target_domain,
                                       "train_config": asdict(train_cfg), "pg_config": asdict(pg_cfg)}))
    _write(out / "timing.csv", f"total_seconds\n{time.perf_counter() - t0:.3f}\n")
    print(summary)
    print(f"tables in {out}")


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rldst", description="Dialogue state tracking with reward-only domain transfer.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic multi-domain corpus")
    p.add_argument("--domains", type=int, default=2)
    p.add_argument("--slots", type=int, default=4)
    p.add_argument("--values", type=int, default=6)
    p.add_argument("--dialogues", type=int, default=250, help="dialogues per domain before splitting")
    p.add_argument("--turns", type=int, default=6)
    p.add_argument("--overlap", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain", help="supervised pretraining on one domain")
    p.add_argument("--corpus", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--config", help="JSON training config (optional 'model' object)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("evaluate", help="score a checkpoint on a domain split")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--metric", choices=sorted(METRIC_KEYS))
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--out", help="also write the table to this path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("finetune-pg", help="policy-gradient fine-tuning from dialogue-level reward")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--target-domain", required=True)
    p.add_argument("--config", help="JSON policy-gradient config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune_pg)

    p = sub.add_parser("finetune-weak", help="supervised fine-tuning on a few target dialogues")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--target-domain", required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune_weak)

    p = sub.add_parser("transfer-matrix", help="all setups on every domain pair")
    p.add_argument("--corpus", required=True)
    p.add_argument("--train-config")
    p.add_argument("--pg-config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer_matrix)

    p = sub.add_parser("weak-curve", help="weak supervision followed by policy gradient, per sample size")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--target-domain", required=True)
    p.add_argument("--sizes", default="10,20,30,40,50")
    p.add_argument("--train-config")
    p.add_argument("--pg-config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_weak_curve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (CLIError, CorpusError, CheckpointError, nx.InvalidArgumentError, ValueError, OSError) as exc:
        print(f"rldst {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
