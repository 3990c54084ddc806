"""Weak-supervision curve: few labelled target dialogues, then PG on the full target split."""
import argparse
import logging
from pathlib import Path

from rldst import (ModelConfig, PGConfig, StateNet, SyntheticSpec, TrainConfig, generate_synthetic_corpus,
                   run_weak_supervision_curve, train_supervised)
from rldst.evaluation import curve_to_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--source", default="taxi")
    ap.add_argument("--target", default="train")
    ap.add_argument("--sizes", default="10,20,30,40,50")
    ap.add_argument("--out", default="results/weak")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--pg-lr", type=float, default=1e-4)
    ap.add_argument("--pg-batches", type=int, default=600)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    corpus = generate_synthetic_corpus(SyntheticSpec())
    model_cfg = ModelConfig(embed_dim=64, receptor_dim=16, turn_dim=64, hidden_dim=64, init_seed=args.seed)
    pretrained, _ = train_supervised(StateNet(model_cfg), corpus, TrainConfig(seed=args.seed), domain=args.source)
    sizes = [int(s) for s in args.sizes.split(",")]
    points = run_weak_supervision_curve(pretrained, corpus, args.target, sizes, TrainConfig(),
                                        PGConfig(learning_rate=args.pg_lr, max_batches=args.pg_batches),
                                        seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curve.csv").write_text(curve_to_csv(points))
    print(curve_to_csv(points), end="")


if __name__ == "__main__":
    main()
