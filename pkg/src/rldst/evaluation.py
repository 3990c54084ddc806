"""Experimental protocol: transfer matrix and weak-supervision curve."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import Corpus
from .metrics import evaluate_dialogues, turn_level_accuracy
from .pg import PGConfig, finetune_pg
from .statenet import ModelConfig, StateNet
from .supervised import TrainConfig, train_supervised

log = logging.getLogger(__name__)

PAPER_SIZES = (10, 20, 30, 40, 50)


@dataclass
class TransferCell:
    source: str
    target: str
    bl_accuracy: float
    pg_accuracy: float

    @property
    def in_domain(self) -> bool:
        return self.source == self.target


@dataclass
class TransferMatrix:
    domains: list
    cells: list = field(default_factory=list)
    pretrain_histories: dict = field(default_factory=dict)
    pg_histories: dict = field(default_factory=dict)

    def cell(self, source: str, target: str) -> TransferCell:
        for c in self.cells:
            if c.source == source and c.target == target:
                return c
        raise KeyError((source, target))

    def averages(self) -> dict:
        """Per target: mean (bl, pg) over the off-diagonal cells of its column."""
        out = {}
        for t in self.domains:
            off = [c for c in self.cells if c.target == t and not c.in_domain]
            if off:
                out[t] = (float(np.mean([c.bl_accuracy for c in off])),
                          float(np.mean([c.pg_accuracy for c in off])))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", "target", "bl_accuracy", "pg_accuracy", "in_domain"])
        for c in self.cells:
            w.writerow([c.source, c.target, f"{c.bl_accuracy:.6f}", f"{c.pg_accuracy:.6f}", int(c.in_domain)])
        for t, (bl, pg) in self.averages().items():
            w.writerow(["AVERAGE", t, f"{bl:.6f}", f"{pg:.6f}", 0])
        return buf.getvalue()

    def summary(self) -> str:
        corner = "pretrain \\ finetune"
        width = max([len(d) for d in self.domains] + [len(corner)]) + 2
        lines = [corner.ljust(width) + "".join(f"{t:>16}" for t in self.domains),
                 " " * width + "".join(f"{'bl':>8}{'pg':>8}" for _ in self.domains)]
        for s in self.domains:
            row = s.ljust(width)
            for t in self.domains:
                c = self.cell(s, t)
                row += f"{c.bl_accuracy:8.2f}{c.pg_accuracy:8.2f}"
            lines.append(row)
        avg = self.averages()
        row = "averages".ljust(width)
        for t in self.domains:
            bl, pg = avg.get(t, (float("nan"), float("nan")))
            row += f"{bl:8.2f}{pg:8.2f}"
        lines.append(row)
        return "\n".join(lines)


def run_setup_matrix(corpus: Corpus, train_config: TrainConfig, pg_config: PGConfig,
                     model_config: ModelConfig | None = None, seed: int = 0,
                     domains: Sequence[str] | None = None) -> TransferMatrix:
    """All four setups on every (source, target) pair, scored on test turn accuracy.

    Off-diagonal: zero-shot accuracy of the source model vs. after PG on the
    target. Diagonal: supervised accuracy vs. after in-domain PG on the same
    train/dev data.
    """
    domains = list(domains or corpus.domains)
    if len(domains) < 2:
        raise nx.InvalidArgumentError("the transfer matrix needs at least two domains")
    model_config = model_config or ModelConfig()
    matrix = TransferMatrix(domains)
    for i, source in enumerate(domains):
        init = StateNet(ModelConfig(**{**asdict(model_config), "init_seed": seed + i}))
        tc = TrainConfig(**{**asdict(train_config), "seed": seed + i})
        pretrained, hist = train_supervised(init, corpus, tc, domain=source)
        matrix.pretrain_histories[source] = hist
        for j, target in enumerate(domains):
            test = corpus.domain_split("test", target)
            bl = turn_level_accuracy(pretrained, test, corpus.ontology)
            pc = PGConfig(**{**asdict(pg_config), "seed": seed + 1000 * (i + 1) + j})
            tuned, run = finetune_pg(pretrained, corpus, pc, target)
            matrix.pg_histories[(source, target)] = run
            pg = turn_level_accuracy(tuned, test, corpus.ontology)
            matrix.cells.append(TransferCell(source, target, bl, pg))
            log.info("%s -> %s: bl %.3f pg %.3f", source, target, bl, pg)
    return matrix


@dataclass
class CurvePoint:
    s: int
    weak_accuracy: float
    pg_accuracy: float

    @property
    def pg_gain(self) -> float:
        return self.pg_accuracy - self.weak_accuracy


def curve_to_csv(points: Sequence[CurvePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["s", "weak_accuracy", "pg_accuracy", "pg_gain"])
    for p in points:
        w.writerow([p.s, f"{p.weak_accuracy:.6f}", f"{p.pg_accuracy:.6f}", f"{p.pg_gain:.6f}"])
    return buf.getvalue()


def weak_subset(corpus: Corpus, target: str, s: int, seed: int) -> list:
    """First ``s`` dialogues of a seeded shuffle of the target train split."""
    train = corpus.domain_split("train", target)
    if s < 1 or s > len(train):
        raise nx.InvalidArgumentError(f"sample size {s} outside 1..{len(train)}")
    order = np.random.default_rng(seed).permutation(len(train))
    return [train[k] for k in order[:s]]


def run_weak_supervision_curve(pretrained: StateNet, corpus: Corpus, target: str,
                               sizes: Sequence[int] = PAPER_SIZES,
                               train_config: TrainConfig | None = None,
                               pg_config: PGConfig | None = None, seed: int = 0) -> list:
    """For each s: supervised fine-tuning on s target dialogues, then PG on the full split."""
    train_config = train_config or TrainConfig()
    pg_config = pg_config or PGConfig()
    n_train = len(corpus.domain_split("train", target))
    if not sizes or min(sizes) < 1 or max(sizes) > n_train:
        raise nx.InvalidArgumentError(f"sizes {list(sizes)} exceed the {n_train} target training dialogues")
    test = corpus.domain_split("test", target)
    points = []
    for s in sizes:
        subset = weak_subset(corpus, target, s, seed)
        weak, _ = train_supervised(pretrained, corpus, train_config, domain=target, train=subset)
        weak_acc = turn_level_accuracy(weak, test, corpus.ontology)
        tuned, _ = finetune_pg(weak, corpus, pg_config, target)
        points.append(CurvePoint(s, weak_acc, turn_level_accuracy(tuned, test, corpus.ontology)))
        log.info("s=%d weak %.3f pg %.3f", s, points[-1].weak_accuracy, points[-1].pg_accuracy)
    return points


def evaluation_table(model: StateNet, corpus: Corpus, domain: str, split: str = "test") -> dict:
    return evaluate_dialogues(model, corpus.domain_split(split, domain), corpus.ontology)
