"""Turn-level supervised pretraining with early stopping on dev joint goal accuracy."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .corpus import Corpus, Dialogue, Ontology
from .metrics import evaluate_dialogues
from .statenet import StateNet, TurnPrediction, forward_batch, forward_dialogue

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    early_stop_patience: int = 20
    max_epochs: int = 200
    seed: int = 0

    def validate(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise ValueError(f"invalid training config {self}")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_jga: float
    dev_turn_acc: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    steps: int = 0

    METRIC_COLUMNS = ("epoch", "train_loss", "dev_jga", "dev_turn_acc")

    def to_csv(self, timing: bool = True) -> str:
        """CSV table; ``timing=False`` drops the wall-clock column."""
        cols = self.METRIC_COLUMNS + (("seconds",) if timing else ())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.epochs:
            row = asdict(r)
            w.writerow([row["epoch"]] + [f"{row[c]:.6f}" for c in cols[1:]])
        return buf.getvalue()


def _label_targets(pred: TurnPrediction, gold_label):
    slot_index = {s: i for i, s in enumerate(pred.slots)}
    target = np.zeros(len(pred.slots))
    picks = []
    for slot, value in gold_label:
        i = slot_index.get(slot)
        if i is None:
            raise nx.InvalidArgumentError(f"gold slot {slot!r} not in the active ontology")
        try:
            j = pred.values[i].index(value)
        except ValueError:
            raise nx.InvalidArgumentError(f"gold value {value!r} not in ontology for {slot!r}") from None
        target[i] = 1.0
        picks.append((i, j))
    return target, picks


def turn_loss(pred: TurnPrediction, gold_label) -> nx.Node:
    """Presence BCE summed over slots plus value CE for each gold slot."""
    return batch_turn_loss(pred, [gold_label]) if pred.presence.value.ndim == 1 else \
        _raise_batched()


def _raise_batched():
    raise nx.InvalidArgumentError("turn_loss takes a single-dialogue prediction; use batch_turn_loss")


def batch_turn_loss(pred: TurnPrediction, gold_labels: Sequence) -> nx.Node:
    """Summed turn loss over the rows of a (possibly batched) prediction.

    ``gold_labels[b]`` is None for rows whose dialogue has already ended.
    """
    single = pred.presence.value.ndim == 1
    S = len(pred.slots)
    target = np.zeros((len(gold_labels), S))
    weight = np.zeros((len(gold_labels), 1))
    rows, slots, cols = [], [], []
    for b, gold in enumerate(gold_labels):
        if gold is None:
            continue
        t, picks = _label_targets(pred, gold)
        target[b], weight[b] = t, 1.0
        for i, j in picks:
            rows.append(b)
            slots.append(i)
            cols.append(j)
    if single:
        target, weight = target[0], weight[0]
    p = nx.clip(pred.presence, PROB_CLAMP, 1.0 - PROB_CLAMP)
    bce = -nx.reduce_sum((target * nx.log(p) + (1.0 - target) * nx.log(1.0 - p)) * weight)
    if not slots:
        return bce
    index = (np.array(slots), np.array(cols)) if single else \
        (np.array(rows), np.array(slots), np.array(cols))
    picked = nx.take(pred.value_dist, index)
    return bce - nx.reduce_sum(nx.log(nx.clip(picked, PROB_CLAMP, 1.0)))


def dialogue_loss(model: StateNet, dialogue: Dialogue, ontology, graph: nx.Graph) -> nx.Node:
    """Sum of turn losses over the dialogue."""
    preds = forward_dialogue(model, dialogue, ontology, graph)
    total = None
    for pred, turn in zip(preds, dialogue.turns):
        loss = turn_loss(pred, turn.turn_label)
        total = loss if total is None else total + loss
    return total


def batch_loss(model: StateNet, batch: Sequence[Dialogue], ontology, graph: nx.Graph) -> nx.Node:
    """Sum of turn losses over every turn of a same-domain batch."""
    preds, active = forward_batch(model, batch, ontology, graph)
    total = None
    for t, pred in enumerate(preds):
        golds = [d.turns[t].turn_label if active[t, b] else None for b, d in enumerate(batch)]
        loss = batch_turn_loss(pred, golds)
        total = loss if total is None else total + loss
    return total


def batch_gradient(model: StateNet, batch: Sequence[Dialogue], ontology):
    """Mean turn loss over all turns in ``batch`` and its gradient."""
    n_turns = sum(len(d.turns) for d in batch)
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    total = 0.0
    for group in _by_domain(batch):
        g = nx.Graph()
        loss = batch_loss(model, group, ontology, g)
        total += float(loss.value)
        for k, gk in nx.backward(g, loss).items():
            grads[k] += gk
    return total / n_turns, {k: v / n_turns for k, v in grads.items()}


def _by_domain(batch):
    groups: dict = {}
    for d in batch:
        groups.setdefault(d.domain, []).append(d)
    return list(groups.values())


def train_supervised(model: StateNet, corpus: Corpus, config: TrainConfig,
                     domain: str | None = None, train: Sequence[Dialogue] | None = None,
                     dev: Sequence[Dialogue] | None = None):
    """Minibatch Adam over dialogues; returns (best model, TrainHistory).

    ``train``/``dev`` override the corpus splits (used for few-shot runs).
    """
    config.validate()
    domain = domain or _single_domain(corpus)
    train = list(corpus.domain_split("train", domain) if train is None else train)
    dev = list(corpus.domain_split("dev", domain) if dev is None else dev)
    if not train:
        raise nx.InvalidArgumentError("empty training split")
    ontology = corpus.ontology
    history = TrainHistory()
    best = model.clone()
    if config.max_epochs == 0:
        return best, history

    rng = np.random.default_rng(config.seed)
    live = model.clone()
    state = nx.AdamState()
    best_jga, since = -math.inf, 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        losses, turns = 0.0, 0
        for start in range(0, len(train), config.batch_size):
            batch = [train[i] for i in order[start:start + config.batch_size]]
            loss, grads = batch_gradient(live, batch, ontology)
            n = sum(len(d.turns) for d in batch)
            losses += loss * n
            turns += n
            live.params, state = nx.adam_step(live.params, grads, state, config.learning_rate)
            history.steps += 1
        scores = evaluate_dialogues(live, dev, ontology) if dev else {"jga": 0.0, "turn_acc": 0.0}
        history.epochs.append(EpochRecord(epoch, losses / turns, scores["jga"], scores["turn_acc"],
                                          time.perf_counter() - t0))
        log.info("epoch %d loss %.4f dev jga %.4f turn acc %.4f", epoch, losses / turns,
                 scores["jga"], scores["turn_acc"])
        if scores["jga"] > best_jga:
            best_jga, since = scores["jga"], 0
            best = live.clone()
            history.best_epoch = epoch
        else:
            since += 1
            if since >= config.early_stop_patience:
                break
    return best, history


def _single_domain(corpus: Corpus) -> str:
    domains = corpus.domains
    if len(domains) != 1:
        raise nx.InvalidArgumentError(f"corpus has domains {domains}; pass domain=")
    return domains[0]
