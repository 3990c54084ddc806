"""Policy-gradient transfer from a dialogue-level Jaccard reward.

The action for a dialogue is a sampled belief state: at every turn each slot
draws presence ~ Bernoulli(presence_prob) and, when present, a value from its
value distribution; the turn samples are folded exactly like the greedy
``decode_final_belief``. The frozen pretrained copy supplies the baseline.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .corpus import BeliefState, Corpus, Dialogue, SlotValue
from .metrics import evaluate_dialogues, jaccard_reward
from .statenet import PRESENCE_THRESHOLD, StateNet, TurnPrediction, decode_final_belief, forward_batch, forward_dialogue

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12

__all__ = ["PGConfig", "SampledAction", "HillClimbState", "jaccard_reward", "sample_action",
           "baseline_reward", "pg_update", "hill_climb_step", "finetune_pg", "RunHistory"]


@dataclass
class PGConfig:
    batch_size: int = 16
    eval_every_batches: int = 5
    rollback_patience: int = 15
    entropy_weight: float = 0.01
    learning_rate: float = 1e-3
    max_batches: int = 2000
    presence_threshold: float = PRESENCE_THRESHOLD
    sample_presence: bool = True
    seed: int = 0

    def validate(self):
        if (self.batch_size < 1 or self.eval_every_batches < 1 or self.rollback_patience < 1
                or self.learning_rate <= 0 or self.max_batches < 0 or self.entropy_weight < 0):
            raise ValueError(f"invalid policy-gradient config {self}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PGConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown policy-gradient config fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class SampledAction:
    belief: BeliefState
    log_prob: nx.Node
    entropy: nx.Node
    turn_actions: list = field(default_factory=list)   # per turn: (present mask, value index)


# -- sampling ------------------------------------------------------------------

def _bernoulli_entropy(p: nx.Node) -> nx.Node:
    pc = nx.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(pc * nx.log(pc) + (1.0 - pc) * nx.log(1.0 - pc))


def _categorical_entropy(dist: nx.Node) -> nx.Node:
    # padded entries are exactly zero and contribute 0 * log(clamp) = 0
    return -nx.reduce_sum(dist * nx.log(nx.clip(dist, PROB_CLAMP, 1.0)), axis=-1)


def _sample_turn(pred: TurnPrediction, rng: np.random.Generator, sample_presence: bool,
                 threshold: float):
    """Draws for one (possibly batched) turn: (present bool array, value index array)."""
    p = pred.presence.value
    dist = pred.value_dist.value
    u_presence = rng.random(p.shape)
    u_value = rng.random(p.shape)
    present = (u_presence < p) if sample_presence else (p > threshold)
    cdf = np.cumsum(dist, axis=-1)
    counts = np.array([len(v) for v in pred.values])
    idx = np.sum(cdf < u_value[..., None] * cdf[..., -1:], axis=-1)
    idx = np.minimum(idx, counts - 1)
    return present, idx


def _turn_terms(pred: TurnPrediction, present: np.ndarray, idx: np.ndarray, sample_presence: bool):
    """Per-row log-probability and entropy nodes, summed over slots."""
    presence = pred.presence
    dist = pred.value_dist
    pc = nx.clip(presence, PROB_CLAMP, 1.0 - PROB_CLAMP)
    x = present.astype(np.float64)
    if sample_presence:
        logp = x * nx.log(pc) + (1.0 - x) * nx.log(1.0 - pc)
        ent = _bernoulli_entropy(presence) + presence * _categorical_entropy(dist)
    else:
        logp = None
        ent = x * _categorical_entropy(dist)
    lead = np.indices(idx.shape)
    picked = nx.take(dist, tuple(lead) + (idx,))
    value_logp = x * nx.log(nx.clip(picked, PROB_CLAMP, 1.0))
    logp = value_logp if logp is None else logp + value_logp
    return nx.reduce_sum(logp, axis=-1), nx.reduce_sum(ent, axis=-1)


def sample_action(preds: Sequence[TurnPrediction] | TurnPrediction, rng: np.random.Generator,
                  sample_presence: bool = True, threshold: float = PRESENCE_THRESHOLD) -> SampledAction:
    """Sample a final belief state from a dialogue's turn predictions.

    ``log_prob`` is the sum of the logs of every factor actually drawn;
    ``entropy`` sums, per turn and slot, the Bernoulli entropy plus
    presence_prob times the value entropy. Both are live graph nodes.
    """
    if isinstance(preds, TurnPrediction):
        preds = [preds]
    belief = BeliefState()
    log_prob = entropy = None
    actions = []
    for pred in preds:
        present, idx = _sample_turn(pred, rng, sample_presence, threshold)
        lp, ent = _turn_terms(pred, present, idx, sample_presence)
        log_prob = lp if log_prob is None else log_prob + lp
        entropy = ent if entropy is None else entropy + ent
        belief = belief.update(SlotValue(s, pred.values[i][idx[i]])
                               for i, s in enumerate(pred.slots) if present[i])
        actions.append((present, idx))
    return SampledAction(belief, log_prob, entropy, actions)


def score_action(preds: Sequence[TurnPrediction], action: SampledAction, sample_presence: bool = True) -> nx.Node:
    """Log-probability of an already sampled action under ``preds``."""
    total = None
    for pred, (present, idx) in zip(preds, action.turn_actions):
        lp, _ = _turn_terms(pred, present, idx, sample_presence)
        total = lp if total is None else total + lp
    return total


# -- baseline and update -------------------------------------------------------

def baseline_reward(frozen: StateNet, dialogue: Dialogue, ontology, gold_final=None,
                    threshold: float = PRESENCE_THRESHOLD) -> float:
    """Greedy final-belief reward of the frozen model."""
    gold_final = dialogue.final_belief if gold_final is None else gold_final
    return jaccard_reward(decode_final_belief(forward_dialogue(frozen, dialogue, ontology), threshold), gold_final)


class BaselineCache:
    """Frozen-model rewards, computed once per dialogue id."""

    def __init__(self, frozen: StateNet, ontology, threshold: float = PRESENCE_THRESHOLD):
        self.frozen = frozen
        self.ontology = ontology
        self.threshold = threshold
        self._cache: dict = {}

    def __call__(self, dialogue: Dialogue) -> float:
        r = self._cache.get(dialogue.id)
        if r is None:
            r = self._cache[dialogue.id] = baseline_reward(self.frozen, dialogue, self.ontology,
                                                           threshold=self.threshold)
        return r


@dataclass
class BatchStats:
    mean_reward: float
    mean_advantage: float
    mean_entropy: float
    grad_norm: float


def pg_surrogate(model: StateNet, batch: Sequence[Dialogue], ontology, baseline, config: PGConfig,
                 rng: np.random.Generator, graph: nx.Graph):
    """Build mean[log_prob * A + alpha * H] over a same-domain batch.

    Returns (objective node, rewards, advantages, entropies).
    """
    preds, active = forward_batch(model, batch, ontology, graph)
    B = len(batch)
    log_prob = entropy = None
    beliefs = [dict() for _ in range(B)]
    for t, pred in enumerate(preds):
        present, idx = _sample_turn(pred, rng, config.sample_presence, config.presence_threshold)
        present = present & active[t][:, None]
        lp, ent = _turn_terms(pred, present, idx, config.sample_presence)
        live_rows = active[t].astype(np.float64)
        lp, ent = lp * live_rows, ent * live_rows
        log_prob = lp if log_prob is None else log_prob + lp
        entropy = ent if entropy is None else entropy + ent
        for b in range(B):
            for i, slot in enumerate(pred.slots):
                if present[b, i]:
                    beliefs[b][slot] = pred.values[i][idx[b, i]]
    rewards = np.array([jaccard_reward(beliefs[b].items(), d.final_belief) for b, d in enumerate(batch)])
    base = np.array([baseline(d) for d in batch])
    adv = rewards - base
    objective = nx.reduce_sum(log_prob * adv + entropy * config.entropy_weight) * (1.0 / B)
    return objective, rewards, adv, entropy.value


def pg_update(model: StateNet, batch: Sequence[Dialogue], ontology, baseline, config: PGConfig,
              state: nx.AdamState, rng: np.random.Generator):
    """One Adam ascent step on the surrogate objective. Returns (model, state, BatchStats).

    ``baseline`` is a frozen model or a callable dialogue -> B_goal.
    """
    if not batch:
        raise nx.InvalidArgumentError("empty batch")
    if isinstance(baseline, StateNet):
        baseline = BaselineCache(baseline, ontology, config.presence_threshold)
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    rewards, advs, ents = [], [], []
    groups: dict = {}
    for d in batch:
        groups.setdefault(d.domain, []).append(d)
    for group in groups.values():
        g = nx.Graph()
        obj, r, a, h = pg_surrogate(model, group, ontology, baseline, config, rng, g)
        w = len(group) / len(batch)
        for k, gk in nx.backward(g, obj).items():
            grads[k] -= w * gk
        rewards += list(r)
        advs += list(a)
        ents += list(h)
    norm = math.sqrt(sum(float(np.sum(v * v)) for v in grads.values()))
    params, state = nx.adam_step(model.params, grads, state, config.learning_rate)
    return model.with_params(params), state, BatchStats(float(np.mean(rewards)), float(np.mean(advs)),
                                                        float(np.mean(ents)), norm)


# -- hill climbing ---------------------------------------------------------------

@dataclass
class HillClimbState:
    best_dev_reward: float = -math.inf
    best_params: dict | None = None
    evals_since_improvement: int = 0
    rollback_count: int = 0


def hill_climb_step(state: HillClimbState, model: StateNet, dev_reward: float, patience: int = 15):
    """Save on strict improvement; after ``patience`` stale evaluations restore the best.

    Returns (decision, state, model) with decision in saved/continued/rolled_back.
    The caller resets its optimizer and sampling stream on rollback.
    """
    if dev_reward > state.best_dev_reward:
        snap = {k: v.copy() for k, v in model.params.items()}
        return "saved", HillClimbState(dev_reward, snap, 0, state.rollback_count), model
    stale = state.evals_since_improvement + 1
    if stale >= patience:
        restored = model.with_params({k: v.copy() for k, v in state.best_params.items()})
        return "rolled_back", HillClimbState(state.best_dev_reward, state.best_params, 0,
                                             state.rollback_count + 1), restored
    return "continued", HillClimbState(state.best_dev_reward, state.best_params, stale,
                                       state.rollback_count), model


# -- full run --------------------------------------------------------------------

@dataclass
class EvalRecord:
    batch: int
    mean_reward: float
    mean_advantage: float
    mean_entropy: float
    dev_reward: float
    dev_turn_acc: float
    decision: str


@dataclass
class RunHistory:
    evals: list = field(default_factory=list)
    batches: list = field(default_factory=list)   # BatchStats per batch
    rollbacks: int = 0
    seeds: dict = field(default_factory=dict)

    COLUMNS = ("batch", "mean_reward", "mean_advantage", "mean_entropy", "dev_reward",
               "dev_turn_acc", "decision")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.evals:
            row = asdict(r)
            w.writerow([row["batch"]] + [f"{row[c]:.6f}" for c in self.COLUMNS[1:-1]] + [row["decision"]])
        return buf.getvalue()

    @property
    def best_dev_reward(self) -> float:
        return max((r.dev_reward for r in self.evals), default=-math.inf)


def finetune_pg(pretrained: StateNet, corpus: Corpus, config: PGConfig, target_domain: str,
                train: Sequence[Dialogue] | None = None, dev: Sequence[Dialogue] | None = None):
    """Clone into live policy and frozen baseline, then update with hill climbing.

    The pretrained model is evaluated first and becomes the first snapshot, so
    the returned model never scores below it on dev reward.
    Returns (best model, RunHistory).
    """
    config.validate()
    if target_domain not in corpus.ontology.domains:
        raise nx.InvalidArgumentError(f"target domain {target_domain!r} not in the corpus ontology")
    train = list(corpus.domain_split("train", target_domain) if train is None else train)
    dev = list(corpus.domain_split("dev", target_domain) if dev is None else dev)
    if any(d.domain != target_domain for d in train + dev):
        raise nx.InvalidArgumentError("dialogues outside the target domain")
    history = RunHistory(seeds={"seed": config.seed})
    if config.max_batches == 0:
        return pretrained.clone(), history
    if not train:
        raise nx.InvalidArgumentError("empty target training split")
    ontology = corpus.ontology

    shuffle_seq, action_seq, explore_seq = np.random.SeedSequence(config.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    action_rng = np.random.default_rng(action_seq)
    frozen = pretrained.clone()
    baseline = BaselineCache(frozen, ontology, config.presence_threshold)
    live = pretrained.clone()
    opt = nx.AdamState()
    hc = HillClimbState()

    def evaluate(batch_index, stats):
        nonlocal live, hc, opt, action_rng
        scores = evaluate_dialogues(live, dev, ontology, config.presence_threshold)
        decision, hc, live = hill_climb_step(hc, live, scores["reward"], config.rollback_patience)
        if decision == "rolled_back":
            opt = nx.AdamState()
            action_rng = np.random.default_rng(explore_seq.spawn(1)[0])
            history.rollbacks += 1
        history.evals.append(EvalRecord(batch_index, stats.mean_reward if stats else math.nan,
                                        stats.mean_advantage if stats else math.nan,
                                        stats.mean_entropy if stats else math.nan,
                                        scores["reward"], scores["turn_acc"], decision))
        log.info("batch %d dev reward %.4f turn acc %.4f -> %s", batch_index, scores["reward"],
                 scores["turn_acc"], decision)

    evaluate(0, None)
    order, cursor = shuffle_rng.permutation(len(train)), 0
    batch_size = min(config.batch_size, len(train))
    recent = []
    for b in range(1, config.max_batches + 1):
        batch = []
        while len(batch) < batch_size:
            if cursor == len(order):
                order, cursor = shuffle_rng.permutation(len(train)), 0
            batch.append(train[order[cursor]])
            cursor += 1
        live, opt, stats = pg_update(live, batch, ontology, baseline, config, opt, action_rng)
        history.batches.append(stats)
        recent.append(stats)
        if b % config.eval_every_batches == 0:
            evaluate(b, BatchStats(*(float(np.mean([getattr(s, f) for s in recent]))
                                     for f in ("mean_reward", "mean_advantage", "mean_entropy", "grad_norm"))))
            recent = []
    best = pretrained.with_params({k: v.copy() for k, v in hc.best_params.items()})
    return best, history
