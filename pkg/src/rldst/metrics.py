"""Dialogue-level and turn-level scores."""

from __future__ import annotations

from typing import Iterable, Sequence

from .corpus import Dialogue, Ontology
from .statenet import PRESENCE_THRESHOLD, StateNet, decode_turn, forward_batch, forward_dialogue


def jaccard_reward(predicted: Iterable, gold: Iterable) -> float:
    """|gold & predicted| / |gold | predicted|; 1.0 when both are empty."""
    p, g = frozenset(tuple(x) for x in predicted), frozenset(tuple(x) for x in gold)
    union = p | g
    if not union:
        return 1.0
    return len(p & g) / len(union)


def turn_score(gold_label: frozenset, decoded: frozenset) -> float:
    if gold_label:
        return len(gold_label & decoded) / len(gold_label)
    return 1.0 if not decoded else 0.0


EVAL_BATCH = 64


def decoded_turns(model: StateNet, dialogue: Dialogue, ontology: Ontology,
                  threshold: float = PRESENCE_THRESHOLD) -> list:
    return [decode_turn(p, threshold) for p in forward_dialogue(model, dialogue, ontology)]


def decode_dialogues(model: StateNet, dialogues: Sequence[Dialogue], ontology: Ontology,
                     threshold: float = PRESENCE_THRESHOLD) -> list:
    """Greedy per-turn decodes for every dialogue, run in same-domain batches."""
    out: list = [None] * len(dialogues)
    by_domain: dict = {}
    for i, d in enumerate(dialogues):
        by_domain.setdefault(d.domain, []).append(i)
    for idx in by_domain.values():
        for start in range(0, len(idx), EVAL_BATCH):
            chunk = idx[start:start + EVAL_BATCH]
            preds, active = forward_batch(model, [dialogues[i] for i in chunk], ontology)
            for b, i in enumerate(chunk):
                out[i] = [decode_turn(p, threshold, row=b) for t, p in enumerate(preds) if active[t, b]]
    return out


def evaluate_dialogues(model: StateNet, dialogues: Sequence[Dialogue], ontology: Ontology,
                       threshold: float = PRESENCE_THRESHOLD) -> dict:
    """Turn accuracy, joint goal accuracy and mean greedy reward in a single pass.

    Sums are accumulated per dialogue and divided at the end, so the result
    does not depend on evaluation order.
    """
    turn_total = jga_total = reward_total = 0.0
    n_turns = empty_gold = 0
    for d, decodes in zip(dialogues, decode_dialogues(model, dialogues, ontology, threshold)):
        belief = frozenset()
        state: dict = {}
        for turn, decoded in zip(d.turns, decodes):
            turn_total += turn_score(turn.turn_label, decoded)
            state.update(dict(decoded))
            belief = frozenset(state.items())
            jga_total += float(belief == turn.belief_state)
            n_turns += 1
            empty_gold += not turn.turn_label
        reward_total += jaccard_reward(belief, d.final_belief)
    if n_turns == 0:
        return {"turn_acc": 0.0, "jga": 0.0, "reward": 0.0, "turns": 0, "dialogues": 0, "empty_gold_turns": 0}
    return {"turn_acc": turn_total / n_turns, "jga": jga_total / n_turns,
            "reward": reward_total / len(dialogues), "turns": n_turns,
            "dialogues": len(dialogues), "empty_gold_turns": empty_gold}


def turn_level_accuracy(model: StateNet, dialogues: Sequence[Dialogue], ontology: Ontology,
                        threshold: float = PRESENCE_THRESHOLD) -> float:
    """Mean over all turns of the fraction of gold turn-label pairs decoded.

    Turns with an empty gold label score 1 only if nothing was decoded.
    """
    return evaluate_dialogues(model, dialogues, ontology, threshold)["turn_acc"]


def joint_goal_accuracy(model: StateNet, dialogues: Sequence[Dialogue], ontology: Ontology,
                        threshold: float = PRESENCE_THRESHOLD) -> float:
    return evaluate_dialogues(model, dialogues, ontology, threshold)["jga"]


def mean_greedy_reward(model: StateNet, dialogues: Sequence[Dialogue], ontology: Ontology,
                       threshold: float = PRESENCE_THRESHOLD) -> float:
    return evaluate_dialogues(model, dialogues, ontology, threshold)["reward"]
