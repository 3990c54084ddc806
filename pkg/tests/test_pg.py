import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TOY_CONFIG, TOY_ONTOLOGY, toy_dialogues
from rldst import numerics as nx
from rldst.corpus import BeliefState, SlotValue
from rldst.metrics import evaluate_dialogues, jaccard_reward
from rldst.pg import (BaselineCache, HillClimbState, PGConfig, baseline_reward, finetune_pg, hill_climb_step,
                      pg_surrogate, pg_update, sample_action, score_action)
from rldst.statenet import StateNet, TurnPrediction, decode_final_belief, forward_dialogue


def _pred(presence, dists, graph=None):
    graph = graph or nx.Graph()
    values = [[f"v{j}" for j in range(len(d))] for d in dists]
    width = max(len(d) for d in dists)
    pad = np.zeros((len(dists), width))
    for i, d in enumerate(dists):
        pad[i, :len(d)] = d
    return TurnPrediction([f"s{i}" for i in range(len(dists))], values,
                          graph.const(np.asarray(presence, float)), graph.const(pad))


# -- reward ------------------------------------------------------------------------------

def test_jaccard_examples():
    a = {SlotValue("a", "1"), SlotValue("b", "2")}
    assert jaccard_reward(a, a) == 1.0
    assert jaccard_reward({SlotValue("a", "1"), SlotValue("b", "3")}, a) == pytest.approx(1 / 3)
    assert jaccard_reward(set(), set()) == 1.0
    assert jaccard_reward(set(), a) == 0.0


pairs = st.frozensets(st.tuples(st.sampled_from("abc"), st.sampled_from("12")), max_size=6)


@given(pairs, pairs)
def test_jaccard_symmetric_and_bounded(p, g):
    r = jaccard_reward(p, g)
    assert r == jaccard_reward(g, p)
    assert 0.0 <= r <= 1.0
    assert (r == 1.0) == (p == g)


# -- sampling -------------------------------------------------------------------------------

def test_degenerate_distribution_is_deterministic():
    act = sample_action(_pred([1.0], [[0.0, 1.0, 0.0]]), np.random.default_rng(0))
    assert act.belief == {SlotValue("s0", "v1")}
    assert abs(float(act.log_prob.value)) < 1e-9
    assert abs(float(act.entropy.value)) < 1e-9


def test_uniform_value_entropy():
    act = sample_action(_pred([1.0], [[0.25] * 4]), np.random.default_rng(0))
    assert abs(float(act.entropy.value) - math.log(4)) < 1e-9
    assert float(act.log_prob.value) <= 1e-12


def test_log_prob_is_sum_of_drawn_factors():
    pred = _pred([0.7, 0.2], [[0.5, 0.3, 0.2], [0.6, 0.4]])
    rng = np.random.default_rng(5)
    for _ in range(50):
        act = sample_action(pred, rng)
        expected = 0.0
        present, idx = act.turn_actions[0]
        for i, p in enumerate([0.7, 0.2]):
            if present[i]:
                expected += math.log(p) + math.log([[0.5, 0.3, 0.2], [0.6, 0.4]][i][idx[i]])
            else:
                expected += math.log(1 - p)
        assert abs(float(act.log_prob.value) - expected) < 1e-12
        assert abs(float(score_action([pred], act).value) - expected) < 1e-12


def test_multi_turn_action_folds_and_scores(toy_model):
    preds = forward_dialogue(toy_model, toy_dialogues()[1], TOY_ONTOLOGY)
    act = sample_action(preds, np.random.default_rng(1))
    oracle = {}
    for pred, (present, idx) in zip(preds, act.turn_actions):
        for i, slot in enumerate(pred.slots):
            if present[i]:
                oracle[slot] = pred.values[i][idx[i]]
    assert act.belief.as_dict() == oracle
    assert abs(float(score_action(preds, act).value) - float(act.log_prob.value)) < 1e-9
    assert float(act.entropy.value) >= 0


def test_thresholded_presence_mode():
    pred = _pred([0.9, 0.1], [[0.5, 0.5], [0.5, 0.5]])
    act = sample_action(pred, np.random.default_rng(0), sample_presence=False)
    assert {s for s, _ in act.belief} == {"s0"}
    assert abs(float(act.log_prob.value) - math.log(0.5)) < 1e-12


# -- baseline ----------------------------------------------------------------------------------

def test_baseline_composes_decode_and_reward(toy_model):
    for d in toy_dialogues():
        by_hand = jaccard_reward(decode_final_belief(forward_dialogue(toy_model, d, TOY_ONTOLOGY)), d.final_belief)
        assert baseline_reward(toy_model, d, TOY_ONTOLOGY) == by_hand
        assert baseline_reward(toy_model, d, TOY_ONTOLOGY, gold_final=BeliefState()) == \
            jaccard_reward(decode_final_belief(forward_dialogue(toy_model, d, TOY_ONTOLOGY)), set())


def test_baseline_cache_calls_once(toy_model, monkeypatch):
    cache = BaselineCache(toy_model, TOY_ONTOLOGY)
    d = toy_dialogues()[0]
    first = cache(d)
    monkeypatch.setattr("rldst.pg.baseline_reward", lambda *a, **k: pytest.fail("recomputed"))
    assert cache(d) == first


# -- update -------------------------------------------------------------------------------------

def test_zero_advantage_zero_entropy_leaves_params(toy_model):
    ds = toy_dialogues()
    cfg = PGConfig(entropy_weight=0.0)
    # a baseline that always matches the sampled reward makes every advantage 0
    g = nx.Graph()
    obj, rewards, adv, _ = pg_surrogate(toy_model, ds, TOY_ONTOLOGY, lambda d: 0.0, cfg,
                                        np.random.default_rng(3), g)
    lookup = {d.id: r for d, r in zip(ds, rewards)}
    new, _, stats = pg_update(toy_model, ds, TOY_ONTOLOGY, lambda d: lookup[d.id], cfg, nx.AdamState(),
                              np.random.default_rng(3))
    assert stats.grad_norm == 0.0
    for k in toy_model.params:
        assert new.params[k].tobytes() == toy_model.params[k].tobytes()


def test_positive_advantage_raises_log_prob(toy_model):
    d = toy_dialogues()[0]
    cfg = PGConfig(entropy_weight=0.0, learning_rate=1e-4)
    rng = np.random.default_rng(11)
    # find a draw with positive advantage under a zero baseline
    for _ in range(50):
        state = rng.bit_generator.state
        act = sample_action(forward_dialogue(toy_model, d, TOY_ONTOLOGY), rng)
        if jaccard_reward(act.belief, d.final_belief) > 0:
            break
    rng.bit_generator.state = state
    before = float(act.log_prob.value)
    new, _, stats = pg_update(toy_model, [d], TOY_ONTOLOGY, lambda _: 0.0, cfg, nx.AdamState(), rng)
    assert stats.mean_advantage > 0
    after = float(score_action(forward_dialogue(new, d, TOY_ONTOLOGY), act).value)
    assert after > before


def test_empty_batch_rejected(toy_model):
    with pytest.raises(nx.InvalidArgumentError):
        pg_update(toy_model, [], TOY_ONTOLOGY, lambda d: 0.0, PGConfig(), nx.AdamState(), np.random.default_rng())


def test_surrogate_masks_padded_turns(toy_model):
    # the shorter dialogue must contribute the same terms alone and in a padded batch
    d1, d2 = toy_dialogues()
    cfg = PGConfig()
    g = nx.Graph()
    _, r_pair, _, h_pair = pg_surrogate(toy_model, [d1, d2], TOY_ONTOLOGY, lambda d: 0.0, cfg,
                                        np.random.default_rng(0), g)
    rng = np.random.default_rng(0)
    preds = forward_dialogue(toy_model, d1, TOY_ONTOLOGY)
    assert len(preds) == 2
    ent = sum(float(v) for v in [sample_action(p, np.random.default_rng(0)).entropy.value for p in preds])
    assert h_pair[0] == pytest.approx(ent, abs=1e-12)


# -- hill climbing -----------------------------------------------------------------------------

def test_hill_climb_counter_semantics(toy_model):
    state = HillClimbState()
    decision, state, _ = hill_climb_step(state, toy_model, 0.1)
    assert decision == "saved" and state.best_dev_reward == 0.1
    for i in range(13):
        decision, state, _ = hill_climb_step(state, toy_model, 0.05)
        assert decision == "continued"
    assert state.evals_since_improvement == 13
    decision, state, _ = hill_climb_step(state, toy_model, 0.2)
    assert decision == "saved" and state.evals_since_improvement == 0


def test_rollback_after_patience_restores_snapshot(toy_model):
    state = HillClimbState()
    _, state, live = hill_climb_step(state, toy_model, 0.5)
    drifted = toy_model.with_params({k: v + 1.0 for k, v in toy_model.params.items()})
    for i in range(14):
        decision, state, live = hill_climb_step(state, drifted, 0.4)
        assert decision == "continued"
    decision, state, live = hill_climb_step(state, drifted, 0.4)
    assert decision == "rolled_back" and state.rollback_count == 1 and state.evals_since_improvement == 0
    for k in toy_model.params:
        assert live.params[k].tobytes() == toy_model.params[k].tobytes()


# -- full run -----------------------------------------------------------------------------------

def test_finetune_zero_batches_returns_input(toy_corpus, toy_model):
    best, hist = finetune_pg(toy_model, toy_corpus, PGConfig(max_batches=0), "taxi")
    assert all(best.params[k].tobytes() == v.tobytes() for k, v in toy_model.params.items())
    assert hist.evals == []


def test_finetune_rejects_unknown_domain(toy_corpus, toy_model):
    with pytest.raises(nx.InvalidArgumentError):
        finetune_pg(toy_model, toy_corpus, PGConfig(max_batches=1), "hotel")


def test_finetune_contracts(toy_corpus, toy_model):
    cfg = PGConfig(max_batches=40, eval_every_batches=2, rollback_patience=3, learning_rate=0.05, seed=4)
    frozen_before = {k: v.copy() for k, v in toy_model.params.items()}
    best, hist = finetune_pg(toy_model, toy_corpus, cfg, "taxi")
    again, hist2 = finetune_pg(toy_model, toy_corpus, cfg, "taxi")
    # the input model (which also seeds the frozen baseline) is untouched
    assert all(toy_model.params[k].tobytes() == frozen_before[k].tobytes() for k in frozen_before)
    assert hist.to_csv() == hist2.to_csv()
    assert all(best.params[k].tobytes() == again.params[k].tobytes() for k in best.params)
    assert hist.evals[0].decision == "saved" and hist.evals[0].batch == 0
    assert len(hist.evals) == 1 + 40 // 2
    dev = evaluate_dialogues(best, toy_corpus.dev, TOY_ONTOLOGY)["reward"]
    assert dev >= hist.evals[0].dev_reward
    assert dev == pytest.approx(hist.best_dev_reward)
    lines = hist.to_csv().splitlines()
    assert lines[0] == "batch,mean_reward,mean_advantage,mean_entropy,dev_reward,dev_turn_acc,decision"


def test_rollback_switches_sampling_stream(toy_corpus, toy_model, monkeypatch):
    # force every evaluation after the first to be non-improving
    cfg = PGConfig(max_batches=12, eval_every_batches=1, rollback_patience=2, learning_rate=0.01, seed=1)
    seen = []
    import rldst.pg as pg

    real = pg.pg_update

    def spy(model, batch, ontology, baseline, config, state, rng):
        seen.append((state.t, rng.bit_generator.state["state"]["state"]))
        return real(model, batch, ontology, baseline, config, state, rng)

    monkeypatch.setattr(pg, "evaluate_dialogues", lambda *a, **k: {"reward": 0.5, "turn_acc": 0.5})
    monkeypatch.setattr(pg, "pg_update", spy)
    best, hist = pg.finetune_pg(toy_model, toy_corpus, cfg, "taxi")
    decisions = [r.decision for r in hist.evals]
    assert decisions[:4] == ["saved", "continued", "rolled_back", "continued"]
    assert hist.rollbacks == decisions.count("rolled_back") >= 3
    # Adam restarts after each rollback
    assert [t for t, _ in seen][:4] == [0, 1, 0, 1]
    assert all(best.params[k].tobytes() == toy_model.params[k].tobytes() for k in best.params)
