import json
import zipfile

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TOY_CONFIG, TOY_ONTOLOGY, make_dialogue, toy_dialogues
from rldst import numerics as nx
from rldst.corpus import Dialogue, SlotValue
from rldst.statenet import (CheckpointError, CheckpointVersionError, StateNet, TurnPrediction, decode_final_belief,
                            decode_turn, encode_turn, forward_batch, forward_dialogue, initial_state,
                            load_checkpoint, save_checkpoint, slot_phrase, track_turn)

SLOTS = TOY_ONTOLOGY.slots("taxi")


def _pred(presence, dists, values=None):
    values = values or [[f"v{j}" for j in range(len(d))] for d in dists]
    width = max(len(d) for d in dists)
    pad = np.zeros((len(dists), width))
    for i, d in enumerate(dists):
        pad[i, :len(d)] = d
    g = nx.Graph()
    return TurnPrediction([f"s{i}" for i in range(len(dists))], values,
                          g.const(np.asarray(presence, float)), g.const(pad))


def test_slot_phrase_drops_domain():
    assert slot_phrase("taxi-leave_at") == ["leave", "at"]
    assert slot_phrase("price") == ["price"]


def test_encode_turn_contracts(toy_model):
    empty = encode_turn(toy_model, [], []).value
    assert empty.shape == (TOY_CONFIG.turn_dim,) and np.all(np.isfinite(empty))
    a = encode_turn(toy_model, ["to", "north"], ["where", "to"]).value
    np.testing.assert_array_equal(a, encode_turn(toy_model, ["to", "north"], ["where", "to"]).value)
    assert not np.allclose(a, encode_turn(toy_model, ["where", "to"], ["to", "north"]).value)


def test_single_value_slot_gives_point_mass(toy_model):
    g = nx.Graph()
    state = initial_state(toy_model, g)
    pred, _ = track_turn(toy_model, state, encode_turn(toy_model, ["hi"], [], g), {"taxi-dest": ["north"]})
    np.testing.assert_array_equal(pred.value_dists[0], [1.0])


def test_empty_candidate_list_rejected(toy_model):
    g = nx.Graph()
    with pytest.raises(nx.InvalidArgumentError):
        track_turn(toy_model, initial_state(toy_model, g), encode_turn(toy_model, ["hi"], [], g),
                   {"taxi-dest": []})


def test_gru_advances_once_per_turn(toy_model):
    g = nx.Graph()
    vec = encode_turn(toy_model, ["to", "north"], [], g)
    s0 = initial_state(toy_model, g)
    p1, s1 = track_turn(toy_model, s0, vec, SLOTS)
    p2, s2 = track_turn(toy_model, s1, vec, SLOTS)
    assert (s1.updates, s2.updates) == (1, 2)
    assert not np.allclose(s1.h.value, s2.h.value)
    assert not np.allclose(p1.value_dist.value, p2.value_dist.value)
    # the count stays one per turn with more slots in the ontology
    many = {f"taxi-s{i}": ["a", "b"] for i in range(7)}
    _, s = track_turn(toy_model, s0, vec, many)
    assert s.updates == 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.lists(st.sampled_from(["north", "late", "a", "the", "x"]), max_size=5))
def test_prediction_ranges(seed, tokens):
    model = StateNet(TOY_CONFIG.__class__(**{**TOY_CONFIG.__dict__, "init_seed": seed}))
    g = nx.Graph()
    pred, _ = track_turn(model, initial_state(model, g), encode_turn(model, tokens, ["ok"], g), SLOTS)
    assert np.all((pred.presence_prob >= 0) & (pred.presence_prob <= 1))
    for d in pred.value_dists:
        assert abs(d.sum() - 1.0) < 1e-9


def test_forward_dialogue_prefix_property(toy_model):
    d = toy_dialogues()[1]
    full = forward_dialogue(toy_model, d, TOY_ONTOLOGY)
    assert len(full) == len(d.turns)
    again = forward_dialogue(toy_model, d, TOY_ONTOLOGY)
    assert all(a.value_dist.value.tobytes() == b.value_dist.value.tobytes() for a, b in zip(full, again))
    for k in range(1, len(d.turns) + 1):
        cut = Dialogue(d.id, d.domain, d.turns[:k])
        # turns are encoded in one matmul, so BLAS blocking may differ in the last ulp
        for a, b in zip(forward_dialogue(toy_model, cut, TOY_ONTOLOGY), full[:k]):
            np.testing.assert_allclose(a.presence_prob, b.presence_prob, rtol=0, atol=1e-12)
            np.testing.assert_allclose(a.value_dist.value, b.value_dist.value, rtol=0, atol=1e-12)


def test_batch_matches_single(toy_model):
    ds = toy_dialogues()
    preds, active = forward_batch(toy_model, ds, TOY_ONTOLOGY)
    assert active.tolist() == [[True, True], [True, True], [False, True]]
    for b, d in enumerate(ds):
        for t, single in enumerate(forward_dialogue(toy_model, d, TOY_ONTOLOGY)):
            np.testing.assert_allclose(preds[t].presence_prob[b], single.presence_prob, atol=1e-12)
            np.testing.assert_allclose(preds[t].value_dist.value[b], single.value_dist.value, atol=1e-12)


def test_parameter_set_independent_of_ontology(toy_model):
    names = set(toy_model.params)
    bigger = {**SLOTS, "taxi-dest": SLOTS["taxi-dest"] + ["airport"], "taxi-extra": ["x", "y"]}
    d = make_dialogue("x", [{"taxi-extra": "y"}], [["extra", "y"]])
    g = nx.Graph()
    forward_dialogue(toy_model, d, bigger, g)
    assert set(g.params) == names


def test_decode_turn_rules():
    assert decode_turn(_pred([0.0, 0.0], [[0.5, 0.5], [1.0]])) == frozenset()
    pred = _pred([0.9, 0.2], [[0.1, 0.7, 0.2], [1.0]])
    assert decode_turn(pred) == {SlotValue("s0", "v1")}
    assert decode_turn(_pred([0.6], [[0.5, 0.5]])) == {SlotValue("s0", "v0")}
    assert decode_turn(_pred([0.5], [[1.0]])) == frozenset()


def test_decode_final_belief_folds():
    a1 = _pred([0.9], [[1.0, 0.0, 0.0]])
    empty = _pred([0.1], [[1.0, 0.0, 0.0]])
    a3 = _pred([0.9], [[0.0, 0.0, 1.0]])
    assert decode_final_belief([a1, empty]) == {SlotValue("s0", "v0")}
    assert decode_final_belief([a1, a3]) == {SlotValue("s0", "v2")}


@settings(max_examples=30)
@given(st.lists(st.tuples(st.lists(st.floats(0, 1), min_size=3, max_size=3),
                          st.lists(st.integers(0, 2), min_size=3, max_size=3)), min_size=1, max_size=5))
def test_decode_final_belief_matches_scripted_fold(turns):
    preds = []
    for presence, argmaxes in turns:
        preds.append(_pred(presence, [np.eye(3)[j] for j in argmaxes]))
    oracle = {}
    for presence, argmaxes in turns:
        for i, (p, j) in enumerate(zip(presence, argmaxes)):
            if p > 0.5:
                oracle[f"s{i}"] = f"v{j}"
    belief = decode_final_belief(preds)
    assert belief.as_dict() == oracle
    assert len({s for s, _ in belief}) == len(belief)


# -- checkpoints ---------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, toy_model):
    path = tmp_path / "m.npz"
    save_checkpoint(toy_model, {"domain": "taxi", "epoch": 3}, path)
    loaded, meta = load_checkpoint(path)
    assert meta == {"domain": "taxi", "epoch": 3}
    assert loaded.config == toy_model.config
    for k, v in toy_model.params.items():
        assert loaded.params[k].tobytes() == v.tobytes()
    d = toy_dialogues()[0]
    for a, b in zip(forward_dialogue(loaded, d, TOY_ONTOLOGY), forward_dialogue(toy_model, d, TOY_ONTOLOGY)):
        assert a.presence_prob.tobytes() == b.presence_prob.tobytes()
        assert a.value_dist.value.tobytes() == b.value_dist.value.tobytes()
    # identical content gives identical bytes
    save_checkpoint(loaded, meta, tmp_path / "again.npz")
    assert (tmp_path / "again.npz").read_bytes() == path.read_bytes()


def _rewrite_meta(src, dst, edit):
    with np.load(src) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(bytes(arrays["__meta__"]).decode())
    edit(meta, arrays)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(dst, **arrays)


def test_checkpoint_errors(tmp_path, toy_model):
    path = tmp_path / "m.npz"
    save_checkpoint(toy_model, {}, path)
    _rewrite_meta(path, tmp_path / "v.npz", lambda m, a: m.update(version="other"))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "v.npz")
    _rewrite_meta(path, tmp_path / "s.npz", lambda m, a: a.update({"param/enc.b": np.zeros(2)}))
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(tmp_path / "s.npz")
    _rewrite_meta(path, tmp_path / "n.npz", lambda m, a: a.pop("param/enc.b"))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "n.npz")
    (tmp_path / "c.npz").write_bytes(path.read_bytes()[:100])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.npz")
    assert zipfile.is_zipfile(path)
