import numpy as np
import pytest

from rldst.corpus import BeliefState, Corpus, Dialogue, Ontology, Turn, derive_turn_labels
from rldst.statenet import ModelConfig, StateNet

TOY_ONTOLOGY = Ontology({"taxi": {"taxi-dest": ["north", "south", "centre"],
                                  "taxi-leave": ["early", "late", "noon"]}})

# small enough for coordinate-wise finite differences
TOY_CONFIG = ModelConfig(embed_dim=8, receptors=2, receptor_dim=2, turn_dim=5, hidden_dim=6, init_seed=3)

# desk-scale dims used by the trend experiments
DESK_CONFIG = ModelConfig(embed_dim=64, receptor_dim=16, turn_dim=64, hidden_dim=64)


def make_dialogue(did, states, users, systems=None, domain="taxi"):
    labels = derive_turn_labels([s.items() for s in states])
    systems = systems or [()] * len(states)
    turns = tuple(Turn(tuple(s), tuple(u), lab, BeliefState(st.items()))
                  for s, u, lab, st in zip(systems, users, labels, states))
    return Dialogue(did, domain, turns)


def toy_dialogues():
    d1 = make_dialogue("t1", [{"taxi-dest": "north"}, {"taxi-dest": "north", "taxi-leave": "late"}],
                       [["to", "the", "north"], ["leave", "late", "please"]],
                       [(), ["when", "do", "you", "leave"]])
    d2 = make_dialogue("t2", [{"taxi-leave": "early"}, {"taxi-leave": "noon"}, {"taxi-leave": "noon"}],
                       [["leave", "early"], ["no", "noon"], ["thanks"]],
                       [(), ["ok"], ["booked", "<delex>"]])
    return [d1, d2]


@pytest.fixture
def toy_model():
    return StateNet(TOY_CONFIG)


@pytest.fixture
def toy_corpus():
    ds = toy_dialogues()
    return Corpus(TOY_ONTOLOGY, ds, ds, ds)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
