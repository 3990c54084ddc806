import pytest

from rldst import numerics as nx
from rldst.corpus import SyntheticSpec, generate_synthetic_corpus
from rldst.evaluation import (CurvePoint, TransferCell, TransferMatrix, curve_to_csv, run_setup_matrix,
                              run_weak_supervision_curve, weak_subset)
from rldst.metrics import turn_level_accuracy
from rldst.pg import PGConfig
from rldst.statenet import ModelConfig, StateNet
from rldst.supervised import TrainConfig, train_supervised

SMALL = ModelConfig(embed_dim=32, receptor_dim=8, turn_dim=32, hidden_dim=32)
QUICK_TRAIN = TrainConfig(max_epochs=30, early_stop_patience=5)
QUICK_PG = PGConfig(max_batches=10, learning_rate=1e-4)


@pytest.fixture(scope="module")
def small_corpus():
    return generate_synthetic_corpus(SyntheticSpec(slots=2, values=3, dialogues=60, turns=3, seed=2))


def test_matrix_shape_and_averages():
    m = TransferMatrix(["a", "b"], [TransferCell("a", "a", 0.9, 0.95), TransferCell("a", "b", 0.2, 0.4),
                                    TransferCell("b", "a", 0.3, 0.5), TransferCell("b", "b", 0.8, 0.8)])
    assert m.averages() == {"a": (0.3, 0.5), "b": (0.2, 0.4)}
    rows = m.to_csv().splitlines()
    assert rows[0] == "source,target,bl_accuracy,pg_accuracy,in_domain"
    assert len(rows) == 1 + 4 + 2
    assert "averages" in m.summary()


def test_run_setup_matrix_small(small_corpus):
    m = run_setup_matrix(small_corpus, QUICK_TRAIN, QUICK_PG, SMALL, seed=0)
    assert len(m.cells) == 4
    assert {(c.source, c.target) for c in m.cells} == {(s, t) for s in ("taxi", "train") for t in ("taxi", "train")}
    for c in m.cells:
        assert 0.0 <= c.bl_accuracy <= 1.0 and 0.0 <= c.pg_accuracy <= 1.0
    again = run_setup_matrix(small_corpus, QUICK_TRAIN, QUICK_PG, SMALL, seed=0)
    assert again.to_csv() == m.to_csv()


def test_matrix_needs_two_domains():
    one = generate_synthetic_corpus(SyntheticSpec(domains=1, dialogues=10))
    with pytest.raises(nx.InvalidArgumentError):
        run_setup_matrix(one, QUICK_TRAIN, QUICK_PG, SMALL)


def test_identical_domains_transfer_like_in_domain():
    corpus = generate_synthetic_corpus(SyntheticSpec(slots=2, values=3, dialogues=120, turns=3, overlap=1.0, seed=3))
    model, _ = train_supervised(StateNet(SMALL), corpus, TrainConfig(max_epochs=60), domain="taxi")
    in_domain = turn_level_accuracy(model, corpus.domain_split("test", "taxi"), corpus.ontology)
    zero_shot = turn_level_accuracy(model, corpus.domain_split("test", "train"), corpus.ontology)
    assert abs(in_domain - zero_shot) <= 0.05


def test_weak_subset_is_seeded_prefix(small_corpus):
    a = weak_subset(small_corpus, "train", 10, seed=1)
    assert a == weak_subset(small_corpus, "train", 10, seed=1)
    assert weak_subset(small_corpus, "train", 20, seed=1)[:10] == a
    assert weak_subset(small_corpus, "train", 10, seed=2) != a
    with pytest.raises(nx.InvalidArgumentError):
        weak_subset(small_corpus, "train", 10_000, seed=1)


def test_weak_curve_shape_and_full_split(small_corpus):
    pretrained, _ = train_supervised(StateNet(SMALL), small_corpus, QUICK_TRAIN, domain="taxi")
    points = run_weak_supervision_curve(pretrained, small_corpus, "train", [10], QUICK_TRAIN, QUICK_PG, seed=0)
    assert len(points) == 1 and points[0].s == 10
    full = len(small_corpus.domain_split("train", "train"))
    (point,) = run_weak_supervision_curve(pretrained, small_corpus, "train", [full], QUICK_TRAIN, QUICK_PG)
    # the full split in shuffled order is the same data the plain supervised run sees
    supervised, _ = train_supervised(pretrained, small_corpus, QUICK_TRAIN, domain="train")
    test = small_corpus.domain_split("test", "train")
    assert point.weak_accuracy == pytest.approx(turn_level_accuracy(supervised, test, small_corpus.ontology), abs=0.05)
    with pytest.raises(nx.InvalidArgumentError):
        run_weak_supervision_curve(pretrained, small_corpus, "train", [full + 1], QUICK_TRAIN, QUICK_PG)


def test_curve_csv():
    text = curve_to_csv([CurvePoint(10, 0.5, 0.75)])
    assert text == "s,weak_accuracy,pg_accuracy,pg_gain\n10,0.500000,0.750000,0.250000\n"
