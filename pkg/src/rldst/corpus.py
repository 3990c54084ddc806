"""Corpus schema, preprocessing, splits and the synthetic corpus generator."""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

DELEX_TOKEN = "<delex>"


class CorpusError(ValueError):
    """Base class; ``location`` is e.g. ``"train[3] dialogue 'd12' turn 2"``."""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class CorpusParseError(CorpusError):
    pass


class SchemaError(CorpusError):
    pass


class OntologyMismatchError(CorpusError):
    pass


class ConsistencyError(CorpusError):
    pass


class SlotValue(NamedTuple):
    slot: str
    value: str


class BeliefState(frozenset):
    """Set of (slot, value) pairs with at most one value per slot."""

    def __new__(cls, pairs: Iterable = ()):
        items = frozenset(SlotValue(*p) for p in pairs)
        slots = [sv.slot for sv in items]
        if len(slots) != len(set(slots)):
            raise ValueError(f"belief state has duplicate slots: {sorted(items)}")
        for sv in items:
            if not sv.slot or not sv.value:
                raise ValueError(f"empty slot or value in {sv}")
        return super().__new__(cls, items)

    def as_dict(self) -> dict:
        return {sv.slot: sv.value for sv in self}

    def update(self, label: Iterable) -> "BeliefState":
        """Overwrite slots with the entries of ``label``."""
        d = self.as_dict()
        d.update({sv.slot: sv.value for sv in map(lambda p: SlotValue(*p), label)})
        return BeliefState(d.items())

    def sorted_pairs(self) -> list:
        return [list(sv) for sv in sorted(self)]

    def __repr__(self):
        return "BeliefState({" + ", ".join(f"{s}={v}" for s, v in sorted(self)) + "})"


def fold_labels(labels: Iterable[Iterable]) -> BeliefState:
    state = BeliefState()
    for label in labels:
        state = state.update(label)
    return state


@dataclass(frozen=True)
class Turn:
    system_utterance: tuple
    user_utterance: tuple
    turn_label: frozenset
    belief_state: BeliefState


@dataclass(frozen=True)
class Dialogue:
    id: str
    domain: str
    turns: tuple

    @property
    def final_belief(self) -> BeliefState:
        return self.turns[-1].belief_state


@dataclass
class Ontology:
    domains: dict  # domain -> {slot: [values]}

    def slots(self, domain: str) -> dict:
        if domain not in self.domains:
            raise OntologyMismatchError(f"unknown domain {domain!r}")
        return self.domains[domain]

    def to_json(self) -> dict:
        return {d: {s: list(v) for s, v in slots.items()} for d, slots in self.domains.items()}


@dataclass
class Corpus:
    ontology: Ontology
    train: list = field(default_factory=list)
    dev: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, name: str) -> list:
        if name not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def domain_split(self, name: str, domain: str) -> list:
        return [d for d in self.split(name) if d.domain == domain]

    @property
    def domains(self) -> list:
        return list(self.ontology.domains)


# -- tokenization and delexicalization ----------------------------------------

_EDGE_PUNCT = string.punctuation


def tokenize(text: str) -> list:
    """Lowercase whitespace split; punctuation stripped from token edges."""
    out = []
    for tok in text.lower().split():
        if tok.startswith("<") and tok.endswith(">") and len(tok) > 2:
            out.append(tok)
            continue
        tok = tok.strip(_EDGE_PUNCT)
        if tok:
            out.append(tok)
    return out


DELEX_PATTERNS: list = [
    ("reference", re.compile(r"^(?=[a-z0-9]*\d)(?=[a-z0-9]*[a-z])[a-z0-9]{8}$|^[a-z]{1,3}\d{5,}$", re.I)),
    ("train_id", re.compile(r"^tr\d{4}$", re.I)),
    ("phone", re.compile(r"^\+?\d{7,}$")),
    ("time", re.compile(r"^\d{1,2}:\d{2}$")),
    ("postcode", re.compile(r"^cb\d{1,2}[a-z0-9]{0,4}$", re.I)),
]


def delexicalize(tokens: Sequence[str], patterns: Sequence = DELEX_PATTERNS) -> list:
    """Replace every token matched by any pattern with ``DELEX_TOKEN``."""

    def matches(tok):
        for _, matcher in patterns:
            if callable(matcher) and not hasattr(matcher, "match"):
                if matcher(tok):
                    return True
            elif matcher.match(tok):
                return True
        return False

    return [DELEX_TOKEN if tok != DELEX_TOKEN and matches(tok) else tok for tok in tokens]


def derive_turn_labels(belief_states: Sequence) -> list:
    """Per-turn belief deltas: pairs in state t absent from state t-1."""
    if not belief_states:
        raise ValueError("need at least one belief state")
    labels, prev = [], frozenset()
    for state in belief_states:
        state = frozenset(SlotValue(*p) for p in state)
        labels.append(frozenset(state - prev))
        prev = state
    return labels


# -- splits --------------------------------------------------------------------

def split_corpus(dialogues: Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    if len(dialogues) < 3:
        raise ValueError("need at least 3 dialogues to split")
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(dialogues)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_dev = int(round(ratios[1] * n))
    n_train = min(n_train, n)
    n_dev = min(n_dev, n - n_train)
    shuffled = [dialogues[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_dev], shuffled[n_train + n_dev:]


# -- (de)serialization ---------------------------------------------------------

_TOP_FIELDS = {"ontology", "train", "dev", "test"}
_DIALOGUE_FIELDS = {"id", "domain", "turns"}
_TURN_FIELDS = {"system_utterance", "user_utterance", "turn_label", "belief_state"}


def _check_fields(obj, expected: set, location: str):
    if not isinstance(obj, dict):
        raise SchemaError(f"expected an object, got {type(obj).__name__}", location)
    extra = set(obj) - expected
    missing = expected - set(obj)
    if extra:
        raise SchemaError(f"unknown fields {sorted(extra)}", location)
    if missing:
        raise SchemaError(f"missing fields {sorted(missing)}", location)


def _tokens(obj, location: str) -> tuple:
    if not isinstance(obj, list) or not all(isinstance(t, str) for t in obj):
        raise SchemaError("utterance must be a list of token strings", location)
    return tuple(obj)


def _pairs(obj, location: str) -> list:
    if not isinstance(obj, list):
        raise SchemaError("expected a list of [slot, value] pairs", location)
    out = []
    for p in obj:
        if (not isinstance(p, list) or len(p) != 2
                or not all(isinstance(x, str) and x for x in p)):
            raise SchemaError(f"malformed slot-value pair {p!r}", location)
        out.append(SlotValue(*p))
    return out


def _parse_ontology(obj) -> Ontology:
    if not isinstance(obj, dict) or not obj:
        raise SchemaError("ontology must be a non-empty object", "ontology")
    domains = {}
    for dom, slots in obj.items():
        loc = f"ontology.{dom}"
        if not isinstance(slots, dict) or not slots:
            raise SchemaError("domain must map slots to value lists", loc)
        domains[dom] = {}
        for slot, values in slots.items():
            if (not isinstance(values, list) or not values
                    or not all(isinstance(v, str) and v for v in values)):
                raise SchemaError("value list must be non-empty strings", f"{loc}.{slot}")
            if len(set(values)) != len(values):
                raise SchemaError("duplicate values", f"{loc}.{slot}")
            domains[dom][slot] = list(values)
    return Ontology(domains)


def _parse_dialogue(obj, ontology: Ontology, location: str) -> Dialogue:
    _check_fields(obj, _DIALOGUE_FIELDS, location)
    did, dom = obj["id"], obj["domain"]
    if not isinstance(did, str) or not did:
        raise SchemaError("dialogue id must be a non-empty string", location)
    location = f"{location} dialogue {did!r}"
    if dom not in ontology.domains:
        raise OntologyMismatchError(f"unknown domain {dom!r}", location)
    slots = ontology.domains[dom]
    if not isinstance(obj["turns"], list) or not obj["turns"]:
        raise SchemaError("turns must be a non-empty list", location)
    turns, prev = [], BeliefState()
    for t, tobj in enumerate(obj["turns"]):
        tloc = f"{location} turn {t}"
        _check_fields(tobj, _TURN_FIELDS, tloc)
        label = _pairs(tobj["turn_label"], tloc)
        belief_pairs = _pairs(tobj["belief_state"], tloc)
        for sv in label + belief_pairs:
            if sv.slot not in slots:
                raise OntologyMismatchError(f"slot {sv.slot!r} not in ontology domain {dom!r}", tloc)
            if sv.value not in slots[sv.slot]:
                raise OntologyMismatchError(
                    f"value {sv.value!r} not in ontology for slot {sv.slot!r}", tloc)
        if len({sv.slot for sv in label}) != len(label):
            raise SchemaError("turn label assigns a slot twice", tloc)
        try:
            belief = BeliefState(belief_pairs)
        except ValueError as exc:
            raise SchemaError(str(exc), tloc) from None
        expected = prev.update(label)
        if belief != expected:
            raise ConsistencyError(
                f"belief state {belief!r} != previous state updated by turn label {expected!r}", tloc)
        turns.append(Turn(_tokens(tobj["system_utterance"], tloc),
                          _tokens(tobj["user_utterance"], tloc),
                          frozenset(label), belief))
        prev = belief
    return Dialogue(did, dom, tuple(turns))


def corpus_from_json(doc) -> Corpus:
    _check_fields(doc, _TOP_FIELDS, "corpus")
    ontology = _parse_ontology(doc["ontology"])
    splits, seen = {}, {}
    for name in ("train", "dev", "test"):
        if not isinstance(doc[name], list):
            raise SchemaError("split must be a list", name)
        splits[name] = []
        for i, dobj in enumerate(doc[name]):
            d = _parse_dialogue(dobj, ontology, f"{name}[{i}]")
            if d.id in seen:
                raise SchemaError(f"dialogue id {d.id!r} also appears in {seen[d.id]}", f"{name}[{i}]")
            seen[d.id] = name
            splits[name].append(d)
    return Corpus(ontology, **splits)


def load_corpus(path) -> Corpus:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusParseError(f"{exc.msg} (line {exc.lineno}, column {exc.colno})", str(path)) from None
    return corpus_from_json(doc)


def dialogue_to_json(d: Dialogue) -> dict:
    return {
        "id": d.id,
        "domain": d.domain,
        "turns": [{
            "system_utterance": list(t.system_utterance),
            "user_utterance": list(t.user_utterance),
            "turn_label": [list(sv) for sv in sorted(t.turn_label)],
            "belief_state": t.belief_state.sorted_pairs(),
        } for t in d.turns],
    }


def corpus_to_json(corpus: Corpus) -> dict:
    return {
        "ontology": corpus.ontology.to_json(),
        "train": [dialogue_to_json(d) for d in corpus.train],
        "dev": [dialogue_to_json(d) for d in corpus.dev],
        "test": [dialogue_to_json(d) for d in corpus.test],
    }


def dumps_corpus(corpus: Corpus) -> str:
    return json.dumps(corpus_to_json(corpus), ensure_ascii=False, separators=(",", ":")) + "\n"


def save_corpus(corpus: Corpus, path) -> None:
    Path(path).write_text(dumps_corpus(corpus), encoding="utf-8")


# -- synthetic generator -------------------------------------------------------

DOMAIN_NAMES = ("taxi", "train", "hotel", "restaurant", "attraction", "hospital", "police")
_ONSETS = "b c d f g h j k l m n p r s t v w z".split() + ["br", "st", "tr", "pl", "gr", "sk"]
_VOWELS = "a e i o u".split()


@dataclass(frozen=True)
class SyntheticSpec:
    domains: int = 2
    slots: int = 4
    values: int = 6
    dialogues: int = 250
    turns: int = 6
    overlap: float = 0.6
    seed: int = 1
    ratios: tuple = (0.8, 0.1, 0.1)
    change_prob: float = 0.2
    two_slot_prob: float = 0.3
    reference_prob: float = 0.3

    def validate(self):
        for name in ("domains", "slots", "values", "dialogues", "turns"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")


class _WordMaker:
    def __init__(self, rng):
        self.rng = rng
        self.used: set = set()

    def word(self) -> str:
        while True:
            n = int(self.rng.integers(2, 4))
            w = "".join(_ONSETS[self.rng.integers(len(_ONSETS))] + _VOWELS[self.rng.integers(len(_VOWELS))]
                        for _ in range(n))
            if w not in self.used:
                self.used.add(w)
                return w

    def words(self, n: int) -> list:
        return [self.word() for _ in range(n)]


def _domain_name(k: int) -> str:
    return DOMAIN_NAMES[k] if k < len(DOMAIN_NAMES) else f"domain{k}"


def _mix(shared: list, fresh: Callable[[int], list], overlap: float) -> list:
    k = int(round(overlap * len(shared)))
    return shared[:k] + fresh(len(shared) - k)


def _reference_code(rng) -> str:
    letters = "".join(chr(ord("a") + int(i)) for i in rng.integers(0, 26, size=2))
    return letters + "".join(str(int(i)) for i in rng.integers(0, 10, size=5))


def generate_synthetic_corpus(spec: SyntheticSpec) -> Corpus:
    """Template dialogues over pseudo-word inventories.

    Domain 0 draws fresh slot keywords, values and filler words; every other
    domain reuses a ``spec.overlap`` fraction of each inventory and draws the
    rest fresh. Slot names are ``<domain>-<keyword>``; the user utterance
    says ``keyword value`` for every pair in the turn label.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    words = _WordMaker(rng)
    base_kw = words.words(spec.slots)
    base_vals = [words.words(spec.values) for _ in range(spec.slots)]
    base_user_fill = words.words(10)
    base_sys_fill = words.words(10)
    base_connect = words.words(3)

    ontology, inventories = {}, {}
    for k in range(spec.domains):
        dom = _domain_name(k)
        if k == 0:
            kws, vals = base_kw, base_vals
            ufill, sfill, conn = base_user_fill, base_sys_fill, base_connect
        else:
            kws = _mix(base_kw, words.words, spec.overlap)
            vals = [_mix(v, words.words, spec.overlap) for v in base_vals]
            ufill = _mix(base_user_fill, words.words, spec.overlap)
            sfill = _mix(base_sys_fill, words.words, spec.overlap)
            conn = _mix(base_connect, words.words, spec.overlap)
        slots = {f"{dom}-{kw}": list(v) for kw, v in zip(kws, vals)}
        ontology[dom] = slots
        inventories[dom] = (list(zip(slots, kws)), ufill, sfill, conn)

    train, dev, test = [], [], []
    for k, dom in enumerate(ontology):
        slot_kw, ufill, sfill, conn = inventories[dom]
        dialogues = [_synthetic_dialogue(f"{dom}-{i:05d}", dom, ontology[dom], slot_kw,
                                         ufill, sfill, conn, spec, rng)
                     for i in range(spec.dialogues)]
        if spec.dialogues >= 3:
            a, b, c = split_corpus(dialogues, spec.ratios, spec.seed + k)
        else:
            a, b, c = dialogues, [], []
        train += a
        dev += b
        test += c
    return Corpus(Ontology(ontology), train, dev, test)


def _synthetic_dialogue(did, dom, slots, slot_kw, ufill, sfill, conn, spec, rng) -> Dialogue:
    kw_of = dict(slot_kw)
    names = list(slots)
    state: dict = {}
    states, utterances = [], []
    for t in range(spec.turns):
        unfilled = [s for s in names if s not in state]
        change = state and (not unfilled or rng.random() < spec.change_prob)
        label = {}
        if change:
            s = sorted(state)[rng.integers(len(state))]
            options = [v for v in slots[s] if v != state[s]]
            if options:
                label[s] = options[rng.integers(len(options))]
        if not label:
            pool = unfilled or names
            n = 2 if (len(pool) > 1 and rng.random() < spec.two_slot_prob) else 1
            for i in rng.choice(len(pool), size=n, replace=False):
                s = pool[int(i)]
                options = [v for v in slots[s] if v != state.get(s)] or slots[s]
                label[s] = options[rng.integers(len(options))]
        state.update(label)
        states.append(dict(state))

        user = [ufill[rng.integers(len(ufill))]]
        pairs = list(label.items())
        for j in rng.permutation(len(pairs)):
            s, v = pairs[int(j)]
            if len(user) > 1:
                user.append(conn[rng.integers(len(conn))])
            user += [kw_of[s], v]
        user.append(ufill[rng.integers(len(ufill))])
        if t == 0:
            system = []
        else:
            system = [sfill[i] for i in rng.integers(len(sfill), size=int(rng.integers(2, 4)))]
            if rng.random() < spec.reference_prob:
                system += ["reference", _reference_code(rng)]
        utterances.append((delexicalize(system), delexicalize(user)))

    labels = derive_turn_labels([s.items() for s in states])
    turns = tuple(Turn(tuple(su), tuple(uu), lab, BeliefState(st.items()))
                  for (su, uu), lab, st in zip(utterances, labels, states))
    return Dialogue(did, dom, turns)
