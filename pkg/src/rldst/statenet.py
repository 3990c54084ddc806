"""StateNet-style tracker: slot/value-agnostic parameters, one GRU step per turn."""

from __future__ import annotations

import copy
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .corpus import BeliefState, Dialogue, Ontology, SlotValue, tokenize
from .embeddings import EmbeddingTable, NgramFeaturizer, embed_phrase, encode_utterances, init_receptor_bank

CHECKPOINT_VERSION = "rldst-checkpoint-v1"
PRESENCE_THRESHOLD = 0.5


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class ModelConfig:
    embed_dim: int = 400
    embed_seed: int = 0
    embeddings_file: str | None = None
    ngram: int = 3
    receptors: int = 3
    receptor_dim: int = 64
    turn_dim: int = 200
    hidden_dim: int = 200
    temperature_init: float = 10.0
    init_seed: int = 0

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config fields {sorted(unknown)}")
        return cls(**d)


def slot_phrase(slot: str) -> list:
    """Tokens naming a slot, without its domain qualifier ("taxi-leave_at" -> leave at)."""
    local = slot.split("-", 1)[1] if "-" in slot else slot
    return tokenize(local.replace("_", " ")) or [local]


@dataclass
class SlotSpace:
    """Embedded ontology of one domain, as the model sees it."""
    slots: list
    values: list
    slot_emb: np.ndarray      # (S, E)
    value_unit: np.ndarray    # (S, Vmax, E), unit rows, zero padding
    value_mask: np.ndarray    # (S, Vmax)

    @classmethod
    def build(cls, table: EmbeddingTable, slot_values: Mapping[str, Sequence[str]]) -> "SlotSpace":
        slots = list(slot_values)
        values = [list(slot_values[s]) for s in slots]
        for s, vs in zip(slots, values):
            if not vs:
                raise nx.InvalidArgumentError(f"slot {s!r} has no candidate values")
        vmax = max(len(v) for v in values)
        E = table.dim
        slot_emb = np.stack([embed_phrase(table, slot_phrase(s)) for s in slots])
        unit = np.zeros((len(slots), vmax, E))
        mask = np.zeros((len(slots), vmax), dtype=bool)
        for i, vs in enumerate(values):
            for j, v in enumerate(vs):
                e = embed_phrase(table, tokenize(v) or [v])
                unit[i, j] = e / (np.linalg.norm(e) + 1e-12)
                mask[i, j] = True
        return cls(slots, values, slot_emb, unit, mask)


@dataclass
class TurnPrediction:
    slots: list
    values: list
    presence: nx.Node      # (S,)
    value_dist: nx.Node    # (S, Vmax), zero on padding

    @property
    def presence_prob(self) -> np.ndarray:
        return self.presence.value

    @property
    def value_dists(self) -> list:
        return [self.value_dist.value[i, :len(vs)] for i, vs in enumerate(self.values)]


@dataclass
class TrackerState:
    h: nx.Node
    updates: int = 0
    belief: BeliefState = field(default_factory=BeliefState)


class StateNet:
    """Parameters plus the fixed (non-trainable) embedding machinery."""

    def __init__(self, config: ModelConfig | None = None, params: Mapping | None = None,
                 table: EmbeddingTable | None = None):
        self.config = config or ModelConfig()
        c = self.config
        if table is None:
            if c.embeddings_file:
                table = EmbeddingTable.from_file(c.embeddings_file, seed=c.embed_seed)
                if table.dim != c.embed_dim:
                    raise ValueError(f"embedding file dim {table.dim} != config embed_dim {c.embed_dim}")
            else:
                table = EmbeddingTable(c.embed_dim, seed=c.embed_seed)
        self.table = table
        self.featurizer = NgramFeaturizer(table, c.ngram)
        self.params = dict(params) if params is not None else init_params(c)
        self._spaces: dict = {}

    def slot_space(self, slot_values: Mapping[str, Sequence[str]]) -> SlotSpace:
        key = tuple((s, tuple(v)) for s, v in slot_values.items())
        space = self._spaces.get(key)
        if space is None:
            space = self._spaces[key] = SlotSpace.build(self.table, slot_values)
        return space

    def clone(self) -> "StateNet":
        twin = StateNet(self.config, {k: v.copy() for k, v in self.params.items()}, self.table)
        twin.featurizer = self.featurizer
        twin._spaces = self._spaces
        return twin

    def with_params(self, params: Mapping) -> "StateNet":
        twin = self.clone()
        twin.params = dict(params)
        return twin

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def p(self, graph: nx.Graph, name: str) -> nx.Node:
        return graph.param(name, self.params[name])


def init_params(c: ModelConfig) -> dict:
    rng = np.random.default_rng(c.init_seed)
    E, D, H = c.embed_dim, c.turn_dim, c.hidden_dim
    width = c.ngram * c.receptors * c.receptor_dim

    def glorot(n_in, n_out):
        lim = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-lim, lim, size=(n_in, n_out))

    params = {}
    params.update(init_receptor_bank(rng, "user", E, c.ngram, c.receptors, c.receptor_dim))
    params.update(init_receptor_bank(rng, "sys", E, c.ngram, c.receptors, c.receptor_dim))
    params["enc.W"] = glorot(2 * width, D)
    params["enc.b"] = np.full(D, 0.01)
    params["gate.W"] = glorot(E, D)
    params["gate.b"] = np.ones(D)
    params["presence.W"] = glorot(D, E)
    params["presence.temp"] = np.array([c.temperature_init])
    params["presence.bias"] = np.zeros(1)
    for gate in ("z", "r", "h"):
        params[f"gru.W_{gate}"] = glorot(D, H)
        params[f"gru.U_{gate}"] = glorot(H, H)
        params[f"gru.b_{gate}"] = np.zeros(H)
    params["value.W_h"] = glorot(H, E)
    params["value.W_g"] = glorot(D, E)
    params["value.b"] = np.zeros(E)
    params["value.temp"] = np.array([c.temperature_init])
    return params


# -- forward -------------------------------------------------------------------

def encode_turns(model: StateNet, graph: nx.Graph, user_utts: Sequence, system_utts: Sequence) -> nx.Node:
    """(T, turn_dim) turn vectors; the two sides use separate receptor banks."""
    u = encode_utterances(graph, model.params, "user", model.featurizer, user_utts)
    s = encode_utterances(graph, model.params, "sys", model.featurizer, system_utts)
    x = nx.concat([u, s], axis=-1)
    return nx.relu(x @ model.p(graph, "enc.W") + model.p(graph, "enc.b"))


def encode_turn(model: StateNet, user_tokens, system_tokens, graph: nx.Graph | None = None) -> nx.Node:
    graph = graph or nx.Graph()
    out = encode_turns(model, graph, [list(user_tokens)], [list(system_tokens)])
    return nx.reshape(out, (out.shape[-1],))


def initial_state(model: StateNet, graph: nx.Graph) -> TrackerState:
    return TrackerState(graph.const(np.zeros(model.config.hidden_dim)))


class _SlotContext:
    """Per-graph constants and slot gates shared by all turns of a dialogue."""

    def __init__(self, model: StateNet, graph: nx.Graph, space: SlotSpace):
        self.space = space
        self.slot_emb = graph.const(space.slot_emb)
        self.value_unit = graph.const(space.value_unit)
        self.gates = self.slot_emb @ model.p(graph, "gate.W") + model.p(graph, "gate.b")


def track_turn(model: StateNet, state: TrackerState, turn_vec: nx.Node,
               slot_values: Mapping | SlotSpace, _ctx: _SlotContext | None = None):
    """Score every slot of the active ontology, then advance the GRU once.

    ``turn_vec`` is (D,) for one dialogue or (B, D) for a batch of dialogues
    in lockstep; outputs gain the same leading axis. Returns
    (TurnPrediction, new TrackerState).
    """
    graph = turn_vec.graph
    space = slot_values if isinstance(slot_values, SlotSpace) else model.slot_space(slot_values)
    ctx = _ctx if _ctx is not None else _SlotContext(model, graph, space)
    p = lambda name: model.p(graph, name)  # noqa: E731
    lead = turn_vec.shape[:-1]
    S, D = len(space.slots), turn_vec.shape[-1]

    gated = nx.reshape(turn_vec, lead + (1, D)) * ctx.gates          # (..., S, D)
    match = nx.cosine(gated @ p("presence.W"), ctx.slot_emb)          # (..., S)
    presence = nx.sigmoid(match * p("presence.temp") + p("presence.bias"))

    pooled = nx.mean(gated, axis=-2)
    gru = {k: p(f"gru.{k}") for k in nx.GRU_PARAM_NAMES}
    h = nx.gru_cell(pooled, state.h, gru)

    h_part = h @ p("value.W_h")
    feat = nx.reshape(h_part, lead + (1, h_part.shape[-1])) + gated @ p("value.W_g") + p("value.b")
    feat = nx.reshape(feat, lead + (S, 1, feat.shape[-1]))
    scores = nx.cosine(feat, ctx.value_unit)                          # (..., S, Vmax)
    dist = nx.softmax(scores * p("value.temp"), axis=-1,
                      mask=np.broadcast_to(space.value_mask, scores.shape))

    pred = TurnPrediction(space.slots, space.values, presence, dist)
    belief = state.belief.update(decode_turn(pred)) if not lead else state.belief
    return pred, TrackerState(h, state.updates + 1, belief)


def forward_dialogue(model: StateNet, dialogue: Dialogue, ontology: Ontology | Mapping,
                     graph: nx.Graph | None = None) -> list:
    """One TurnPrediction per turn from a fresh tracker state."""
    graph = graph or nx.Graph()
    slot_values = ontology.slots(dialogue.domain) if isinstance(ontology, Ontology) else ontology
    space = model.slot_space(slot_values)
    ctx = _SlotContext(model, graph, space)
    turn_vecs = encode_turns(model, graph,
                             [t.user_utterance for t in dialogue.turns],
                             [t.system_utterance for t in dialogue.turns])
    state = initial_state(model, graph)
    preds = []
    for i in range(len(dialogue.turns)):
        pred, state = track_turn(model, state, turn_vecs[i], space, ctx)
        preds.append(pred)
    return preds


def forward_batch(model: StateNet, dialogues: Sequence[Dialogue], ontology: Ontology | Mapping,
                  graph: nx.Graph | None = None):
    """Run same-domain dialogues in lockstep.

    Returns (preds, active): ``preds[t]`` has a leading batch axis and
    ``active[t, b]`` is False once dialogue b has ended (its padded turns
    see empty utterances and must be ignored).
    """
    graph = graph or nx.Graph()
    domains = {d.domain for d in dialogues}
    if len(domains) != 1:
        raise nx.InvalidArgumentError(f"forward_batch needs one domain, got {sorted(domains)}")
    slot_values = ontology.slots(dialogues[0].domain) if isinstance(ontology, Ontology) else ontology
    space = model.slot_space(slot_values)
    ctx = _SlotContext(model, graph, space)
    B, T = len(dialogues), max(len(d.turns) for d in dialogues)
    active = np.zeros((T, B), dtype=bool)
    users, systems = [], []
    for b, d in enumerate(dialogues):
        active[:len(d.turns), b] = True
        for t in range(T):
            turn = d.turns[t] if t < len(d.turns) else None
            users.append(turn.user_utterance if turn else ())
            systems.append(turn.system_utterance if turn else ())
    vecs = encode_turns(model, graph, users, systems)
    vecs = nx.reshape(vecs, (B, T, vecs.shape[-1]))
    state = TrackerState(graph.const(np.zeros((B, model.config.hidden_dim))))
    preds = []
    for t in range(T):
        pred, state = track_turn(model, state, vecs[:, t, :], space, ctx)
        preds.append(pred)
    return preds, active


# -- decoding ------------------------------------------------------------------

def decode_turn(pred: TurnPrediction, threshold: float = PRESENCE_THRESHOLD, row: int | None = None) -> frozenset:
    """Greedy decode; ``row`` selects one dialogue of a batched prediction."""
    out = []
    probs = pred.presence_prob if row is None else pred.presence_prob[row]
    dist = pred.value_dist.value if row is None else pred.value_dist.value[row]
    for i, slot in enumerate(pred.slots):
        if probs[i] > threshold:
            n = len(pred.values[i])
            out.append(SlotValue(slot, pred.values[i][int(np.argmax(dist[i, :n]))]))
    return frozenset(out)


def decode_final_belief(preds: Sequence[TurnPrediction], threshold: float = PRESENCE_THRESHOLD) -> BeliefState:
    state = BeliefState()
    for pred in preds:
        state = state.update(decode_turn(pred, threshold))
    return state


# -- checkpoints ---------------------------------------------------------------

def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def save_checkpoint(model: StateNet, metadata: Mapping, path) -> None:
    """npz container: ``param/<name>`` float64 arrays plus a JSON ``__meta__`` blob."""
    meta = {"version": CHECKPOINT_VERSION, "model_config": asdict(model.config),
            "metadata": copy.deepcopy(dict(metadata))}
    blob = json.dumps(meta, sort_keys=True, default=_jsonable).encode("utf-8")
    arrays = {f"param/{k}": np.asarray(v, dtype=np.float64) for k, v in sorted(model.params.items())}
    arrays["__meta__"] = np.frombuffer(blob, dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, table: EmbeddingTable | None = None):
    """Returns (model, metadata)."""
    try:
        with np.load(Path(path), allow_pickle=False) as data:
            if "__meta__" not in data.files:
                raise CheckpointError(f"{path}: missing metadata")
            meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointVersionError(
                    f"{path}: checkpoint version {meta.get('version')!r}, expected {CHECKPOINT_VERSION!r}")
            params = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
    except CheckpointError:
        raise
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    config = ModelConfig.from_dict(meta["model_config"])
    expected = init_params_shapes(config)
    if set(params) != set(expected):
        raise CheckpointError(f"{path}: parameter set does not match model config")
    bad = sorted(k for k, shape in expected.items() if params[k].shape != shape)
    if bad:
        raise CheckpointError(f"{path}: parameter shapes do not match model config: {bad}")
    return StateNet(config, params, table), meta["metadata"]


def init_params_shapes(c: ModelConfig) -> dict:
    E, D, H = c.embed_dim, c.turn_dim, c.hidden_dim
    width = c.ngram * c.receptors * c.receptor_dim
    shapes = {}
    for side in ("user", "sys"):
        for n in range(1, c.ngram + 1):
            shapes[f"{side}.rec{n}.W"] = (E, width // c.ngram)
            shapes[f"{side}.rec{n}.b"] = (width // c.ngram,)
    shapes.update({"enc.W": (2 * width, D), "enc.b": (D,), "gate.W": (E, D), "gate.b": (D,),
                   "presence.W": (D, E), "presence.temp": (1,), "presence.bias": (1,),
                   "value.W_h": (H, E), "value.W_g": (D, E), "value.b": (E,), "value.temp": (1,)})
    for gate in ("z", "r", "h"):
        shapes.update({f"gru.W_{gate}": (D, H), f"gru.U_{gate}": (H, H), f"gru.b_{gate}": (H,)})
    return shapes
