"""Fixed word vectors and the multi-scale n-gram utterance encoder."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx


class EmbeddingTable:
    """Token -> fixed vector.

    In hash mode every token gets a unit vector drawn from a PRNG seeded by a
    hash of (seed, token). With ``vectors`` (file mode) stored vectors win and
    unknown tokens fall back to hash mode.
    """

    def __init__(self, dim: int = 400, seed: int = 0, vectors: Mapping[str, np.ndarray] | None = None,
                 source: str | None = None):
        if dim < 1:
            raise ValueError("embedding dim must be positive")
        self.dim = dim
        self.seed = seed
        self.source = source
        self._stored = {}
        for tok, vec in (vectors or {}).items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise ValueError(f"vector for {tok!r} has shape {vec.shape}, expected ({dim},)")
            self._stored[tok] = vec
        self._cache: dict = {}

    @classmethod
    def from_file(cls, path, seed: int = 0) -> "EmbeddingTable":
        vectors, dim = {}, None
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            tok, vals = parts[0], [float(x) for x in parts[1:]]
            if dim is None:
                dim = len(vals)
            if len(vals) != dim or dim == 0:
                raise ValueError(f"{path}:{lineno}: expected {dim} floats, got {len(vals)}")
            vectors[tok] = np.array(vals, dtype=np.float64)
        if dim is None:
            raise ValueError(f"{path}: no vectors")
        return cls(dim=dim, seed=seed, vectors=vectors, source=str(path))

    def _hashed(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}\x00{token}".encode("utf-8"), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def __call__(self, token: str) -> np.ndarray:
        v = self._cache.get(token)
        if v is None:
            v = self._stored.get(token)
            if v is None:
                v = self._hashed(token)
            v.setflags(write=False)
            self._cache[token] = v
        return v

    def config(self) -> dict:
        return {"dim": self.dim, "seed": self.seed, "source": self.source}


def embed_word(table: EmbeddingTable, token: str) -> np.ndarray:
    return table(token)


def embed_phrase(table: EmbeddingTable, tokens: Sequence[str]) -> np.ndarray:
    """Mean of the token vectors; zeros for an empty phrase."""
    if not tokens:
        return np.zeros(table.dim)
    return np.mean([table(t) for t in tokens], axis=0)


# -- receptors -----------------------------------------------------------------

def receptor_param_names(prefix: str, ngram: int) -> list:
    return [f"{prefix}.rec{n}.W" for n in range(1, ngram + 1)] + \
           [f"{prefix}.rec{n}.b" for n in range(1, ngram + 1)]


def init_receptor_bank(rng, prefix: str, embed_dim: int, ngram: int = 3, receptors: int = 3,
                       receptor_dim: int = 64) -> dict:
    """Receptor weights for one utterance side.

    The K receptors of scale n are stored side by side: ``{prefix}.rec{n}.W``
    has shape (embed_dim, K * receptor_dim), columns [k*R, (k+1)*R) belonging
    to receptor k.
    """
    params = {}
    width = receptors * receptor_dim
    scale = np.sqrt(2.0 / embed_dim)
    for n in range(1, ngram + 1):
        params[f"{prefix}.rec{n}.W"] = rng.standard_normal((embed_dim, width)) * scale
        params[f"{prefix}.rec{n}.b"] = np.full(width, 0.01)
    return params


class NgramFeaturizer:
    """Caches the constant n-gram mean matrices of utterances."""

    def __init__(self, table: EmbeddingTable, ngram: int = 3, cache_size: int = 200_000):
        self.table = table
        self.ngram = ngram
        self.cache_size = cache_size
        self._cache: dict = {}

    def ngram_means(self, tokens: Sequence[str]) -> list:
        """For n = 1..N, an (#n-grams, dim) array of n-gram mean vectors."""
        key = tuple(tokens)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        dim = self.table.dim
        if key:
            vecs = np.stack([self.table(t) for t in key])
            csum = np.vstack([np.zeros(dim), np.cumsum(vecs, axis=0)])
        out = []
        for n in range(1, self.ngram + 1):
            m = len(key) - n + 1
            if m <= 0:
                out.append(np.zeros((0, dim)))
            else:
                out.append((csum[n:n + m] - csum[:m]) / n)
        if len(self._cache) >= self.cache_size:
            self._cache.clear()
        self._cache[key] = out
        return out


def encode_utterances(graph: nx.Graph, params: Mapping, prefix: str, featurizer: NgramFeaturizer,
                      utterances: Sequence[Sequence[str]]) -> nx.Node:
    """Batched multi-scale representation, one row per utterance.

    Each n-gram vector goes through every receptor (affine + ReLU); receptor
    outputs are mean-pooled over positions; scales are concatenated in order
    n = 1..N. A scale with no n-grams contributes zeros.
    """
    per_scale = []
    means = [featurizer.ngram_means(u) for u in utterances]
    for n in range(1, featurizer.ngram + 1):
        W = graph.param(f"{prefix}.rec{n}.W", params[f"{prefix}.rec{n}.W"])
        b = graph.param(f"{prefix}.rec{n}.b", params[f"{prefix}.rec{n}.b"])
        rows = [m[n - 1] for m in means]
        counts = [r.shape[0] for r in rows]
        total = sum(counts)
        if total == 0:
            per_scale.append(graph.const(np.zeros((len(utterances), W.shape[1]))))
            continue
        X = graph.const(np.concatenate(rows, axis=0))
        Z = nx.relu(X @ W + b)
        pool = np.zeros((len(utterances), total))
        start = 0
        for i, c in enumerate(counts):
            if c:
                pool[i, start:start + c] = 1.0 / c
            start += c
        per_scale.append(graph.const(pool) @ Z)
    return nx.concat(per_scale, axis=-1)


def ngram_utterance_repr(table: EmbeddingTable, bank: Mapping, tokens: Sequence[str],
                         prefix: str | None = None, graph: nx.Graph | None = None) -> nx.Node:
    """Representation of a single utterance as a node (dim N * K * receptor_dim)."""
    if prefix is None:
        prefix = next(iter(bank)).split(".rec")[0]
    ngram = sum(1 for k in bank if k.startswith(f"{prefix}.rec") and k.endswith(".W"))
    graph = graph or nx.Graph()
    out = encode_utterances(graph, bank, prefix, NgramFeaturizer(table, ngram), [list(tokens)])
    return nx.reshape(out, (out.shape[-1],))
