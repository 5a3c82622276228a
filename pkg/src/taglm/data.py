"""Text-attributed graphs: storage, neighbourhood extraction, synthetic generation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .errors import InputError
from .text import featurize_text

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TextAttributedGraph:
    """Undirected graph whose nodes carry text, a feature vector and maybe a label.

    Nodes are stored in ascending id order; ``indptr``/``indices`` is a symmetric
    CSR adjacency over node *positions* without self-loops.
    """
    node_ids: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    texts: tuple
    features: np.ndarray
    labels: Optional[tuple] = None
    class_names: tuple = ()
    titles: Optional[tuple] = None
    _pos: dict = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.node_ids)
        if len(self.texts) != n or self.features.shape[0] != n:
            raise InputError("texts/features must have one entry per node")
        if self.labels is not None:
            bad = {l for l in self.labels if l is not None} - set(self.class_names)
            if bad:
                raise InputError(f"labels outside the declared class set: {sorted(bad)}")
        object.__setattr__(self, "_pos", {int(v): i for i, v in enumerate(self.node_ids)})
        for arr in (self.node_ids, self.indptr, self.indices, self.features):
            arr.flags.writeable = False

    @classmethod
    def from_edges(cls, node_ids, edges, texts, features, labels=None, class_names=None,
                   titles=None):
        node_ids = np.asarray(node_ids, dtype=np.int64)
        order = np.argsort(node_ids, kind="stable")
        node_ids = node_ids[order]
        if len(np.unique(node_ids)) != len(node_ids):
            raise InputError("duplicate node ids")
        texts = tuple(texts[i] for i in order)
        features = np.asarray(features, dtype=np.float64)[order]
        if labels is not None:
            labels = tuple(labels[i] for i in order)
            if class_names is None:
                class_names = tuple(dict.fromkeys(l for l in labels if l is not None))
        if titles is not None:
            titles = tuple(titles[i] for i in order)
        pos = {int(v): i for i, v in enumerate(node_ids)}
        n = len(node_ids)
        pairs = set()
        for u, v in edges:
            if u not in pos or v not in pos:
                raise InputError(f"edge ({u}, {v}) references an unknown node")
            if u == v:
                log.warning("dropping self-loop on node %d", u)
                continue
            a, b = pos[u], pos[v]
            pairs.add((a, b))
            pairs.add((b, a))
        if pairs:
            src, dst = np.array(sorted(pairs), dtype=np.int64).T
        else:
            src = dst = np.empty(0, dtype=np.int64)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        indptr = np.cumsum(indptr)
        return cls(node_ids, indptr, dst.copy(), texts, features, labels,
                   tuple(class_names or ()), titles)

    @property
    def num_nodes(self):
        return len(self.node_ids)

    @property
    def d_feat(self):
        return self.features.shape[1]

    def position(self, node_id):
        try:
            return self._pos[int(node_id)]
        except KeyError:
            raise InputError(f"unknown node id {node_id}") from None

    def neighbors(self, node_id):
        i = self.position(node_id)
        return self.node_ids[self.indices[self.indptr[i]:self.indptr[i + 1]]]

    def text(self, node_id):
        return self.texts[self.position(node_id)]

    def label(self, node_id):
        return None if self.labels is None else self.labels[self.position(node_id)]

    def title(self, node_id):
        return None if self.titles is None else self.titles[self.position(node_id)]

    def edge_list(self):
        """Undirected edges as ``(src_id, dst_id)`` with ``src < dst``."""
        out = []
        for i in range(self.num_nodes):
            for j in self.indices[self.indptr[i]:self.indptr[i + 1]]:
                if i < j:
                    out.append((int(self.node_ids[i]), int(self.node_ids[j])))
        return out

    def has_edge(self, u, v):
        i, j = self.position(u), self.position(v)
        row = self.indices[self.indptr[i]:self.indptr[i + 1]]
        k = np.searchsorted(row, j)
        return bool(k < len(row) and row[k] == j)

    def nodes_with_label(self, name):
        if self.labels is None:
            return np.empty(0, dtype=np.int64)
        return np.array([v for v, l in zip(self.node_ids, self.labels) if l == name],
                        dtype=np.int64)


@dataclass(frozen=True, eq=False)
class NeighborhoodSubgraph:
    """Hop-annotated node set around ``target``; members sorted by (hop, id)."""
    target: int
    members: np.ndarray
    hops: np.ndarray
    local_indptr: np.ndarray
    local_indices: np.ndarray
    local_features: np.ndarray
    local_texts: tuple

    def __len__(self):
        return len(self.members)

    def hop_of(self, node_id):
        return int(self.hops[list(self.members).index(node_id)])


def extract_neighborhood(graph, target, hops, max_neighbors, seed=0):
    """Breadth-first ``hops``-hop neighbourhood of ``target`` with a fan-out cap.

    At most ``max_neighbors`` non-target nodes are kept.  The cap is filled hop
    by hop: when a hop has more candidates than the remaining budget, a uniform
    sample (without replacement, from a generator seeded by ``(seed, target)``)
    is kept and expansion stops there.
    """
    if hops < 0 or max_neighbors < 0:
        raise InputError("hops and max_neighbors must be non-negative")
    t = graph.position(target)
    seen = np.zeros(graph.num_nodes, dtype=np.bool_)
    seen[t] = True
    rng = np.random.default_rng([int(seed), int(target)])
    layers = [np.array([t], dtype=np.int64)]
    budget = max_neighbors
    frontier = layers[0]
    for _ in range(hops):
        if budget == 0 or frontier.size == 0:
            break
        nxt = _kernels.next_frontier(graph.indptr, graph.indices, frontier, seen)
        if nxt.size == 0:
            break
        if nxt.size > budget:
            nxt = np.sort(rng.choice(nxt, size=budget, replace=False))
        budget -= nxt.size
        layers.append(nxt)
        frontier = nxt
    pos = np.concatenate(layers)
    hop_arr = np.concatenate([np.full(len(l), h, dtype=np.int64) for h, l in enumerate(layers)])
    local = np.full(graph.num_nodes, -1, dtype=np.int64)
    local[pos] = np.arange(len(pos))
    indptr = [0]
    indices = []
    for p in pos:
        nb = local[graph.indices[graph.indptr[p]:graph.indptr[p + 1]]]
        nb = np.sort(nb[nb >= 0])
        indices.append(nb)
        indptr.append(indptr[-1] + len(nb))
    return NeighborhoodSubgraph(
        target=int(target),
        members=graph.node_ids[pos],
        hops=hop_arr,
        local_indptr=np.asarray(indptr, dtype=np.int64),
        local_indices=np.concatenate(indices) if indices else np.empty(0, dtype=np.int64),
        local_features=graph.features[pos],
        local_texts=tuple(graph.texts[p] for p in pos),
    )


@dataclass(frozen=True)
class SyntheticTagSpec:
    num_classes: int = 5
    nodes_per_class: int = 50
    p_intra: float = 0.1
    p_inter: float = 0.01
    vocab_per_class: int = 12
    shared_vocab: int = 8
    text_len: int = 16

    def __post_init__(self):
        if self.num_classes < 2:
            raise InputError("num_classes must be >= 2")
        if self.nodes_per_class < 1 or self.vocab_per_class < 1 or self.text_len < 1:
            raise InputError("nodes_per_class, vocab_per_class and text_len must be >= 1")
        if self.shared_vocab < 0:
            raise InputError("shared_vocab must be >= 0")
        for name in ("p_intra", "p_inter"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InputError(f"{name} must lie in [0, 1], got {p}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_words(rng, count, taken):
    out = []
    while len(out) < count:
        w = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(3))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


TITLE_WORDS = 4


def make_lexicon(size, seed):
    """A seeded pool of pseudo-words that several graphs can draw vocabularies from."""
    return tuple(_pseudo_words(np.random.default_rng([int(seed), 7]), size, set()))


def generate_synthetic_tag(spec, seed, d_feat=64, feature_seed=0, lexicon=None):
    """Planted-partition graph with class-specific pseudo-word texts.

    Node ``i`` belongs to class ``i % num_classes``.  Class names are fresh
    three-syllable pseudo-words.  Class and shared vocabularies are fresh too,
    unless ``lexicon`` is given: then they are disjoint random slices of it, so
    graphs built on one lexicon speak the same language while partitioning it
    into different classes.  A node's title is the first few words of its text.
    """
    rng = np.random.default_rng(seed)
    c, m = spec.num_classes, spec.nodes_per_class
    n = c * m
    if lexicon is None:
        taken = set()
        class_names = _pseudo_words(rng, c, taken)
        vocabs = [_pseudo_words(rng, spec.vocab_per_class, taken) for _ in range(c)]
        shared = _pseudo_words(rng, spec.shared_vocab, taken)
    else:
        need = c * spec.vocab_per_class + spec.shared_vocab
        if need > len(lexicon):
            raise InputError(f"spec needs {need} distinct words, lexicon has {len(lexicon)}")
        class_names = _pseudo_words(rng, c, set(lexicon))
        drawn = [lexicon[int(i)] for i in rng.permutation(len(lexicon))[:need]]
        k = spec.vocab_per_class
        vocabs = [drawn[j * k:(j + 1) * k] for j in range(c)]
        shared = drawn[c * k:]
    cls_of = np.arange(n) % c
    texts = []
    for i in range(n):
        pool = vocabs[cls_of[i]] + shared
        picks = rng.integers(0, len(pool), size=spec.text_len)
        texts.append(" ".join(pool[k] for k in picks))
    iu, ju = np.triu_indices(n, k=1)
    draws = rng.random(len(iu))
    p = np.where(cls_of[iu] == cls_of[ju], spec.p_intra, spec.p_inter)
    keep = draws < p
    edges = list(zip(iu[keep].tolist(), ju[keep].tolist()))
    features = np.stack([featurize_text(t, d_feat, feature_seed) for t in texts])
    labels = [class_names[k] for k in cls_of]
    titles = [" ".join(t.split()[:TITLE_WORDS]) for t in texts]
    return TextAttributedGraph.from_edges(np.arange(n), edges, texts, features, labels,
                                          class_names, titles)


@dataclass(frozen=True)
class FewShotExampleSet:
    pairs: tuple
    K: int
    class_names: tuple

    @property
    def node_ids(self):
        return tuple(v for v, _ in self.pairs)


def sample_few_shot(graph, class_names, K, seed):
    """``K`` labelled nodes per class, uniformly without replacement."""
    if K < 0:
        raise InputError("K must be >= 0")
    rng = np.random.default_rng(seed)
    pairs = []
    for name in class_names:
        pool = graph.nodes_with_label(name)
        if len(pool) < K:
            raise InputError(f"class {name!r} has {len(pool)} labelled nodes, need {K}")
        picks = np.sort(rng.choice(pool, size=K, replace=False)) if K else []
        pairs.extend((int(v), name) for v in picks)
    return FewShotExampleSet(tuple(pairs), K, tuple(class_names))


# --------------------------------------------------------------------------
# JSON Lines files

def save_graph(graph, nodes_path, edges_path):
    with open(nodes_path, "w", encoding="utf-8") as fh:
        for i, v in enumerate(graph.node_ids):
            rec = {"id": int(v), "text": graph.texts[i],
                   "label": None if graph.labels is None else graph.labels[i]}
            if graph.titles is not None:
                rec["title"] = graph.titles[i]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(edges_path, "w", encoding="utf-8") as fh:
        for u, v in graph.edge_list():
            fh.write(json.dumps({"dst": v, "src": u}, sort_keys=True) + "\n")


def _read_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
    return out


def load_graph(nodes_path, edges_path, d_feat=64, feature_seed=0, directed=False):
    """Read a graph from node/edge JSON Lines files; features come from the text."""
    nodes = _read_jsonl(nodes_path)
    ids, texts, labels, titles = [], [], [], []
    for rec in nodes:
        if "id" not in rec or "text" not in rec:
            raise InputError(f"{nodes_path}: node record needs 'id' and 'text': {rec}")
        ids.append(int(rec["id"]))
        texts.append(str(rec["text"]))
        labels.append(rec.get("label"))
        titles.append(rec.get("title"))
    edges = []
    for rec in _read_jsonl(edges_path):
        if "src" not in rec or "dst" not in rec:
            raise InputError(f"{edges_path}: edge record needs 'src' and 'dst': {rec}")
        edges.append((int(rec["src"]), int(rec["dst"])))
    if directed:
        log.warning("%s: directed edge list symmetrised", edges_path)
    features = np.stack([featurize_text(t, d_feat, feature_seed) for t in texts]) \
        if texts else np.zeros((0, d_feat))
    has_labels = any(l is not None for l in labels)
    has_titles = any(t is not None for t in titles)
    return TextAttributedGraph.from_edges(
        ids, edges, texts, features,
        labels if has_labels else None, None,
        [t or "" for t in titles] if has_titles else None)


def graph_vocabulary(graphs: Sequence[TextAttributedGraph]):
    """All class names across ``graphs`` in first-seen order."""
    return tuple(dict.fromkeys(name for g in graphs for name in g.class_names))
