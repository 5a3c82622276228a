"""The graph-to-token pipeline: GNN -> hop encodings -> gates -> projector.

Parameters live in a flat ``name -> array`` dict so the pre-training and
adaptation stages can decide per tensor what is trainable.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from . import checkpoint
from .data import extract_neighborhood
from .encoder import GnnParameters, HopEncodingTable, attach_hop_encodings, batch_subgraphs, \
    gnn_forward
from .errors import ConfigError, InputError
from .gate import GateParameters, TaskTextEncoderParams, encode_task_text, gate_forward
from .lm import LmConfig, LmParameters, Vocabulary, build_task_query, load_template
from .projector import ProjectorParameters, project

MATCH_TASK = "match each node token with its own text"
LINK_TASK = "are the two target nodes linked"
SUMMARY_TASK = "write a short title for the target node"


# positions kept free after a query for the answer
ANSWER_ROOM = 16


def _trim(sizes, over):
    """Shrink the largest runs one slot at a time until ``over`` slots are gone."""
    sizes = list(sizes)
    for _ in range(over):
        k = max(range(len(sizes)), key=lambda i: (sizes[i], -i))
        if sizes[k] <= 1:
            raise InputError("task text alone exceeds the language model context")
        sizes[k] -= 1
    return sizes


def classify_task_text(class_names):
    return "which category fits the target node : " + " , ".join(class_names)


@dataclass(frozen=True)
class ModelConfig:
    d_feat: int = 64
    feature_seed: int = 0
    d_gnn: int = 32
    gnn_layers: int = 3
    d_hop: int = 4
    hops: int = 2
    max_neighbors: int = 100
    g_out: Optional[int] = None
    d_bag: int = 16384
    text_seed: int = 0
    gamma: float = 0.01
    use_gate: bool = True
    use_hop: bool = True

    @property
    def g(self):
        return self.d_gnn + self.d_hop

    @property
    def gate_out(self):
        if not self.use_gate:
            return self.g
        return self.g_out or self.g

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def parameter_shapes(cfg, d_lm):
    """Every graph-side tensor and its shape for a config (LM excluded)."""
    shapes = {}
    d_in = cfg.d_feat
    for l in range(cfg.gnn_layers):
        shapes[f"gnn.W{l}"] = (cfg.d_gnn, 2 * d_in)
        d_in = cfg.d_gnn
    if cfg.use_hop:
        shapes["hop.E"] = (cfg.hops + 1, cfg.d_hop)
    if cfg.use_gate:
        g = cfg.g
        shapes.update({"gate.W_inv": (g, g), "gate.m_inv": (g,), "gate.W_rel": (g, g),
                       "gate.W_agg": (cfg.gate_out, 2 * g), "text.proj": (g, cfg.d_bag)})
    shapes.update({"proj.W": (d_lm, cfg.gate_out), "proj.b": (d_lm,)})
    return shapes


def init_parameters(cfg, d_lm, seed):
    rng = np.random.default_rng([int(seed), 17])
    gnn = GnnParameters.init(cfg.d_feat, cfg.d_gnn, cfg.gnn_layers, rng)
    arrays = {w.name: w.data for w in gnn.weights}
    if cfg.use_hop:
        arrays["hop.E"] = HopEncodingTable.init(cfg.hops, cfg.d_hop, rng).encodings.data
    if cfg.use_gate:
        gate = GateParameters.init(cfg.g, cfg.gate_out, rng)
        for t in (gate.W_inv, gate.m_inv, gate.W_rel, gate.W_agg):
            arrays[t.name] = t.data
        arrays["text.proj"] = TaskTextEncoderParams.init(cfg.g, cfg.d_bag, rng).projection.data
    proj = ProjectorParameters.init(cfg.gate_out, d_lm, rng)
    arrays["proj.W"], arrays["proj.b"] = proj.W.data, proj.b.data
    return arrays


def make_tensors(arrays, trainable):
    """Fresh tensors over copies of ``arrays``; names in ``trainable`` get gradients."""
    return {k: (ag.parameter(v, name=k) if k in trainable else ag.Tensor(np.array(v)))
            for k, v in arrays.items()}


class GraphLanguageModel:
    """Graph-side parameters plus the frozen LM, with query construction helpers."""

    def __init__(self, config, lm, arrays):
        expected = parameter_shapes(config, lm.d_lm)
        missing = set(expected) - set(arrays)
        if missing:
            raise ConfigError(f"missing parameter tensors: {sorted(missing)}")
        for k, shape in expected.items():
            if tuple(arrays[k].shape) != tuple(shape):
                raise ConfigError(f"{k} has shape {arrays[k].shape}, config implies {shape}")
        self.config = config
        self.lm = lm
        self.arrays = {k: arrays[k] for k in expected}
        self._subgraphs = {}

    @classmethod
    def init(cls, config, lm, seed):
        return cls(config, lm, init_parameters(config, lm.d_lm, seed))

    # -- pieces
    def subgraph(self, graph, target, seed):
        key = (id(graph), int(target), int(seed))
        sg = self._subgraphs.get(key)
        if sg is None:
            sg = extract_neighborhood(graph, target, self.config.hops,
                                      self.config.max_neighbors, seed)
            self._subgraphs[key] = sg
        return sg

    def task_mask(self, tensors, task_text):
        if "gate.m_rel" in tensors:
            return tensors["gate.m_rel"]
        return encode_task_text(task_text, TaskTextEncoderParams(tensors["text.proj"],
                                                                 self.config.text_seed))

    def node_tokens(self, tensors, subgraphs, m_rel=None):
        """Projected node tokens for every member of every subgraph, stacked."""
        cfg = self.config
        batch = batch_subgraphs(subgraphs)
        if batch.features.shape[1] != cfg.d_feat:
            raise ConfigError(f"graph features have dim {batch.features.shape[1]}, "
                              f"model expects {cfg.d_feat}")
        gnn = GnnParameters([tensors[f"gnn.W{l}"] for l in range(cfg.gnn_layers)])
        h = gnn_forward(batch, gnn)
        if cfg.use_hop:
            x = attach_hop_encodings(h, batch.hops, HopEncodingTable(tensors["hop.E"]))
        else:
            x = ag.concat([h, ag.Tensor(np.zeros((h.shape[0], cfg.d_hop)))], axis=1)
        if cfg.use_gate:
            gate = GateParameters(tensors["gate.W_inv"], tensors["gate.m_inv"],
                                  tensors["gate.W_rel"], tensors["gate.W_agg"])
            x = gate_forward(x, gate, m_rel)
        return project(x, ProjectorParameters(tensors["proj.W"], tensors["proj.b"])), batch

    def queries(self, tensors, graph, items, template, task_text, seed):
        """Mixed sequences for ``items`` (node ids, or ``(u, v)`` pairs for two-run templates)."""
        tmpl = load_template(template)
        m_rel = self.task_mask(tensors, task_text) if self.config.use_gate else None
        groups = [(it,) if np.isscalar(it) else tuple(it) for it in items]
        sgs = [self.subgraph(graph, v, seed) for grp in groups for v in grp]
        tokens, batch = self.node_tokens(tensors, sgs, m_rel)
        out, k = [], 0
        for grp in groups:
            blocks, texts = [], []
            for v in grp:
                blocks.append(tokens[batch.rows(k)])
                texts.append(graph.text(v))
                k += 1
            q = build_task_query(blocks, tuple(texts), task_text, tmpl, self.lm.vocab)
            over = len(q) - (self.lm.config.context - ANSWER_ROOM)
            if over > 0:
                blocks = [b[:n] for b, n in zip(blocks, _trim([b.shape[0] for b in blocks], over))]
                q = build_task_query(blocks, tuple(texts), task_text, tmpl, self.lm.vocab)
            out.append(q)
        return out

    def tensors(self, trainable=()):
        return make_tensors(self.arrays, set(trainable))

    # -- persistence
    def digest(self):
        return checkpoint.tensors_digest(self.arrays)


@dataclass
class ModelCheckpoint:
    """Graph-side parameters, their config, and the digest of the LM they expect."""
    config: ModelConfig
    arrays: dict
    lm_digest: str
    train_config: dict = dataclasses.field(default_factory=dict)
    version: int = checkpoint.VERSION

    KIND = "model"

    def meta(self):
        return {"kind": self.KIND, "model_config": self.config.to_dict(),
                "lm_digest": self.lm_digest, "train_config": self.train_config}

    def encode(self):
        return checkpoint.encode(self.meta(), {k: self.arrays[k] for k in sorted(self.arrays)})

    def save(self, path):
        return checkpoint.save(path, self.meta(), {k: self.arrays[k] for k in sorted(self.arrays)})

    @classmethod
    def load(cls, path):
        meta, tensors = checkpoint.load(path)
        if meta.get("kind") != cls.KIND:
            raise InputError(f"{path} is a {meta.get('kind')!r} file, not a model checkpoint")
        return cls(ModelConfig.from_dict(meta["model_config"]), tensors, meta["lm_digest"],
                   meta.get("train_config", {}))

    def digest(self):
        return checkpoint.tensors_digest(self.arrays)

    def model(self, lm):
        if lm.digest() != self.lm_digest:
            raise ConfigError("language model does not match the one this checkpoint was "
                              "trained against")
        return GraphLanguageModel(self.config, lm, self.arrays)


@dataclass
class AdapterCheckpoint:
    """The adaptation-tunable tensors for one (graph, task) pair."""
    arrays: dict
    task_text: str
    base_digest: str
    template: str = "classify"

    KIND = "adapter"

    def meta(self):
        return {"kind": self.KIND, "task_text": self.task_text, "base_digest": self.base_digest,
                "template": self.template}

    def encode(self):
        return checkpoint.encode(self.meta(), {k: self.arrays[k] for k in sorted(self.arrays)})

    def save(self, path):
        return checkpoint.save(path, self.meta(), {k: self.arrays[k] for k in sorted(self.arrays)})

    @classmethod
    def load(cls, path):
        meta, tensors = checkpoint.load(path)
        if meta.get("kind") != cls.KIND:
            raise InputError(f"{path} is a {meta.get('kind')!r} file, not an adapter")
        return cls(tensors, meta["task_text"], meta["base_digest"], meta.get("template", "classify"))

    def apply(self, base):
        """Model arrays with this adapter's tensors substituted in."""
        if base.digest() != self.base_digest:
            raise ConfigError("adapter was tuned against a different base checkpoint")
        arrays = dict(base.arrays)
        for k, v in self.arrays.items():
            if k != "gate.m_rel" and k not in arrays:
                raise ConfigError(f"adapter tensor {k} has no counterpart in the base model")
            if k in arrays and arrays[k].shape != v.shape:
                raise ConfigError(f"adapter tensor {k} has shape {v.shape}, "
                                  f"base has {arrays[k].shape}")
        arrays.update(self.arrays)
        return arrays


def save_lm(path, lm):
    meta = {"kind": "lm", "vocab": list(lm.vocab.tokens),
            "lm_config": dataclasses.asdict(lm.config)}
    return checkpoint.save(path, meta, {k: lm.arrays[k] for k in lm.names()})


def load_lm(path):
    meta, tensors = checkpoint.load(path)
    if meta.get("kind") != "lm":
        raise InputError(f"{path} is a {meta.get('kind')!r} file, not a language model")
    return LmParameters(Vocabulary(meta["vocab"]), LmConfig(**meta["lm_config"]), tensors).frozen()
