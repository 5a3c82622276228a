"""Pre-training, few-shot adaptation, parameter accounting and gradient checks."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .data import SyntheticTagSpec, generate_synthetic_tag
from .errors import ConfigError, InputError
from .gate import TaskTextEncoderParams, encode_task_text
from .lm import LmConfig, LmParameters, Vocabulary, answer_cross_entropy_batch, \
    lm_encode_texts, with_answer
from .model import LINK_TASK, MATCH_TASK, AdapterCheckpoint, GraphLanguageModel, \
    ModelCheckpoint, ModelConfig, classify_task_text, parameter_shapes
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs_match: int = 20
    epochs_classify: int = 3
    epochs_link: int = 1
    epochs_adapt: int = 60
    adapt_lr: float = 1e-2
    batch_size: int = 16
    seed: int = 0
    include_hop_encodings: bool = True
    weight_match: float = 1.0
    weight_classify: float = 1.0
    weight_link: float = 1.0

    def __post_init__(self):
        for name in ("lr", "adapt_lr", "eps", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        for name in ("epochs_match", "epochs_classify", "epochs_link", "epochs_adapt"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train.beta1 and train.beta2 must lie in [0, 1)")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class LossLog:
    """Per-step ``(step, stage, loss)`` rows, written out as CSV."""

    def __init__(self):
        self.rows = []

    def __call__(self, step, stage, loss):
        self.rows.append((int(step), stage, float(loss)))

    def trace(self, stage=None):
        return np.array([l for _, s, l in self.rows if stage is None or s == stage])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "stage", "loss"])
            for step, stage, loss in self.rows:
                w.writerow([step, stage, repr(loss)])


def node_matching_loss(projected, text_encodings, gamma=0.01):
    """Mean over rows of ``exp(-gamma cos(x, c)) + ||x - c||^2`` on unit-normalised rows.

    Zero rows normalise to zero, which makes their cosine term 0.
    """
    if gamma <= 0:
        raise InputError("gamma must be positive")
    x = ag.l2_normalize(ag.as_tensor(projected))
    c = ag.l2_normalize(ag.as_tensor(text_encodings))
    if x.shape != c.shape:
        raise InputError(f"projected {x.shape} and text encodings {c.shape} differ in shape")
    cos = ag.tsum(ag.mul(x, c), axis=-1)
    dist = ag.tsum(ag.square(ag.add(x, ag.neg(c))), axis=-1)
    return ag.mean(ag.add(ag.exp(ag.mul(cos, -gamma)), dist))


# --------------------------------------------------------------------------
# parameter partition and accounting

def adaptation_tunable(model_config, include_hop_encodings=True):
    """Names of the tensors tuned in adaptation for this configuration.

    With the gate bypassed there is no task branch to tune, so the GNN takes
    its place.
    """
    cfg = model_config
    if cfg.use_gate:
        names = ["gate.m_rel", "gate.W_rel", "gate.W_agg"]
    else:
        names = [f"gnn.W{l}" for l in range(cfg.gnn_layers)]
    if include_hop_encodings and cfg.use_hop:
        names.append("hop.E")
    return names


def count_tunable_parameters(model_config, include_hop_encodings=True):
    """Per-tensor element counts of the adaptation set, plus ``"total"``."""
    cfg = model_config
    if not cfg.use_gate:
        raise ConfigError("parameter accounting is defined for the gated model")
    g, g_out = cfg.g, cfg.gate_out
    counts = {"gate.m_rel": g, "gate.W_rel": g * g, "gate.W_agg": g_out * 2 * g}
    if include_hop_encodings and cfg.use_hop:
        counts["hop.E"] = (cfg.hops + 1) * cfg.d_hop
    counts["total"] = sum(counts.values())
    return counts


def count_pretrain_parameters(model_config, d_lm):
    """Per-tensor element counts of everything pre-training updates, plus ``"total"``."""
    counts = {k: int(np.prod(s)) for k, s in parameter_shapes(model_config, d_lm).items()}
    counts["total"] = sum(counts.values())
    return counts


# --------------------------------------------------------------------------
# pre-training

def _batches(items, size, rng):
    order = rng.permutation(len(items))
    return [[items[i] for i in order[s:s + size]] for s in range(0, len(order), size)]


def _link_pairs(graph, rng):
    """Every edge once as a positive plus as many uniform non-edges."""
    pos = graph.edge_list()
    n = graph.num_nodes
    if n < 2:
        return []
    neg, seen = [], set()
    limit = n * (n - 1) // 2 - len(pos)
    while len(neg) < min(len(pos), limit):
        a, b = rng.integers(0, n, size=2)
        u, v = int(graph.node_ids[a]), int(graph.node_ids[b])
        key = (min(u, v), max(u, v))
        if u == v or key in seen or graph.has_edge(u, v):
            continue
        seen.add(key)
        neg.append(key)
    items = [((u, v), "yes") for u, v in pos] + [((u, v), "no") for u, v in neg]
    return items


class _Stepper:
    def __init__(self, tensors, trainable, lr, config, loss_log):
        self.params = [tensors[k] for k in sorted(trainable)]
        self.opt = Adam(self.params, lr=lr, betas=(config.beta1, config.beta2), eps=config.eps)
        self.log = loss_log
        self.step = 0

    def __call__(self, stage, loss, weight=1.0):
        self.opt.zero_grad()
        (loss * weight if weight != 1.0 else loss).backward()
        self.opt.step()
        if self.log is not None:
            self.log(self.step, stage, float(loss.data))
        self.step += 1


def pretrain(graphs, lm, config=None, model_config=None, loss_log=None):
    """Node matching, then classification, then link prediction; returns a checkpoint.

    Every graph-side tensor is trained; the LM is only read.
    """
    config = config or TrainConfig()
    model_config = model_config or ModelConfig()
    graphs = list(graphs)
    if not graphs:
        raise InputError("pretrain needs at least one graph")
    for gi, graph in enumerate(graphs):
        if graph.d_feat != model_config.d_feat:
            raise ConfigError(f"graph {gi} has feature dim {graph.d_feat}, "
                              f"model.d_feat is {model_config.d_feat}")
    if config.epochs_classify > 0:
        for gi, graph in enumerate(graphs):
            if graph.labels is None or any(l is None for l in graph.labels):
                raise InputError(f"graph {gi} lacks labels needed by the classification stage")

    lm_digest = lm.digest()
    model = GraphLanguageModel.init(model_config, lm, config.seed)
    tensors = model.tensors(trainable=model.arrays)
    step = _Stepper(tensors, tensors.keys(), config.lr, config, loss_log)
    rng = np.random.default_rng([config.seed, 1])
    sg_seed = config.seed
    use_gate = model_config.use_gate

    text_enc = [lm_encode_texts(list(g.texts), lm) for g in graphs]
    for _ in range(config.epochs_match):
        for gi, graph in enumerate(graphs):
            for batch in _batches(list(graph.node_ids), config.batch_size, rng):
                sgs = [model.subgraph(graph, v, sg_seed) for v in batch]
                m_rel = model.task_mask(tensors, MATCH_TASK) if use_gate else None
                tokens, _ = model.node_tokens(tensors, sgs, m_rel)
                pos = np.concatenate([[graph.position(u) for u in sg.members] for sg in sgs])
                step("match", node_matching_loss(tokens, text_enc[gi][pos], model_config.gamma),
                     config.weight_match)

    for _ in range(config.epochs_classify):
        for graph in graphs:
            task = classify_task_text(graph.class_names)
            for batch in _batches(list(graph.node_ids), config.batch_size, rng):
                qs = model.queries(tensors, graph, batch, "classify", task, sg_seed)
                seqs = [with_answer(q, graph.label(v), lm.vocab) for q, v in zip(qs, batch)]
                step("classify", answer_cross_entropy_batch(seqs, lm), config.weight_classify)

    for _ in range(config.epochs_link):
        for graph in graphs:
            items = _link_pairs(graph, rng)
            for batch in _batches(items, config.batch_size, rng):
                qs = model.queries(tensors, graph, [p for p, _ in batch], "link_predict",
                                   LINK_TASK, sg_seed)
                seqs = [with_answer(q, a, lm.vocab) for q, (_, a) in zip(qs, batch)]
                step("link", answer_cross_entropy_batch(seqs, lm), config.weight_link)

    if lm.digest() != lm_digest:
        raise RuntimeError("language model parameters changed during pre-training")
    arrays = {k: t.data.copy() for k, t in tensors.items()}
    return ModelCheckpoint(model_config, arrays, lm_digest, config.to_dict())


# --------------------------------------------------------------------------
# adaptation

def adapt(base, lm, target, examples, task_text, config=None, loss_log=None,
          template="classify"):
    """Tune only the adaptation set on few-shot ``(node, answer)`` pairs.

    ``examples`` is a :class:`FewShotExampleSet` or any sequence of pairs; the
    answer string is appended to each query and supervised.
    """
    config = config or TrainConfig()
    cfg = base.config
    if target.d_feat != cfg.d_feat:
        raise ConfigError(f"target graph feature dim {target.d_feat} does not match the "
                          f"base model's {cfg.d_feat}")
    pairs = list(getattr(examples, "pairs", examples))
    if not pairs:
        raise InputError("adaptation needs at least one example")
    model = base.model(lm)
    arrays = dict(model.arrays)
    trainable = adaptation_tunable(cfg, config.include_hop_encodings)
    if cfg.use_gate:
        proj = TaskTextEncoderParams(ag.Tensor(arrays["text.proj"]), cfg.text_seed)
        arrays["gate.m_rel"] = encode_task_text(task_text, proj).data.copy()
    tensors = {k: (ag.parameter(v, name=k) if k in trainable else ag.Tensor(v))
               for k, v in arrays.items()}
    for k in trainable:
        tensors[k].data = tensors[k].data.copy()
    step = _Stepper(tensors, trainable, config.adapt_lr, config, loss_log)
    rng = np.random.default_rng([config.seed, 2])
    for _ in range(config.epochs_adapt):
        for batch in _batches(pairs, config.batch_size, rng):
            qs = model.queries(tensors, target, [v for v, _ in batch], template, task_text,
                               config.seed)
            seqs = [with_answer(q, a, lm.vocab) for q, (_, a) in zip(qs, batch)]
            step("adapt", answer_cross_entropy_batch(seqs, lm))
    return AdapterCheckpoint({k: tensors[k].data.copy() for k in trainable}, task_text,
                             base.digest(), template)


# --------------------------------------------------------------------------
# gradient verification

@dataclass
class GradCheckReport:
    errors: dict  # name -> max relative error, or None for tensors not checked
    tolerance: float

    @property
    def max_error(self):
        vals = [e for e in self.errors.values() if e is not None]
        return max(vals) if vals else 0.0

    @property
    def passed(self):
        return self.max_error < self.tolerance


def _tiny_instance(seed):
    spec = SyntheticTagSpec(num_classes=3, nodes_per_class=3, p_intra=0.7, p_inter=0.2,
                            vocab_per_class=3, shared_vocab=2, text_len=4)
    graph = generate_synthetic_tag(spec, seed, d_feat=6)
    words = sorted({w for t in graph.texts for w in t.split()} | set(graph.class_names))
    vocab = Vocabulary(words + "node tokens the first token is target content task answer "
                       "which category fits".split())
    lm_cfg = LmConfig(d_lm=8, n_blocks=1, n_heads=2, d_ff=16, context=96, vocab_cap=200)
    lm = LmParameters.init(vocab, lm_cfg, seed).frozen()
    mcfg = ModelConfig(d_feat=6, d_gnn=4, gnn_layers=2, d_hop=2, hops=2, max_neighbors=6,
                       d_bag=16)
    return graph, lm, mcfg


def gradient_check(component="full", loss="match", tolerance=1e-4, seed=0, stage="pretrain",
                   step=1e-5):
    """Analytic vs central-difference gradients on a small random instance.

    ``component`` selects the tensors to perturb: ``"full"`` (all trainable in
    ``stage``) or a name prefix such as ``"gnn"``, ``"gate"`` or ``"proj"``.
    Tensors that are frozen in ``stage`` or outside the component report None.
    """
    if tolerance <= 0:
        raise ConfigError("tolerance must be positive")
    if loss not in ("match", "answer"):
        raise ConfigError(f"unknown loss {loss!r}")
    graph, lm, mcfg = _tiny_instance(seed)
    model = GraphLanguageModel.init(mcfg, lm, seed)
    arrays = dict(model.arrays)
    rng = np.random.default_rng([seed, 3])
    task = classify_task_text(graph.class_names)
    if stage == "adapt":
        arrays["gate.m_rel"] = rng.normal(size=mcfg.g)
        trainable = set(adaptation_tunable(mcfg, True))
    elif stage == "pretrain":
        trainable = set(arrays)
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    # hop encodings at their small init would leave many ReLU-free paths untested
    arrays["hop.E"] = rng.normal(size=arrays["hop.E"].shape)
    checked = {k for k in trainable if component == "full" or k.startswith(component)}
    targets = [int(v) for v in graph.node_ids[:2]]
    enc = lm_encode_texts(list(graph.texts), lm) if loss == "match" else None

    def objective(tensors):
        if loss == "match":
            sgs = [model.subgraph(graph, v, seed) for v in targets]
            tokens, _ = model.node_tokens(tensors, sgs, model.task_mask(tensors, MATCH_TASK))
            pos = np.concatenate([[graph.position(u) for u in sg.members] for sg in sgs])
            return node_matching_loss(tokens, enc[pos], mcfg.gamma)
        qs = model.queries(tensors, graph, targets, "classify", task, seed)
        seqs = [with_answer(q, graph.label(v), lm.vocab) for q, v in zip(qs, targets)]
        return answer_cross_entropy_batch(seqs, lm)

    tensors = {k: (ag.parameter(v.copy(), name=k) if k in checked else ag.Tensor(v))
               for k, v in arrays.items()}
    objective(tensors).backward()
    errors = {k: None for k in arrays}
    for k in sorted(checked):
        t = tensors[k]
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = float(objective(tensors).data)
            flat[i] = old - step
            down = float(objective(tensors).data)
            flat[i] = old
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
        errors[k] = float(np.abs(analytic - numeric).max() / scale)
    return GradCheckReport(errors, tolerance)
