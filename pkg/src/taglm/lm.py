"""A tiny word-level decoder-only transformer that stays frozen once bootstrapped.

It plays two roles: it encodes node text into a single vector (mean of final
hidden states) and it answers task queries in which some input positions carry
injected node embeddings instead of token embeddings.
"""
from __future__ import annotations

import hashlib
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import autograd as ag
from .errors import InputError
from .optim import Adam
from .text import words

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK, NODE = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>", "<node>")


class Vocabulary:
    """Bijective word <-> id map with five reserved ids at the front."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise InputError("vocabulary tokens must be unique")
        self.tokens = tuple(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, corpus, cap=2000):
        counts = Counter(w for text in corpus for w in words(text))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        keep = [w for w, _ in ranked[:max(0, cap - len(RESERVED))]]
        return cls(list(RESERVED) + keep)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word):
        return word in self.index

    def id(self, word):
        return self.index.get(word, UNK)


def tokenize(text, vocab):
    return np.array([vocab.id(w) for w in words(text)], dtype=np.int64)


def detokenize(ids, vocab):
    return " ".join(vocab.tokens[int(i)] for i in ids)


# --------------------------------------------------------------------------
# parameters

@dataclass(frozen=True)
class LmConfig:
    d_lm: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    d_ff: int = 256
    context: int = 256
    vocab_cap: int = 2000


def _sinusoid(context, d):
    pos = np.arange(context)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return 0.1 * np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _block_names(b):
    return [f"b{b}.{n}" for n in ("ln1_g", "ln1_b", "Wq", "Wk", "Wv", "Wo",
                                  "ln2_g", "ln2_b", "W1", "b1", "W2", "b2")]


@dataclass(eq=False)
class LmParameters:
    """Vocabulary, config and named weight arrays.  The output head is tied to
    the token embedding table, plus a free output bias."""
    vocab: Vocabulary
    config: LmConfig
    arrays: dict
    _tensors: dict = field(default=None, repr=False)

    @classmethod
    def init(cls, vocab, config, seed):
        rng = np.random.default_rng(seed)
        d, f = config.d_lm, config.d_ff
        s_in = 1.0 / np.sqrt(d)
        s_out = s_in / np.sqrt(2 * config.n_blocks)
        arrays = {"tok_emb": rng.normal(0.0, 0.1, size=(len(vocab), d)),
                  "pos": _sinusoid(config.context, d)}
        for b in range(config.n_blocks):
            arrays.update({
                f"b{b}.ln1_g": np.ones(d), f"b{b}.ln1_b": np.zeros(d),
                f"b{b}.Wq": rng.normal(0.0, s_in, size=(d, d)),
                f"b{b}.Wk": rng.normal(0.0, s_in, size=(d, d)),
                f"b{b}.Wv": rng.normal(0.0, s_in, size=(d, d)),
                f"b{b}.Wo": rng.normal(0.0, s_out, size=(d, d)),
                f"b{b}.ln2_g": np.ones(d), f"b{b}.ln2_b": np.zeros(d),
                f"b{b}.W1": rng.normal(0.0, s_in, size=(d, f)), f"b{b}.b1": np.zeros(f),
                f"b{b}.W2": rng.normal(0.0, 1.0 / np.sqrt(f) / np.sqrt(2 * config.n_blocks),
                                       size=(f, d)),
                f"b{b}.b2": np.zeros(d),
            })
        arrays.update({"lnf_g": np.ones(d), "lnf_b": np.zeros(d),
                       "out_bias": np.zeros(len(vocab))})
        return cls(vocab, config, arrays)

    def names(self):
        out = ["tok_emb", "pos"]
        for b in range(self.config.n_blocks):
            out += _block_names(b)
        return out + ["lnf_g", "lnf_b", "out_bias"]

    def frozen(self):
        """Mark every array read-only and return self."""
        for a in self.arrays.values():
            a.flags.writeable = False
        self._tensors = None
        return self

    def tensors(self):
        """Constant (no-gradient) tensor views, cached."""
        if self._tensors is None:
            self._tensors = {k: ag.Tensor(v) for k, v in self.arrays.items()}
        return self._tensors

    def digest(self):
        h = hashlib.sha256()
        h.update("\n".join(self.vocab.tokens).encode("utf-8"))
        for name in self.names():
            a = np.ascontiguousarray(self.arrays[name], dtype="<f8")
            h.update(name.encode())
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        return h.hexdigest()

    @property
    def d_lm(self):
        return self.config.d_lm


# --------------------------------------------------------------------------
# forward pass

def forward(params, x):
    """Final-layer (post-norm) hidden states for input embeddings ``x`` (B, T, d).

    ``params`` maps names to tensors; causal masking is always on.
    """
    cfg_heads = params["_heads"]
    B, T, d = x.shape
    if T > params["pos"].shape[0]:
        raise InputError(f"sequence of {T} positions exceeds the context window")
    h = ag.add(x, ag.Tensor(params["pos"].data[:T]))
    dh = d // cfg_heads
    b = 0
    while f"b{b}.Wq" in params:
        p = lambda n: params[f"b{b}.{n}"]
        a = ag.layer_norm(h, p("ln1_g"), p("ln1_b"))

        def heads(w):
            return ag.transpose(ag.reshape(ag.matmul(a, w), (B, T, cfg_heads, dh)), (0, 2, 1, 3))

        o = ag.causal_attention(heads(p("Wq")), heads(p("Wk")), heads(p("Wv")))
        o = ag.reshape(ag.transpose(o, (0, 2, 1, 3)), (B, T, d))
        h = ag.add(h, ag.matmul(o, p("Wo")))
        a = ag.layer_norm(h, p("ln2_g"), p("ln2_b"))
        m = ag.gelu(ag.add(ag.matmul(a, p("W1")), p("b1")))
        h = ag.add(h, ag.add(ag.matmul(m, p("W2")), p("b2")))
        b += 1
    return ag.layer_norm(h, params["lnf_g"], params["lnf_b"])


def logits_from_hidden(params, hidden_rows):
    return ag.add(ag.matmul(hidden_rows, ag.transpose(params["tok_emb"])), params["out_bias"])


def _param_view(lm, tensors=None):
    view = dict(tensors if tensors is not None else lm.tensors())
    view["_heads"] = lm.config.n_heads
    return view


def _pad(seqs, fill=PAD):
    T = max(len(s) for s in seqs)
    out = np.full((len(seqs), T), fill, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def lm_encode_texts(texts, lm, batch_size=64):
    """Mean final hidden state over ``<bos> + tokens`` for each text; shape (n, d_lm)."""
    view = _param_view(lm)
    out = np.zeros((len(texts), lm.d_lm))
    ctx = lm.config.context
    for start in range(0, len(texts), batch_size):
        chunk = texts[start:start + batch_size]
        seqs = [np.concatenate([[BOS], tokenize(t, lm.vocab)])[:ctx] for t in chunk]
        ids = _pad(seqs)
        hid = forward(view, ag.gather_rows(view["tok_emb"], ids)).data
        for j, s in enumerate(seqs):
            out[start + j] = hid[j, :len(s)].mean(axis=0)
    return out


def lm_encode_text(text, lm):
    return lm_encode_texts([text], lm)[0]


# --------------------------------------------------------------------------
# templates and mixed sequences

TEMPLATE_IDS = ("node_match", "classify", "link_predict", "summarize")
_RUN = re.compile(r"<node_(\w+)>\s*(?:\.\.\.)?")
_FIELD = re.compile(r"\{(\w+)\}")


def load_template(name):
    if name not in TEMPLATE_IDS:
        raise InputError(f"unknown template {name!r}; expected one of {TEMPLATE_IDS}")
    return resources.files("taglm").joinpath("templates").joinpath(f"{name}.txt").read_text("utf-8").strip()


@dataclass
class MixedSequence:
    """Token ids where ``NODE`` ids mark injected slots.

    ``node_embeddings[k]`` fills position ``node_positions[k]``;
    ``answer_span`` is a half-open range of supervised positions.
    """
    token_ids: np.ndarray
    node_positions: np.ndarray
    node_embeddings: object
    answer_span: tuple = (0, 0)
    run_starts: tuple = ()

    def __len__(self):
        return len(self.token_ids)

    @property
    def target_positions(self):
        return tuple(int(self.node_positions[s]) for s in self.run_starts)


def _template_pieces(template):
    """Split a template into ('text', str) and ('run', index) pieces."""
    pieces, pos = [], 0
    for k, m in enumerate(_RUN.finditer(template)):
        pieces.append(("text", template[pos:m.start()]))
        pieces.append(("run", k))
        pos = m.end()
    pieces.append(("text", template[pos:]))
    return pieces


def build_task_query(node_embeddings, target_text, task_text, template, vocab):
    """Instantiate ``template`` with node runs, content text and task text.

    ``node_embeddings`` is one (n, d) block per ``<node_*> ...`` run in the
    template (a single block may be passed for one-run templates).  ``target_text``
    is a string, or a tuple with one string per run for multi-run templates.
    """
    text = template if "<node_" in template or "{" in template else load_template(template)
    pieces = _template_pieces(text)
    n_runs = sum(1 for kind, _ in pieces if kind == "run")
    runs = node_embeddings
    if n_runs == 1 and not isinstance(runs, (list, tuple)):
        runs = [runs]
    if len(runs) != n_runs:
        raise InputError(f"template has {n_runs} node runs but {len(runs)} embedding blocks given")
    contents = (target_text,) if isinstance(target_text, str) else tuple(target_text)
    fields_ = {"task": task_text, "content": contents[0]}
    for i, c in enumerate(contents, 1):
        fields_[f"content_{i}"] = c

    def fill(m):
        if m.group(1) not in fields_:
            raise InputError(f"template field {{{m.group(1)}}} has no value")
        return fields_[m.group(1)]

    ids, node_pos, run_starts, blocks = [], [], [], []
    for kind, val in pieces:
        if kind == "text":
            ids.extend(tokenize(_FIELD.sub(fill, val), vocab).tolist())
            continue
        block = runs[val]
        n = block.shape[0]
        if n < 1:
            raise InputError("every node run needs at least the target node")
        run_starts.append(len(node_pos))
        node_pos.extend(range(len(ids), len(ids) + n))
        ids.extend([NODE] * n)
        blocks.append(block)
    if all(isinstance(b, np.ndarray) for b in blocks):
        emb = np.concatenate(blocks, axis=0)
    else:
        emb = ag.concat(blocks, axis=0)
    return MixedSequence(np.asarray(ids, dtype=np.int64), np.asarray(node_pos, dtype=np.int64),
                         emb, (len(ids), len(ids)), tuple(run_starts))


def with_answer(query, answer_text, vocab, eos=True):
    """Copy of ``query`` with answer tokens (and EOS) appended and supervised."""
    ans = tokenize(answer_text, vocab).tolist() + ([EOS] if eos else [])
    if not ans:
        raise InputError("answer is empty")
    start = len(query.token_ids)
    ids = np.concatenate([query.token_ids, np.asarray(ans, dtype=np.int64)])
    return MixedSequence(ids, query.node_positions, query.node_embeddings,
                         (start, start + len(ans)), query.run_starts)


def assemble_inputs(seqs, lm, view=None):
    """Padded (B, T, d) input tensor with node embeddings injected."""
    view = view or _param_view(lm)
    ids = _pad([s.token_ids for s in seqs])
    base = view["tok_emb"].data[ids]
    T = ids.shape[1]
    flat_pos = np.concatenate([i * T + s.node_positions for i, s in enumerate(seqs)])
    blocks = [s.node_embeddings for s in seqs if len(s.node_positions)]
    if not blocks:
        return ag.Tensor(base), ids
    rows = ag.concat([ag.as_tensor(b) for b in blocks], axis=0)
    return ag.place_rows(base, rows, flat_pos), ids


def answer_cross_entropy_batch(seqs, lm, view=None):
    """Mean over sequences of the mean answer-token cross-entropy."""
    for s in seqs:
        if s.answer_span[1] <= s.answer_span[0]:
            raise InputError("answer span is empty")
    view = view or _param_view(lm)
    x, ids = assemble_inputs(seqs, lm, view)
    hidden = forward(view, x)
    B, T, d = hidden.shape
    rows, targets, weights = [], [], []
    for i, s in enumerate(seqs):
        a, b = s.answer_span
        n = b - a
        rows.extend(i * T + p - 1 for p in range(a, b))
        targets.extend(ids[i, a:b].tolist())
        weights.extend([1.0 / (n * len(seqs))] * n)
    h = ag.gather_rows(ag.reshape(hidden, (B * T, d)), np.asarray(rows))
    return ag.cross_entropy(logits_from_hidden(view, h), targets, weights)


def answer_cross_entropy(query, lm):
    return answer_cross_entropy_batch([query], lm)


def next_token_logits(query, lm, extra=()):
    view = _param_view(lm)
    seq = MixedSequence(np.concatenate([query.token_ids, np.asarray(extra, dtype=np.int64)]),
                        query.node_positions, query.node_embeddings)
    x, _ = assemble_inputs([seq], lm, view)
    hidden = forward(view, x)
    return logits_from_hidden(view, hidden[0, len(seq) - 1]).data


def _detached(query):
    if isinstance(query.node_embeddings, ag.Tensor):
        return MixedSequence(query.token_ids, query.node_positions, query.node_embeddings.data,
                             query.answer_span, query.run_starts)
    return query


def generate_batch(queries, lm, max_new_tokens=16):
    """Greedy decoding for several queries at once; same output as :func:`generate`."""
    if max_new_tokens < 1:
        raise InputError("max_new_tokens must be >= 1")
    queries = [_detached(q) for q in queries]
    view = _param_view(lm)
    outs = [[] for _ in queries]
    budget = [min(max_new_tokens, lm.config.context - len(q.token_ids)) for q in queries]
    live = [i for i, b in enumerate(budget) if b > 0]
    while live:
        seqs = [MixedSequence(np.concatenate([queries[i].token_ids,
                                              np.asarray(outs[i], dtype=np.int64)]),
                              queries[i].node_positions, queries[i].node_embeddings)
                for i in live]
        x, _ = assemble_inputs(seqs, lm, view)
        hidden = forward(view, x).data
        last = hidden[np.arange(len(seqs)), [len(s) - 1 for s in seqs]]
        toks = np.argmax(logits_from_hidden(view, ag.Tensor(last)).data, axis=1)
        still = []
        for i, tok in zip(live, toks):
            if tok == EOS:
                continue
            outs[i].append(int(tok))
            if len(outs[i]) < budget[i]:
                still.append(i)
        live = still
    return [detokenize(o, lm.vocab) for o in outs]


def generate(query, lm, max_new_tokens=16):
    """Greedy decoding until EOS or ``max_new_tokens``; returns the words produced."""
    if max_new_tokens < 1:
        raise InputError("max_new_tokens must be >= 1")
    query = _detached(query)
    out = []
    room = lm.config.context - len(query.token_ids)
    for _ in range(min(max_new_tokens, room)):
        tok = int(np.argmax(next_token_logits(query, lm, out)))
        if tok == EOS:
            break
        out.append(tok)
    return detokenize(out, lm.vocab)


# --------------------------------------------------------------------------
# bootstrap training

@dataclass(frozen=True)
class BootstrapConfig:
    lr: float = 3e-3
    batch_size: int = 32
    max_steps: int = 1500
    plateau_window: int = 100
    plateau_tol: float = 1e-3


def lm_loss_batch(seqs, view):
    """Mean next-token cross-entropy over ``<bos> + seq + <eos>`` for each sequence."""
    full = [np.concatenate([[BOS], s, [EOS]]) for s in seqs]
    ids = _pad(full)
    B, T = ids.shape
    x = ag.gather_rows(view["tok_emb"], ids)
    hidden = forward(view, x)
    rows, targets = [], []
    for i, s in enumerate(full):
        rows.extend(i * T + t for t in range(len(s) - 1))
        targets.extend(s[1:].tolist())
    h = ag.gather_rows(ag.reshape(hidden, (B * T, hidden.shape[2])), np.asarray(rows))
    return ag.cross_entropy(logits_from_hidden(view, h), targets)


def lm_bootstrap(corpus, config=None, seed=0, lm_config=None, log_fn=None):
    """Train a fresh decoder on ``corpus`` by next-token prediction; return it frozen.

    Stops at ``max_steps`` or when the mean loss of the last window stops
    improving on the previous window by more than ``plateau_tol``.
    """
    corpus = [c for c in corpus if words(c)]
    if not corpus:
        raise InputError("bootstrap corpus is empty")
    config = config or BootstrapConfig()
    lm_config = lm_config or LmConfig()
    vocab = Vocabulary.build(corpus, lm_config.vocab_cap)
    lm = LmParameters.init(vocab, lm_config, seed)
    trainable = {k: ag.parameter(v, name=k) for k, v in lm.arrays.items() if k != "pos"}
    view = _param_view(lm, {**trainable, "pos": ag.Tensor(lm.arrays["pos"])})
    opt = Adam(list(trainable.values()), lr=config.lr)
    seqs = [tokenize(c, vocab)[:lm_config.context - 2] for c in corpus]
    rng = np.random.default_rng(seed)
    losses, step = [], 0
    w = config.plateau_window
    while step < config.max_steps:
        order = rng.permutation(len(seqs))
        for start in range(0, len(order), config.batch_size):
            batch = [seqs[i] for i in order[start:start + config.batch_size]]
            opt.zero_grad()
            loss = lm_loss_batch(batch, view)
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
            if log_fn is not None:
                log_fn(step, "bootstrap", losses[-1])
            step += 1
            if step >= config.max_steps:
                break
            if step >= 2 * w and step % w == 0:
                prev = np.mean(losses[-2 * w:-w])
                cur = np.mean(losses[-w:])
                if prev - cur < config.plateau_tol:
                    log.info("bootstrap plateau at step %d (loss %.4f)", step, cur)
                    step = config.max_steps
                    break
    arrays = {k: t.data.copy() for k, t in trainable.items()}
    arrays["pos"] = lm.arrays["pos"]
    return LmParameters(vocab, lm_config, arrays).frozen(), losses


def corpus_loss(corpus, lm, batch_size=64):
    """Mean next-token loss of ``lm`` over ``corpus`` (token-weighted)."""
    view = _param_view(lm)
    total, count = 0.0, 0
    seqs = [tokenize(c, lm.vocab)[:lm.config.context - 2] for c in corpus if words(c)]
    for start in range(0, len(seqs), batch_size):
        batch = seqs[start:start + batch_size]
        n = sum(len(s) + 1 for s in batch)
        total += float(lm_loss_batch(batch, view).data) * n
        count += n
    return total / count
