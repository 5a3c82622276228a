"""K-way classification accuracy, summary BLEU-1, answer parsing and prompt-length accounting."""
from __future__ import annotations

import csv
import json
import re
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .lm import generate_batch, load_template, tokenize
from .model import SUMMARY_TASK, classify_task_text, make_tensors
from .text import words


def parse_class_answer(text, class_names):
    """The class name occurring earliest in ``text`` on word boundaries, ignoring case."""
    if not class_names:
        raise InputError("class_names must be nonempty")
    low = text.lower()
    best, best_pos = None, None
    for name in class_names:
        m = re.search(r"(?<![a-z0-9])" + re.escape(name.lower()) + r"(?![a-z0-9])", low)
        if m and (best_pos is None or m.start() < best_pos):
            best, best_pos = name, m.start()
    return best


def bleu1(candidate, reference):
    """Clipped unigram precision times the brevity penalty."""
    cand, ref = words(candidate), words(reference)
    if not cand:
        return 0.0
    ref_counts = Counter(ref)
    clipped = sum(min(n, ref_counts[w]) for w, n in Counter(cand).items())
    c, r = len(cand), len(ref)
    bp = 1.0 if c > r else float(np.exp(1.0 - r / c))
    return bp * clipped / c


def icl_prompt_length(examples, graph, template, vocab, target_text="", task_text=""):
    """Tokens in an in-context prompt that spells out every example before the query.

    Each example contributes its text, a one-line description of its
    neighbourhood and its label.  The query part is the template with its node
    runs removed, so ``K = 0`` gives the bare template length.
    """
    text = load_template(template) if "<node_" not in template else template
    base = re.sub(r"<node_\w+>\s*(?:\.\.\.)?", "", text)
    base = re.sub(r"\{content(_\d+)?\}", target_text, base).replace("{task}", task_text)
    parts = []
    for v, label in getattr(examples, "pairs", examples):
        nbrs = graph.neighbors(v)
        parts.append(f"example : {graph.text(v)} . structure : node {v} has {len(nbrs)} "
                     f"neighbors {' '.join(str(u) for u in nbrs)} . answer : {label} .")
    return len(tokenize(" ".join(parts + [base]), vocab))


class ModelPredictor:
    """Generates answers from a graph model, optionally with adapter tensors applied."""

    def __init__(self, model, arrays=None, template="classify", subgraph_seed=0,
                 max_new_tokens=None, batch_size=32):
        self.model = model
        self.arrays = dict(model.arrays if arrays is None else arrays)
        self.template = template
        self.seed = subgraph_seed
        self.max_new_tokens = max_new_tokens or (64 if template == "summarize" else 16)
        self.batch_size = batch_size
        self._tensors = make_tensors(self.arrays, ())

    def __call__(self, graph, targets, task_text):
        out = []
        for s in range(0, len(targets), self.batch_size):
            chunk = list(targets[s:s + self.batch_size])
            qs = self.model.queries(self._tensors, graph, chunk, self.template, task_text,
                                    self.seed)
            out += generate_batch(qs, self.model.lm, self.max_new_tokens)
        return out

    @classmethod
    def from_checkpoints(cls, base, lm, adapter=None, **kw):
        model = base.model(lm)
        arrays = adapter.apply(base) if adapter is not None else None
        if adapter is not None:
            kw.setdefault("template", adapter.template)
        return cls(model, arrays, **kw)


@dataclass
class EvalReport:
    task: str
    ways: int
    shots: int
    accuracy_mean: float
    accuracy_std: float
    per_class: dict
    seconds_per_target: float
    seeds: tuple
    per_seed: tuple = ()
    predictions: list = field(default_factory=list, repr=False)

    def rows(self):
        yield ["task", "ways", "shots", "seed", "accuracy"]
        for s, a in zip(self.seeds, self.per_seed):
            yield [self.task, self.ways, self.shots, s, f"{a:.6f}"]
        yield [self.task, self.ways, self.shots, "mean", f"{self.accuracy_mean:.6f}"]
        yield [self.task, self.ways, self.shots, "std", f"{self.accuracy_std:.6f}"]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(self.rows())

    def write_predictions(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for p in self.predictions:
                fh.write(json.dumps(p, sort_keys=True) + "\n")

    def table(self):
        lines = [f"{self.task}: {self.ways}-way {self.shots}-shot, seeds {list(self.seeds)}",
                 f"  accuracy  {100 * self.accuracy_mean:6.2f} +- {100 * self.accuracy_std:.2f}",
                 f"  time/target  {1000 * self.seconds_per_target:.1f} ms"]
        for name, acc in self.per_class.items():
            lines.append(f"  {name:<16}{100 * acc:6.2f}")
        return "\n".join(lines)


def select_targets(graph, class_names, per_class, seed, exclude=()):
    """``per_class`` labelled nodes per class, never from ``exclude``, sorted."""
    rng = np.random.default_rng([int(seed), 5])
    skip = set(int(v) for v in exclude)
    picked = []
    for name in class_names:
        pool = [v for v in graph.nodes_with_label(name) if int(v) not in skip]
        if len(pool) < per_class:
            raise InputError(f"class {name!r} has {len(pool)} eligible targets, "
                             f"need {per_class}")
        picked += [int(v) for v in rng.choice(pool, size=per_class, replace=False)]
    return sorted(picked)


def evaluate_classification(predictor, graph, class_names, targets_per_way=20, seeds=(0,),
                            exclude=(), shots=0, task_text=None):
    """Exact-match accuracy of parsed generations, repeated over ``seeds``."""
    class_names = tuple(class_names)
    task_text = task_text or classify_task_text(class_names)
    accs, preds = [], []
    hits, totals = Counter(), Counter()
    elapsed, n = 0.0, 0
    for seed in seeds:
        targets = select_targets(graph, class_names, targets_per_way, seed, exclude)
        t0 = time.perf_counter()
        outs = predictor(graph, targets, task_text)
        elapsed += time.perf_counter() - t0
        n += len(targets)
        correct = 0
        for v, text in zip(targets, outs):
            gold = graph.label(v)
            parsed = parse_class_answer(text, class_names)
            ok = parsed == gold
            correct += ok
            hits[gold] += ok
            totals[gold] += 1
            preds.append({"seed": int(seed), "target": int(v), "gold": gold,
                          "generated": text, "parsed": parsed})
        accs.append(correct / len(targets))
    per_class = {c: hits[c] / totals[c] for c in class_names}
    return EvalReport("classify", len(class_names), shots, float(np.mean(accs)),
                      float(np.std(accs)), per_class, elapsed / max(n, 1), tuple(seeds),
                      tuple(accs), preds)


@dataclass
class SummaryReport:
    bleu1_mean: float
    count: int
    seconds_per_target: float
    predictions: list = field(default_factory=list, repr=False)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task", "targets", "bleu1"])
            w.writerow(["summarize", self.count, f"{self.bleu1_mean:.6f}"])

    def write_predictions(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for p in self.predictions:
                fh.write(json.dumps(p, sort_keys=True) + "\n")

    def table(self):
        return (f"summarize: {self.count} targets\n  BLEU-1  {self.bleu1_mean:.4f}\n"
                f"  time/target  {1000 * self.seconds_per_target:.1f} ms")


def evaluate_summaries(predictor, graph, targets, task_text=SUMMARY_TASK):
    """Mean BLEU-1 of generated text against each target's title."""
    if graph.titles is None:
        raise InputError("graph has no titles to score summaries against")
    targets = list(targets)
    if not targets:
        raise InputError("no summary targets given")
    t0 = time.perf_counter()
    outs = predictor(graph, targets, task_text)
    elapsed = time.perf_counter() - t0
    preds, scores = [], []
    for v, text in zip(targets, outs):
        ref = graph.title(v)
        score = bleu1(text, ref)
        scores.append(score)
        preds.append({"target": int(v), "reference": ref, "generated": text, "bleu1": score})
    return SummaryReport(float(np.mean(scores)), len(targets), elapsed / len(targets), preds)


def query_length(model, graph, target, template="classify", task_text="", seed=0):
    """Token count of the graph-model query for ``target`` (node slots included)."""
    tensors = make_tensors(model.arrays, ())
    return len(model.queries(tensors, graph, [target], template, task_text, seed)[0])

