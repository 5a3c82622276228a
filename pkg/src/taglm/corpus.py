"""Bootstrap corpus for the frozen LM: raw node texts plus templated Q/A strings.

In the Q/A strings every node slot is written as a plain word.  Class slots
hold class names and a question's answer is the name that occurs most often
among them, so the LM learns to read a label off a bag of node tokens without
ever seeing a real node's label.  Distractor slots hold ordinary text words.
"""
from __future__ import annotations

import re

import numpy as np

from .data import TITLE_WORDS
from .errors import InputError
from .lm import load_template
from .model import LINK_TASK, SUMMARY_TASK, classify_task_text
from .text import words


def _render(template, runs, contents, task):
    """Fill a template with word runs in place of node placeholders."""
    it = iter(runs)
    text = re.sub(r"<node_\w+>\s*(?:\.\.\.)?", lambda m: " ".join(next(it)) + " ", template)
    fields = {"task": task, "content": contents[0]}
    for i, c in enumerate(contents, 1):
        fields[f"content_{i}"] = c
    return re.sub(r"\{(\w+)\}", lambda m: fields[m.group(1)], text)


def _bag(rng, candidates, filler, max_slots):
    """Slot words with a unique plurality class name; returns (slots, answer)."""
    n = int(rng.integers(1, max_slots + 1))
    answer = candidates[int(rng.integers(len(candidates)))]
    n_class = max(1, int(round(n * rng.uniform(0.3, 1.0))))
    others = [c for c in candidates if c != answer]
    while True:
        share = rng.dirichlet(np.ones(len(candidates)))
        counts = rng.multinomial(n_class, share)
        top = counts.max()
        if (counts == top).sum() == 1:
            break
    order = np.argsort(-counts, kind="stable")
    # the most frequent draw is relabelled as ``answer``
    names = [answer] + list(rng.permutation(others))
    slots = []
    for rank, k in enumerate(order):
        slots += [names[rank]] * int(counts[k])
    slots += [filler[int(i)] for i in rng.integers(0, len(filler), size=n - n_class)]
    slots = [slots[int(i)] for i in rng.permutation(len(slots))]
    return slots, answer


def build_bootstrap_corpus(graphs, n_classify=1500, n_link=600, n_summary=600, ways=5,
                           max_slots=40, seed=0):
    """Node texts of ``graphs`` followed by shuffled synthetic Q/A strings.

    Class names come from every graph's declared class set; node labels are
    never read.
    """
    rng = np.random.default_rng(seed)
    texts = [t for g in graphs for t in g.texts if words(t)]
    if not texts:
        raise InputError("graphs carry no text to build a corpus from")
    names = sorted({c for g in graphs for c in (g.class_names or ())})
    if len(names) < 2:
        raise InputError("need at least two class names across the graphs")
    ways = min(ways, len(names))
    name_set = set(names)
    filler = sorted({w for t in texts for w in words(t)} - name_set)

    cls_t, link_t, sum_t = (load_template(n) for n in ("classify", "link_predict", "summarize"))
    qa = []
    for _ in range(n_classify):
        cands = [names[int(i)] for i in rng.choice(len(names), size=ways, replace=False)]
        slots, answer = _bag(rng, cands, filler, max_slots)
        content = texts[int(rng.integers(len(texts)))]
        qa.append(_render(cls_t, [slots], [content], classify_task_text(cands)) + " " + answer)
    for i in range(n_link):
        cands = [names[int(j)] for j in rng.choice(len(names), size=ways, replace=False)]
        a, pa = _bag(rng, cands, filler, max_slots)
        same = i % 2 == 0
        while True:
            b, pb = _bag(rng, cands, filler, max_slots)
            if (pa == pb) == same:
                break
        c1, c2 = (texts[int(j)] for j in rng.integers(0, len(texts), size=2))
        qa.append(_render(link_t, [a, b], [c1, c2], LINK_TASK) + (" yes" if same else " no"))
    for _ in range(n_summary):
        cands = [names[int(j)] for j in rng.choice(len(names), size=ways, replace=False)]
        slots, _ = _bag(rng, cands, filler, max_slots)
        content = texts[int(rng.integers(len(texts)))]
        title = " ".join(words(content)[:TITLE_WORDS])
        qa.append(_render(sum_t, [slots], [content], SUMMARY_TASK) + " " + title)
    qa = [qa[int(i)] for i in rng.permutation(len(qa))]
    return texts + qa
