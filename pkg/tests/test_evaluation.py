import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from taglm.corpus import build_bootstrap_corpus
from taglm.data import SyntheticTagSpec, generate_synthetic_tag, sample_few_shot
from taglm.errors import InputError
from taglm.evaluation import EvalReport, bleu1, evaluate_classification, evaluate_summaries, \
    icl_prompt_length, parse_class_answer, select_targets
from taglm.lm import Vocabulary, load_template
from taglm.text import words


@pytest.fixture(scope="module")
def graph():
    return generate_synthetic_tag(SyntheticTagSpec(5, 30, 0.1, 0.01), 0, d_feat=8)


def test_parse_answers():
    names = ("Databases", "Neural Networks")
    assert parse_class_answer("this article belongs to Neural Networks", names) == "Neural Networks"
    assert parse_class_answer("no idea", names) is None
    assert parse_class_answer("Databases or Neural Networks", names) == "Databases"
    assert parse_class_answer("neural networksx", names) is None
    with pytest.raises(InputError):
        parse_class_answer("x", ())


@pytest.mark.parametrize("cand, ref, expect", [("the cat sat", "the cat sat", 1.0),
                                               ("the the the", "the cat", 1 / 3),
                                               ("the", "the cat sat", np.exp(-2))])
def test_bleu_oracles(cand, ref, expect):
    assert abs(bleu1(cand, ref) - expect) < 1e-12


def test_bleu_empty_candidate():
    assert bleu1("", "the cat") == 0.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from("abcde"), max_size=8), st.lists(st.sampled_from("abcdef"),
                                                                min_size=1, max_size=8),
       st.randoms())
def test_bleu_range_and_order_invariance(cand, ref, rnd):
    b = bleu1(" ".join(cand), " ".join(ref))
    assert 0.0 <= b <= 1.0
    shuffled = list(cand)
    rnd.shuffle(shuffled)
    assert b == pytest.approx(bleu1(" ".join(shuffled), " ".join(ref)))


def oracle(graph):
    return lambda g, targets, task: [f"it is {g.label(v)}" for v in targets]


def test_perfect_predictor(graph):
    r = evaluate_classification(oracle(graph), graph, graph.class_names, 10, seeds=(0, 1))
    assert r.accuracy_mean == 1.0 and r.accuracy_std == 0.0
    assert all(v == 1.0 for v in r.per_class.values())


def test_constant_predictor_is_chance(graph):
    name = graph.class_names[2]
    r = evaluate_classification(lambda g, t, task: [name] * len(t), graph, graph.class_names, 10)
    assert r.accuracy_mean == pytest.approx(0.2)


def test_random_predictor_near_chance(graph):
    rng = np.random.default_rng(0)
    names = graph.class_names
    r = evaluate_classification(lambda g, t, task: [names[rng.integers(5)] for _ in t], graph,
                                names, 25, seeds=range(4))
    # 500 targets: 3 binomial standard deviations is about 0.054
    assert abs(r.accuracy_mean - 0.2) < 0.06


def test_targets_exclude_examples(graph):
    ex = sample_few_shot(graph, graph.class_names, 5, 0)
    t = select_targets(graph, graph.class_names, 25, 0, ex.node_ids)
    assert not set(t) & set(ex.node_ids) and len(t) == 125
    with pytest.raises(InputError, match="eligible"):
        select_targets(graph, graph.class_names, 26, 0, ex.node_ids)


def test_report_files(graph, tmp_path):
    r = evaluate_classification(oracle(graph), graph, graph.class_names, 2, seeds=(0, 1))
    r.write_csv(tmp_path / "r.csv")
    r.write_predictions(tmp_path / "p.jsonl")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "task,ways,shots,seed,accuracy" and rows[-2].endswith("1.000000")
    preds = [json.loads(l) for l in (tmp_path / "p.jsonl").read_text().splitlines()]
    assert len(preds) == 20 and preds[0]["parsed"] == preds[0]["gold"]
    assert "accuracy" in r.table()
    assert isinstance(r, EvalReport)


def test_summary_evaluation(graph, tmp_path):
    echo = lambda g, targets, task: [g.title(v) for v in targets]
    rep = evaluate_summaries(echo, graph, [0, 1, 2])
    assert rep.bleu1_mean == 1.0 and rep.count == 3
    rep.write_csv(tmp_path / "s.csv")
    assert "summarize,3,1.000000" in (tmp_path / "s.csv").read_text()
    with pytest.raises(InputError):
        evaluate_summaries(echo, graph, [])


def test_icl_length_grows_with_shots(graph):
    vocab = Vocabulary.build(list(graph.texts) + [load_template("classify")])
    base = icl_prompt_length([], graph, "classify", vocab)
    body = load_template("classify").replace("<node_1> ...", "")
    assert base == len(words(body.replace("{content}", "").replace("{task}", "")))
    lengths = [icl_prompt_length(sample_few_shot(graph, graph.class_names, k, 0), graph,
                                 "classify", vocab) for k in (0, 1, 5, 20)]
    assert lengths[0] == base
    assert all(a < b for a, b in zip(lengths, lengths[1:]))


def test_bootstrap_corpus(graph):
    other = generate_synthetic_tag(SyntheticTagSpec(3, 5), 9, d_feat=8)
    corpus = build_bootstrap_corpus([graph, other], n_classify=20, n_link=10, n_summary=10)
    assert len(corpus) == graph.num_nodes + other.num_nodes + 40
    qa = corpus[graph.num_nodes + other.num_nodes:]
    assert sum(q.endswith((" yes", " no")) for q in qa) >= 10
    assert corpus == build_bootstrap_corpus([graph, other], n_classify=20, n_link=10,
                                            n_summary=10)
    cls = [q for q in qa if "which category" in q]
    for q in cls:
        answer = q.split()[-1]
        slots = q.split("node tokens ")[1].split(" the first node token")[0].split()
        counts = {w: slots.count(w) for w in set(slots) if w in set(graph.class_names)
                  | set(other.class_names)}
        assert max(counts, key=counts.get) == answer
