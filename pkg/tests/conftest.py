import numpy as np
import pytest

from taglm.data import TextAttributedGraph


def make_graph(n, edges, texts=None, d_feat=4, labels=None, class_names=None):
    texts = texts or [f"node {i}" for i in range(n)]
    feats = np.random.default_rng(n).normal(size=(n, d_feat))
    return TextAttributedGraph.from_edges(np.arange(n), edges, texts, feats, labels, class_names)


@pytest.fixture
def star():
    # 0 is the hub; 1..3 hang off it
    return make_graph(4, [(0, 1), (0, 2), (0, 3)])


@pytest.fixture
def chain():
    return make_graph(4, [(0, 1), (1, 2), (2, 3)])


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE = {}


def record(criterion, passed, detail):
    line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
