"""Oracle cases for the text featurizer, GNN, hop encodings, gates and projector."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from taglm import autograd as ag
from taglm.data import extract_neighborhood
from taglm.encoder import GnnParameters, HopEncodingTable, attach_hop_encodings, gnn_forward
from taglm.errors import ConfigError
from taglm.gate import GateParameters, TaskTextEncoderParams, encode_task_text, gate_forward
from taglm.projector import ProjectorParameters, project
from taglm.text import featurize_text, token_hash, words

from conftest import make_graph


# -- text features

def test_empty_text_is_zero():
    assert not featurize_text("", 8).any()


def test_bag_of_words_ignores_order():
    assert np.array_equal(featurize_text("a a b", 32), featurize_text("b a a", 32))


def test_single_token_hash():
    bucket, sign = token_hash("graph", 8, 0)
    expect = np.zeros(8)
    expect[bucket] = sign
    assert np.array_equal(featurize_text("graph", 8, 0), expect)


def test_words_fold_case():
    assert words("Graph, graph!") == ["graph", "graph"]


@settings(max_examples=50, deadline=None)
@given(st.text(alphabet="abc xyz19", max_size=40), st.integers(1, 64))
def test_features_unit_or_zero(text, d):
    v = featurize_text(text, d)
    n = np.linalg.norm(v)
    assert n == 0.0 or abs(n - 1.0) < 1e-12


# -- GNN

def _one_layer(W, n, edges, feats):
    g = make_graph(n, edges, d_feat=feats.shape[1])
    object.__setattr__(g, "features", feats)
    sg = extract_neighborhood(g, 0, 1, 100)
    return gnn_forward(sg, GnnParameters([ag.Tensor(np.asarray(W, float))])).data


def test_isolated_node_relu_clip():
    W = np.hstack([np.eye(2), np.zeros((2, 2))])
    out = _one_layer(W, 1, [], np.array([[1.0, -2.0]]))
    assert np.array_equal(out[0], [1.0, 0.0])


def test_single_neighbour_sum():
    W = np.hstack([np.eye(2), np.eye(2)])
    out = _one_layer(W, 2, [(0, 1)], np.array([[1.0, 0.0], [3.0, 2.0]]))
    assert np.array_equal(out[0], [4.0, 2.0])


def test_neighbour_order_does_not_matter():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(6, 3))
    edges = [(0, i) for i in range(1, 6)] + [(1, 2), (3, 4)]
    g1 = make_graph(6, edges, d_feat=3)
    g2 = make_graph(6, list(reversed(edges)), d_feat=3)
    object.__setattr__(g1, "features", feats)
    object.__setattr__(g2, "features", feats)
    params = GnnParameters.init(3, 4, 2, np.random.default_rng(1))
    a = gnn_forward(extract_neighborhood(g1, 0, 2, 100), params).data
    b = gnn_forward(extract_neighborhood(g2, 0, 2, 100), params).data
    assert np.allclose(a, b, atol=1e-12)


def test_gnn_dim_mismatch():
    g = make_graph(2, [(0, 1)], d_feat=3)
    params = GnnParameters.init(5, 4, 1, np.random.default_rng(0))
    with pytest.raises(ConfigError, match="expects input dim 5"):
        gnn_forward(extract_neighborhood(g, 0, 1, 10), params)


# -- hop encodings

def test_hop_concat_shape_and_lookup(chain):
    sg = extract_neighborhood(chain, 1, 2, 100)  # hops 0,1,1,2
    table = HopEncodingTable.init(2, 4, np.random.default_rng(0))
    out = attach_hop_encodings(ag.Tensor(np.zeros((len(sg), 3))), sg, table).data
    assert out.shape == (4, 7)
    E = table.encodings.data
    assert np.array_equal(out[0, 3:], E[0])
    assert np.array_equal(out[1, 3:], out[2, 3:])
    assert np.array_equal(out[3, 3:], E[2])


def test_hop_out_of_range():
    table = HopEncodingTable.init(1, 2, np.random.default_rng(0))
    with pytest.raises(RuntimeError, match="outside table"):
        attach_hop_encodings(np.zeros((2, 1)), np.array([0, 2]), table)


# -- gates

def _gate(m_rel):
    I = np.eye(2)
    return GateParameters(I, np.ones(2), I, np.array([[1, 0, 1, 0], [0, 1, 0, 1]], float),
                          np.asarray(m_rel, float))


@pytest.mark.parametrize("m_rel, expect", [((1, 1), (6, 8)), ((0, 0), (3, 4)),
                                           ((2, 0), (9, 4))])
def test_gate_oracles(m_rel, expect):
    out = gate_forward(np.array([3.0, 4.0]), _gate(m_rel)).data
    assert np.array_equal(out, expect)


def test_gate_rejects_bad_mask():
    with pytest.raises(ConfigError):
        gate_forward(np.ones(2), _gate((1, 1, 1)))


def test_task_text_encoding():
    params = TaskTextEncoderParams.init(5, 64, np.random.default_rng(0))
    a = encode_task_text("classify the article", params).data
    assert a.shape == (5,)
    assert np.array_equal(a, encode_task_text("classify the article", params).data)
    assert np.array_equal(encode_task_text("", params).data, np.full(5, 0.01))
    assert np.array_equal(encode_task_text(" ,, ", params).data, np.full(5, 0.01))


# -- projector

def test_projector_affine():
    rng = np.random.default_rng(0)
    p = ProjectorParameters.init(6, 4, rng)
    p.b.data[:] = rng.normal(size=4)
    x = rng.normal(size=(3, 6))
    z = project(np.zeros(6), p).data
    assert np.array_equal(z, p.b.data)
    assert np.allclose(project(2 * x, p).data - z, 2 * (project(x, p).data - z), atol=1e-10)
    assert project(x, p).shape == (3, 4)
    with pytest.raises(ConfigError):
        project(np.zeros(5), p)
