"""Mean-aggregation GNN over neighbourhood subgraphs, plus hop encodings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ConfigError


@dataclass
class SubgraphBatch:
    """Several subgraphs stacked as one disjoint graph.

    ``offsets[i]:offsets[i + 1]`` are the rows belonging to subgraph ``i``.
    """
    features: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    hops: np.ndarray
    offsets: np.ndarray

    def __len__(self):
        return len(self.offsets) - 1

    def rows(self, i):
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))


def batch_subgraphs(subgraphs):
    feats, hops, indices, indptr, offsets = [], [], [], [np.zeros(1, dtype=np.int64)], [0]
    base = edges = 0
    for sg in subgraphs:
        feats.append(sg.local_features)
        hops.append(sg.hops)
        indices.append(sg.local_indices + base)
        indptr.append(sg.local_indptr[1:] + edges)
        base += len(sg.members)
        edges += len(sg.local_indices)
        offsets.append(base)
    return SubgraphBatch(
        features=np.concatenate(feats, axis=0),
        indptr=np.concatenate(indptr).astype(np.int64),
        indices=np.concatenate(indices).astype(np.int64),
        hops=np.concatenate(hops).astype(np.int64),
        offsets=np.asarray(offsets, dtype=np.int64),
    )


def as_batch(subgraph):
    return subgraph if isinstance(subgraph, SubgraphBatch) else batch_subgraphs([subgraph])


@dataclass
class GnnParameters:
    """Per-layer weights ``W_l`` of shape ``(d_hidden, 2 * d_in(l))``; ReLU activation."""
    weights: list
    activation: str = "relu"

    @classmethod
    def init(cls, d_feat, d_gnn, num_layers, rng):
        if num_layers < 1:
            raise ConfigError("the GNN needs at least one layer")
        weights, d_in = [], d_feat
        for l in range(num_layers):
            w = rng.normal(0.0, np.sqrt(2.0 / (2 * d_in)), size=(d_gnn, 2 * d_in))
            weights.append(ag.parameter(w, name=f"gnn.W{l}"))
            d_in = d_gnn
        return cls(weights)

    @property
    def d_out(self):
        return self.weights[-1].shape[0]


def gnn_forward(subgraph, params):
    """``h_u <- relu(W_l [h_u ; mean_{z in N(u)} h_z])`` for every layer.

    Accepts one :class:`NeighborhoodSubgraph` or a :class:`SubgraphBatch`; returns
    an ``(n_members, d_gnn)`` tensor in member order.
    """
    batch = as_batch(subgraph)
    h = ag.Tensor(batch.features)
    for l, w in enumerate(params.weights):
        w = ag.as_tensor(w)
        if w.shape[1] != 2 * h.shape[1]:
            raise ConfigError(f"GNN layer {l} expects input dim {w.shape[1] // 2}, "
                              f"got {h.shape[1]}")
        agg = ag.segment_mean(h, batch.indptr, batch.indices)
        h = ag.relu(ag.matmul(ag.concat([h, agg], axis=1), ag.transpose(w)))
    return h


@dataclass
class HopEncodingTable:
    """Rows ``e_0 .. e_lambda``; row ``i`` is appended to members at hop ``i``."""
    encodings: object

    @classmethod
    def init(cls, hops, d_hop, rng):
        while True:
            e = rng.uniform(-0.1, 0.1, size=(hops + 1, d_hop))
            if len({tuple(r) for r in e}) == hops + 1:
                return cls(ag.parameter(e, name="hop.E"))

    @property
    def max_hop(self):
        return self.encodings.shape[0] - 1


def attach_hop_encodings(embeddings, hops, table):
    """Concatenate each member's embedding with the encoding of its hop index."""
    hops = np.asarray(getattr(hops, "hops", hops), dtype=np.int64)
    if hops.size and (hops.min() < 0 or hops.max() > table.max_hop):
        raise RuntimeError(f"hop index {int(hops.max())} outside table of "
                           f"{table.max_hop + 1} rows")
    rows = ag.gather_rows(ag.as_tensor(table.encodings), hops)
    return ag.concat([ag.as_tensor(embeddings), rows], axis=1)
