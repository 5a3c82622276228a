"""Channel-masking gates and the task-text encoder that seeds the task mask."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ConfigError
from .text import featurize_text, words

EMPTY_TASK_MASK = 0.01


@dataclass
class GateParameters:
    """Task-invariant branch (``W_inv``, ``m_inv``), task-related branch
    (``W_rel``, ``m_rel``) and the mixing matrix ``W_agg`` of shape ``(g_out, 2g)``.

    ``m_rel`` may be ``None`` while pre-training, where it is produced by the
    task-text encoder for each task instead of being stored.
    """
    W_inv: object
    m_inv: object
    W_rel: object
    W_agg: object
    m_rel: object = None

    FROZEN_AFTER_PRETRAIN = ("W_inv", "m_inv")
    TUNABLE_IN_ADAPTATION = ("W_rel", "W_agg", "m_rel")

    @classmethod
    def init(cls, g, g_out, rng):
        s = 1.0 / np.sqrt(g)
        return cls(
            W_inv=ag.parameter(rng.normal(0.0, s, size=(g, g)), name="gate.W_inv"),
            m_inv=ag.parameter(np.ones(g), name="gate.m_inv"),
            W_rel=ag.parameter(rng.normal(0.0, s, size=(g, g)), name="gate.W_rel"),
            W_agg=ag.parameter(rng.normal(0.0, 1.0 / np.sqrt(2 * g), size=(g_out, 2 * g)),
                               name="gate.W_agg"),
        )

    @property
    def g(self):
        return self.W_inv.shape[0]

    @property
    def g_out(self):
        return self.W_agg.shape[0]


def gate_forward(x_hop, params, m_rel=None):
    """``W_agg [ (W_rel x) * m_rel ; (W_inv x) * m_inv ]`` for a vector or row batch."""
    x = ag.as_tensor(x_hop)
    m_rel = ag.as_tensor(params.m_rel if m_rel is None else m_rel)
    g = params.g
    if x.shape[-1] != g or params.W_agg.shape[1] != 2 * g or m_rel.shape != (g,):
        raise ConfigError(f"gate shapes inconsistent: input {x.shape}, g={g}, "
                          f"W_agg {params.W_agg.shape}, m_rel {m_rel.shape}")
    rel = ag.mul(ag.matmul(x, ag.transpose(ag.as_tensor(params.W_rel))), m_rel)
    inv = ag.mul(ag.matmul(x, ag.transpose(ag.as_tensor(params.W_inv))),
                 ag.as_tensor(params.m_inv))
    return ag.matmul(ag.concat([rel, inv], axis=-1), ag.transpose(ag.as_tensor(params.W_agg)))


@dataclass
class TaskTextEncoderParams:
    """Learned ``(g, d_bag)`` projection applied to a hashed bag of task words."""
    projection: object
    hash_seed: int = 0

    @classmethod
    def init(cls, g, d_bag, rng, hash_seed=0):
        return cls(ag.parameter(rng.normal(0.0, 1.0, size=(g, d_bag)), name="text.proj"),
                   hash_seed)

    @property
    def d_bag(self):
        return self.projection.shape[1]

    @property
    def g(self):
        return self.projection.shape[0]


def encode_task_text(task_text, params):
    """Initial task mask: projection times the hashed bag of words of ``task_text``.

    Text without any word falls back to the constant ``0.01`` so the task branch
    is never shut at initialisation.
    """
    bag = featurize_text(task_text, params.d_bag, params.hash_seed)
    if not words(task_text) or not bag.any():
        return ag.Tensor(np.full(params.g, EMPTY_TASK_MASK))
    return ag.matmul(ag.as_tensor(params.projection), ag.Tensor(bag))
