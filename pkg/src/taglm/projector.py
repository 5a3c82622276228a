"""Affine bridge from gate-output space into the language model's embedding space."""
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ConfigError


@dataclass
class ProjectorParameters:
    W: object  # (d_lm, g_out)
    b: object  # (d_lm,)

    @classmethod
    def init(cls, g_out, d_lm, rng):
        return cls(ag.parameter(rng.normal(0.0, 1.0 / np.sqrt(g_out), size=(d_lm, g_out)),
                                name="proj.W"),
                   ag.parameter(np.zeros(d_lm), name="proj.b"))

    @property
    def d_lm(self):
        return self.W.shape[0]


def project(x_gate, params):
    x = ag.as_tensor(x_gate)
    if x.shape[-1] != params.W.shape[1]:
        raise ConfigError(f"projector expects input dim {params.W.shape[1]}, got {x.shape[-1]}")
    return ag.add(ag.matmul(x, ag.transpose(ag.as_tensor(params.W))), ag.as_tensor(params.b))
