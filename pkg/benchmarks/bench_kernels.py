"""Time every kernel on its numba and numpy paths, and one end-to-end training step.

    python benchmarks/bench_kernels.py [--repeat 20]

Each kernel is called once before timing so numba compilation is excluded.
The end-to-end row re-runs this script with TAGLM_DISABLE_NUMBA=1 in a child
process, since the backend is fixed at import time.
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from taglm import _kernels as K


def _csr(rng, n, deg):
    counts = rng.integers(0, 2 * deg, size=n)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    indices = rng.integers(0, n, size=indptr[-1]).astype(np.int64)
    return indptr, indices


def cases(rng):
    indptr, indices = _csr(rng, 4000, 8)
    x = rng.normal(size=(4000, 64))
    logits = rng.normal(size=(2048, 800))
    targets = rng.integers(0, 800, size=2048)
    ln_x = rng.normal(size=(32 * 256, 64))
    xhat, rstd = K.NUMPY_KERNELS["layer_norm"](ln_x, 1e-5)
    scatter_idx = rng.integers(0, 800, size=4096)
    scatter_rows = rng.normal(size=(4096, 64))
    return {
        "segment_mean": lambda f: f(x, indptr, indices),
        "segment_mean_grad": lambda f: f(x, indptr, indices, 4000),
        "scatter_add_rows": lambda f: f(np.zeros((800, 64)), scatter_idx, scatter_rows),
        "next_frontier": lambda f: f(indptr, indices, np.arange(0, 4000, 7, dtype=np.int64),
                                     np.zeros(4000, dtype=np.bool_)),
        "xent_rows": lambda f: f(logits, targets),
        "layer_norm": lambda f: f(ln_x, 1e-5),
        "layer_norm_grad": lambda f: f(ln_x, xhat, rstd),
    }


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def train_step_seconds(repeat):
    """Seconds per pre-training step on a small synthetic graph."""
    from taglm.data import SyntheticTagSpec, generate_synthetic_tag
    from taglm.lm import LmConfig, LmParameters, Vocabulary
    from taglm.model import GraphLanguageModel, ModelConfig
    from taglm.training import node_matching_loss
    from taglm.optim import Adam

    g = generate_synthetic_tag(SyntheticTagSpec(nodes_per_class=20), 0, d_feat=32)
    lm = LmParameters.init(Vocabulary.build(list(g.texts)), LmConfig(d_lm=32, n_blocks=1), 0)
    model = GraphLanguageModel.init(ModelConfig(d_feat=32, d_bag=256), lm, 0)
    tensors = model.tensors(trainable=model.arrays)
    opt = Adam([tensors[k] for k in model.arrays], lr=1e-3)
    enc = np.random.default_rng(0).normal(size=(g.num_nodes, 32))
    batch = list(g.node_ids[:16])

    def step():
        opt.zero_grad()
        sgs = [model.subgraph(g, v, 0) for v in batch]
        tokens, _ = model.node_tokens(tensors, sgs, tensors["gate.m_inv"])
        pos = np.concatenate([[g.position(u) for u in sg.members] for sg in sgs])
        node_matching_loss(tokens, enc[pos]).backward()
        opt.step()

    return best_of(step, repeat)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--step-only", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.step_only:
        print(json.dumps({"step": train_step_seconds(args.repeat)}))
        return
    if not K.HAVE_NUMBA:
        sys.exit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, call in cases(rng).items():
        t_np = best_of(lambda: call(K.NUMPY_KERNELS[name]), args.repeat)
        t_nb = best_of(lambda: call(K.COMPILED_KERNELS[name]), args.repeat)
        print(f"{name:<20}{1e3 * t_np:>10.3f}{1e3 * t_nb:>10.3f}{t_np / t_nb:>8.1f}x")

    steps = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, TAGLM_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, __file__, "--step-only", "--repeat", "5"],
                             env=env, check=True, capture_output=True, text=True).stdout
        steps[label] = json.loads(out.strip().splitlines()[-1])["step"]
    print(f"{'train step':<20}{1e3 * steps['numpy']:>10.1f}{1e3 * steps['numba']:>10.1f}"
          f"{steps['numpy'] / steps['numba']:>8.1f}x")


if __name__ == "__main__":
    main()
