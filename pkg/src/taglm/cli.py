"""Command line entry point: ``taglm <subcommand> --config run.yaml --out DIR``.

Exit status is 0 on success, 1 on a usage error and 2 on a data or config error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

from . import __version__
from ._kernels import backend
from .config import RunConfig
from .corpus import build_bootstrap_corpus
from .data import generate_synthetic_tag, load_graph, make_lexicon, sample_few_shot, save_graph
from .errors import ConfigError, InputError
from .evaluation import ModelPredictor, evaluate_classification, evaluate_summaries, \
    icl_prompt_length, query_length, select_targets
from .lm import lm_bootstrap
from .model import AdapterCheckpoint, ModelCheckpoint, classify_task_text, load_lm, save_lm
from .training import LossLog, adapt, count_pretrain_parameters, count_tunable_parameters, \
    pretrain

log = logging.getLogger("taglm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    """An output directory that records what it produced."""

    def __init__(self, path, command, cfg):
        self.path = path
        self.command = command
        self.cfg = cfg
        self.files = []
        self.inputs = {}
        os.makedirs(path, exist_ok=True)
        self.write_text("config.yaml", cfg.dump())
        self.write_text("seed.txt", f"{cfg.seed}\n")

    def file(self, name):
        if name not in self.files:
            self.files.append(name)
        return os.path.join(self.path, name)

    def write_text(self, name, text):
        with open(self.file(name), "w", encoding="utf-8") as fh:
            fh.write(text)

    def write_json(self, name, obj):
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def finish(self):
        manifest = {"command": self.command, "seed": self.cfg.seed, "version": __version__,
                    "kernel_backend": backend(), "inputs": self.inputs,
                    "files": {n: _sha256(os.path.join(self.path, n)) for n in sorted(self.files)}}
        with open(os.path.join(self.path, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


# --------------------------------------------------------------------------
# shared loading

def load_graphs(cfg):
    """(source, target) graphs: from JSON Lines files when given, else synthetic."""
    data = cfg.raw["data"]
    lexicon = make_lexicon(data["lexicon_size"], data["lexicon_seed"]) \
        if data["lexicon_size"] else None
    out = []
    for side in ("source", "target"):
        sec = data[side]
        if (sec["nodes"] is None) != (sec["edges"] is None):
            raise ConfigError(f"data.{side}.nodes and data.{side}.edges must be given together")
        if sec["nodes"] is not None:
            out.append(load_graph(sec["nodes"], sec["edges"], data["d_feat"], data["feature_seed"]))
        else:
            out.append(generate_synthetic_tag(cfg.synthetic_spec(side), sec["seed"], data["d_feat"],
                                              data["feature_seed"], lexicon))
    return tuple(out)


def _load_lm(cfg):
    path = cfg.raw["lm"]["path"]
    if path is None:
        raise ConfigError("lm.path is not set; run bootstrap-lm and point lm.path at its lm.ckpt")
    return load_lm(path)


def _ways_classes(graph, ways):
    names = tuple(graph.class_names or ())
    if ways > len(names):
        raise ConfigError(f"ways={ways} but the target graph has {len(names)} classes")
    return names[:ways]


def _read_examples(adapter_path):
    path = os.path.join(os.path.dirname(os.path.abspath(adapter_path)), "examples.json")
    if not os.path.exists(path):
        return ()
    with open(path, encoding="utf-8") as fh:
        return tuple(int(v) for v, _ in json.load(fh)["pairs"])


# --------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args, cfg, run):
    source, target = load_graphs(cfg)
    for name, g in (("source", source), ("target", target)):
        save_graph(g, run.file(f"{name}.nodes.jsonl"), run.file(f"{name}.edges.jsonl"))
        print(f"{name}: {g.num_nodes} nodes, {len(g.edge_list())} edges, "
              f"{len(g.class_names or ())} classes")


def cmd_bootstrap_lm(args, cfg, run):
    source, target = load_graphs(cfg)
    corpus = build_bootstrap_corpus([source, target], seed=cfg.seed, **cfg.raw["lm"]["corpus"])
    loss_log = LossLog()
    lm, losses = lm_bootstrap(corpus, cfg.bootstrap_config(), cfg.seed, cfg.lm_config(), loss_log)
    save_lm(run.file("lm.ckpt"), lm)
    loss_log.write_csv(run.file("loss_log.csv"))
    run.inputs["lm_digest"] = lm.digest()
    print(f"bootstrap: {len(losses)} steps, loss {losses[0]:.3f} -> {losses[-1]:.3f}, "
          f"vocab {len(lm.vocab)}")


def cmd_pretrain(args, cfg, run):
    lm = _load_lm(cfg)
    source, _ = load_graphs(cfg)
    loss_log = LossLog()
    t0 = time.perf_counter()
    base = pretrain([source], lm, cfg.train_config(), cfg.model_config(), loss_log)
    base.save(run.file("model.ckpt"))
    loss_log.write_csv(run.file("loss_log.csv"))
    run.inputs.update(lm_digest=lm.digest(), base_digest=base.digest())
    print(f"pretrain: {len(loss_log.rows)} steps in {time.perf_counter() - t0:.1f}s")


def cmd_adapt(args, cfg, run):
    lm = _load_lm(cfg)
    base = ModelCheckpoint.load(args.base)
    _, target = load_graphs(cfg)
    a = cfg.raw["adapt"]
    names = _ways_classes(target, a["ways"])
    task = a["task_text"] or classify_task_text(names)
    examples = sample_few_shot(target, names, a["shots"], cfg.seed)
    loss_log = LossLog()
    t0 = time.perf_counter()
    adapter = adapt(base, lm, target, examples, task, cfg.train_config(), loss_log, a["template"])
    adapter.save(run.file("adapter.ckpt"))
    loss_log.write_csv(run.file("loss_log.csv"))
    run.write_json("examples.json", {"K": examples.K, "class_names": list(names),
                                     "pairs": [list(p) for p in examples.pairs]})
    run.inputs.update(lm_digest=lm.digest(), base_digest=base.digest(), base=args.base)
    print(f"adapt: {a['ways']}-way {a['shots']}-shot, {len(loss_log.rows)} steps in "
          f"{time.perf_counter() - t0:.1f}s")


def _predictor(args, cfg, lm):
    base = ModelCheckpoint.load(args.base)
    adapter = AdapterCheckpoint.load(args.adapter) if args.adapter else None
    predictor = ModelPredictor.from_checkpoints(
        base, lm, adapter, subgraph_seed=cfg.seed,
        max_new_tokens=cfg.raw["eval"]["max_new_tokens"])
    return base, adapter, predictor


def cmd_infer(args, cfg, run):
    lm = _load_lm(cfg)
    _, target = load_graphs(cfg)
    base, adapter, predictor = _predictor(args, cfg, lm)
    names = _ways_classes(target, cfg.raw["adapt"]["ways"])
    task = adapter.task_text if adapter else (cfg.raw["adapt"]["task_text"]
                                              or classify_task_text(names))
    nodes = [int(v) for v in target.node_ids]
    outs = predictor(target, nodes, task)
    with open(run.file("predictions.jsonl"), "w", encoding="utf-8") as fh:
        for v, text in zip(nodes, outs):
            fh.write(json.dumps({"target": v, "generated": text}, sort_keys=True) + "\n")
    run.inputs.update(base_digest=base.digest(), adapter=args.adapter)
    print(f"infer: {len(nodes)} predictions")


def cmd_eval(args, cfg, run):
    lm = _load_lm(cfg)
    _, target = load_graphs(cfg)
    base, adapter, predictor = _predictor(args, cfg, lm)
    e, a = cfg.raw["eval"], cfg.raw["adapt"]
    names = _ways_classes(target, a["ways"])
    exclude = _read_examples(args.adapter) if args.adapter else ()
    task = adapter.task_text if adapter else (a["task_text"] or classify_task_text(names))
    shots = a["shots"] if adapter else 0
    report = evaluate_classification(predictor, target, names, e["targets_per_way"],
                                     tuple(e["seeds"]), exclude, shots, task)
    report.write_csv(run.file("report.csv"))
    report.write_predictions(run.file("predictions.jsonl"))
    print(report.table())
    metrics = {"task": "classify", "ways": len(names), "shots": shots,
               "accuracy_mean": report.accuracy_mean, "accuracy_std": report.accuracy_std,
               "per_seed": list(report.per_seed), "seconds_per_target": report.seconds_per_target,
               "adapter": bool(adapter), "use_gate": base.config.use_gate,
               "use_hop": base.config.use_hop}
    if e["summary_targets"] > 0 and target.titles is not None:
        summarizer = ModelPredictor(base.model(lm), template="summarize", subgraph_seed=cfg.seed,
                                    max_new_tokens=e["max_new_tokens"])
        nodes = select_targets(target, names, max(1, e["summary_targets"] // len(names)),
                               cfg.seed, exclude)
        summary = evaluate_summaries(summarizer, target, nodes)
        summary.write_csv(run.file("summary.csv"))
        summary.write_predictions(run.file("summary_predictions.jsonl"))
        print(summary.table())
        metrics["bleu1"] = summary.bleu1_mean
    run.write_json("metrics.json", metrics)
    run.inputs.update(base_digest=base.digest(), adapter=args.adapter)


def cmd_report(args, cfg, run):
    """Efficiency accounting plus a table of every eval run directory given."""
    lm = _load_lm(cfg)
    mc = cfg.model_config()
    _, target = load_graphs(cfg)
    lines = ["# taglm report", "", "## Parameters", "",
             "| quantity | value |", "|---|---|"]
    tun = count_tunable_parameters(mc, cfg.raw["adapt"]["include_hop_encodings"])
    pre = count_pretrain_parameters(mc, lm.d_lm)
    lines += [f"| pre-training trainable | {pre['total']} |",
              f"| adaptation tunable | {tun['total']} |",
              f"| ratio | {tun['total'] / pre['total']:.4%} |"]
    if args.base:
        base = ModelCheckpoint.load(args.base)
        names = _ways_classes(target, cfg.raw["adapt"]["ways"])
        task = classify_task_text(names)
        v = int(target.node_ids[0])
        lines += ["", "## Prompt length by shots", "",
                  "| K | graph-model query | in-context prompt |", "|---|---|---|"]
        q = query_length(base.model(lm), target, v, "classify", task, cfg.seed)
        cap = min(len(target.nodes_with_label(n)) for n in names)
        for k in sorted({min(k, cap) for k in (0, 1, 5, 10, 20, 50)}):
            ex = sample_few_shot(target, names, k, cfg.seed)
            icl = icl_prompt_length(ex, target, "classify", lm.vocab, target.text(v), task)
            lines.append(f"| {k} | {q} | {icl} |")
    if args.adapter:
        lines += ["", f"adapter file: {os.path.getsize(args.adapter)} bytes"]
    rows = []
    for d in args.runs:
        path = os.path.join(d, "metrics.json")
        if not os.path.exists(path):
            raise InputError(f"{d} has no metrics.json; is it an eval run directory?")
        with open(path, encoding="utf-8") as fh:
            m = json.load(fh)
        rows.append(f"| {d} | {m['ways']} | {m['shots']} | {m['use_gate']} | {m['use_hop']} | "
                    f"{100 * m['accuracy_mean']:.2f} +- {100 * m['accuracy_std']:.2f} | "
                    f"{m.get('bleu1', float('nan')):.4f} |")
    if rows:
        lines += ["", "## Evaluation runs", "",
                  "| run | ways | shots | gate | hop | accuracy | BLEU-1 |",
                  "|---|---|---|---|---|---|---|"] + rows
    text = "\n".join(lines) + "\n"
    run.write_text("report.md", text)
    print(text, end="")


COMMANDS = {"gen-data": cmd_gen_data, "bootstrap-lm": cmd_bootstrap_lm, "pretrain": cmd_pretrain,
            "adapt": cmd_adapt, "infer": cmd_infer, "eval": cmd_eval, "report": cmd_report}


def build_parser():
    p = _Parser(prog="taglm", description="Graph-conditioned language model adapters.")
    p.add_argument("--version", action="version", version=f"taglm {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="run config YAML (defaults for every missing key)")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, help="overrides the config seed")
        if name in ("adapt", "infer", "eval"):
            s.add_argument("--base", required=True, help="pre-trained model checkpoint")
        if name == "report":
            s.add_argument("--base", help="pre-trained model checkpoint")
            s.add_argument("runs", nargs="*", help="eval run directories to tabulate")
        if name in ("infer", "eval", "report"):
            s.add_argument("--adapter", help="adapter checkpoint")
        if name in ("adapt", "eval", "infer", "report"):
            s.add_argument("--shots", type=int, help="overrides adapt.shots")
            s.add_argument("--ways", type=int, help="overrides adapt.ways")
    return p


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        cfg = RunConfig.load(args.config)
        over = {}
        if args.seed is not None:
            over["seed"] = args.seed
        adapt_over = {k: getattr(args, k) for k in ("shots", "ways")
                      if getattr(args, k, None) is not None}
        if over or adapt_over:
            raw = dict(cfg.raw, **over)
            raw["adapt"] = dict(raw["adapt"], **adapt_over)
            cfg = RunConfig.from_dict(raw)
        rd = RunDir(args.out, args.command, cfg)
        COMMANDS[args.command](args, cfg, rd)
        rd.finish()
    except (ConfigError, InputError, FileNotFoundError) as exc:
        print(f"taglm {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    logging.basicConfig(level=os.environ.get("TAGLM_LOG", "WARNING"),
                        format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
