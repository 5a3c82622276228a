import json
import os

import pytest
import yaml

from taglm.cli import run
from taglm.config import RunConfig
from taglm.errors import ConfigError

TINY = {
    "seed": 0,
    "data": {"d_feat": 16, "lexicon_size": 64,
             "source": {"synthetic": {"num_classes": 3, "nodes_per_class": 10, "text_len": 5,
                                      "vocab_per_class": 6, "shared_vocab": 2}},
             "target": {"synthetic": {"num_classes": 3, "nodes_per_class": 12, "text_len": 5,
                                      "vocab_per_class": 6, "shared_vocab": 2}}},
    "lm": {"model": {"d_lm": 16, "n_blocks": 1, "d_ff": 32, "context": 128},
           "bootstrap": {"max_steps": 15},
           "corpus": {"n_classify": 30, "n_link": 10, "n_summary": 10, "max_slots": 10}},
    "model": {"d_feat": 16, "d_gnn": 8, "gnn_layers": 2, "d_hop": 2, "max_neighbors": 10,
              "d_bag": 256},
    "train": {"epochs_match": 1, "epochs_classify": 1, "epochs_link": 1},
    "adapt": {"shots": 2, "ways": 3, "epochs": 2},
    "eval": {"targets_per_way": 3, "seeds": [0, 1], "summary_targets": 3},
}


def write_config(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return str(path)


# -- config

def test_defaults_are_valid():
    cfg = RunConfig.from_dict({})
    assert cfg.seed == 0 and cfg.model_config().d_feat == cfg.raw["data"]["d_feat"]


@pytest.mark.parametrize("doc, where", [({"modle": {}}, "modle"),
                                        ({"model": {"layers": 2}}, "model.layers"),
                                        ({"data": {"source": {"synthetic": {"k": 1}}}},
                                         "data.source.synthetic.k")])
def test_unknown_keys_named(doc, where):
    with pytest.raises(ConfigError, match=f"'{where}'"):
        RunConfig.from_dict(doc)


def test_type_and_value_errors():
    with pytest.raises(ConfigError, match="train.lr"):
        RunConfig.from_dict({"train": {"lr": "fast"}})
    with pytest.raises(ConfigError, match="lr"):
        RunConfig.from_dict({"train": {"lr": -1.0}})
    with pytest.raises(ConfigError, match="d_feat"):
        RunConfig.from_dict({"model": {"d_feat": 8}})
    with pytest.raises(ConfigError, match="may not be null"):
        RunConfig.from_dict({"seed": None})


def test_dump_roundtrip():
    cfg = RunConfig.from_dict(TINY)
    assert RunConfig.from_dict(yaml.safe_load(cfg.dump())).raw == cfg.raw


# -- exit codes

def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_adapt_without_base_is_usage_error(tmp_path, capsys):
    assert run(["adapt", "--out", str(tmp_path / "x")]) == 1
    assert "--base" in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert run(["train", "--out", "x"]) == 1


def test_config_error_exit_two(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", {"data": {"bogus": 1}})
    assert run(["gen-data", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "data.bogus" in capsys.readouterr().err


def test_missing_lm_path_exit_two(tmp_path, capsys):
    assert run(["pretrain", "--out", str(tmp_path / "o")]) == 2
    assert "lm.path" in capsys.readouterr().err


def test_gen_data_is_deterministic(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", TINY)
    for d in ("a", "b"):
        assert run(["gen-data", "--config", cfg, "--out", str(tmp_path / d)]) == 0
    for f in ("source.nodes.jsonl", "source.edges.jsonl", "target.nodes.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert run(["gen-data", "--config", cfg, "--out", str(tmp_path / "c"), "--seed", "3"]) == 0
    assert (tmp_path / "c" / "seed.txt").read_text() == "3\n"


def test_full_pipeline(tmp_path):
    doc = json.loads(json.dumps(TINY))
    doc["lm"]["path"] = str(tmp_path / "lm" / "lm.ckpt")
    cfg = write_config(tmp_path / "c.yaml", doc)
    base = str(tmp_path / "base" / "model.ckpt")
    adapter = str(tmp_path / "ad" / "adapter.ckpt")

    def go(*args):
        assert run(list(args) + ["--config", cfg]) == 0, args

    go("bootstrap-lm", "--out", str(tmp_path / "lm"))
    go("pretrain", "--out", str(tmp_path / "base"))
    go("adapt", "--out", str(tmp_path / "ad"), "--base", base)
    go("eval", "--out", str(tmp_path / "ev"), "--base", base, "--adapter", adapter)
    go("infer", "--out", str(tmp_path / "inf"), "--base", base, "--adapter", adapter)
    go("report", "--out", str(tmp_path / "rep"), "--base", base, str(tmp_path / "ev"))

    for d, must in {"lm": ["lm.ckpt", "loss_log.csv"], "base": ["model.ckpt", "loss_log.csv"],
                    "ad": ["adapter.ckpt", "loss_log.csv", "examples.json"],
                    "ev": ["report.csv", "metrics.json", "summary.csv"],
                    "inf": ["predictions.jsonl"], "rep": ["report.md"]}.items():
        files = set(os.listdir(tmp_path / d))
        assert {"config.yaml", "seed.txt", "manifest.json", *must} <= files, d
        manifest = json.loads((tmp_path / d / "manifest.json").read_text())
        assert set(must) <= set(manifest["files"])

    # examples used for adaptation are never scored
    ex = {v for v, _ in json.loads((tmp_path / "ad" / "examples.json").read_text())["pairs"]}
    preds = (tmp_path / "ev" / "predictions.jsonl").read_text().splitlines()
    assert not ex & {json.loads(p)["target"] for p in preds}
    assert len((tmp_path / "inf" / "predictions.jsonl").read_text().splitlines()) == 36

    # rerunning adapt reproduces the adapter byte for byte
    go("adapt", "--out", str(tmp_path / "ad2"), "--base", base)
    assert (tmp_path / "ad2" / "adapter.ckpt").read_bytes() == open(adapter, "rb").read()

    # a checkpoint of the wrong kind is a data error
    assert run(["adapt", "--out", str(tmp_path / "bad"), "--base", adapter,
                "--config", cfg]) == 2
