"""Run configuration: one YAML document shared by every CLI subcommand.

Every field has a default; unknown keys are rejected with their dotted path.
"""
from __future__ import annotations

import copy
import dataclasses

import yaml

from .data import SyntheticTagSpec
from .errors import ConfigError
from .lm import BootstrapConfig, LmConfig
from .model import ModelConfig
from .training import TrainConfig

_SPEC_DEFAULT = dataclasses.asdict(SyntheticTagSpec())

DEFAULTS = {
    "seed": 0,
    "data": {
        "d_feat": 64,
        "feature_seed": 0,
        "lexicon_size": 128,
        "lexicon_seed": 5,
        "source": {"seed": 101, "nodes": None, "edges": None,
                   "synthetic": {**_SPEC_DEFAULT, "num_classes": 10, "nodes_per_class": 30,
                                 "text_len": 8, "shared_vocab": 8, "p_intra": 0.06,
                                 "p_inter": 0.04}},
        "target": {"seed": 202, "nodes": None, "edges": None,
                   "synthetic": {**_SPEC_DEFAULT, "text_len": 8, "shared_vocab": 8,
                                 "p_intra": 0.06, "p_inter": 0.04}},
    },
    "lm": {
        "path": None,
        "model": dataclasses.asdict(LmConfig()),
        "bootstrap": dataclasses.asdict(BootstrapConfig()),
        "corpus": {"n_classify": 1500, "n_link": 600, "n_summary": 600, "max_slots": 40},
    },
    "model": dataclasses.asdict(ModelConfig()),
    "train": {k: v for k, v in dataclasses.asdict(TrainConfig()).items()
              if k not in ("seed", "epochs_adapt", "adapt_lr", "include_hop_encodings")},
    "adapt": {"shots": 5, "ways": 5, "epochs": TrainConfig.epochs_adapt,
              "lr": TrainConfig.adapt_lr, "include_hop_encodings": True,
              "template": "classify", "task_text": None},
    "eval": {"targets_per_way": 20, "seeds": [0, 1, 2], "max_new_tokens": None,
             "summary_targets": 20},
}

_NULLABLE = {"data.source.nodes", "data.source.edges", "data.target.nodes", "data.target.edges",
             "lm.path", "model.g_out", "adapt.task_text", "eval.max_new_tokens"}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{where}' must be a mapping")
            out[key] = _merge(base[key], val, where + ".")
        else:
            if val is None and where not in _NULLABLE:
                raise ConfigError(f"config key '{where}' may not be null")
            if val is not None and base[key] is not None and not _same_kind(base[key], val):
                raise ConfigError(f"config key '{where}' should be {type(base[key]).__name__}, "
                                  f"got {val!r}")
            out[key] = val
    return out


def _same_kind(default, val):
    if isinstance(default, bool):
        return isinstance(val, bool)
    if isinstance(default, int):
        return isinstance(val, int) and not isinstance(val, bool)
    if isinstance(default, float):
        return isinstance(val, (int, float)) and not isinstance(val, bool)
    if isinstance(default, list):
        return isinstance(val, list)
    return isinstance(val, type(default))


@dataclasses.dataclass
class RunConfig:
    raw: dict

    @classmethod
    def from_dict(cls, d):
        if d is not None and not isinstance(d, dict):
            raise ConfigError("config document must be a mapping")
        cfg = cls(_merge(DEFAULTS, d))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None):
        if path is None:
            return cls.from_dict({})
        try:
            with open(path, encoding="utf-8") as fh:
                doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        return cls.from_dict(doc or {})

    def with_seed(self, seed):
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        return RunConfig(raw)

    def dump(self):
        return yaml.safe_dump(self.raw, sort_keys=True, default_flow_style=False)

    def validate(self):
        # building each typed config runs its own checks
        self.model_config()
        self.train_config()
        self.lm_config()
        self.bootstrap_config()
        for side in ("source", "target"):
            self.synthetic_spec(side)
        a = self.raw["adapt"]
        if a["shots"] < 0 or a["ways"] < 2 or a["epochs"] < 0 or a["lr"] <= 0:
            raise ConfigError("adapt.shots >= 0, adapt.ways >= 2, adapt.epochs >= 0 and "
                              "adapt.lr > 0 are required")
        if self.raw["eval"]["targets_per_way"] < 1 or not self.raw["eval"]["seeds"]:
            raise ConfigError("eval.targets_per_way must be >= 1 and eval.seeds nonempty")

    # typed views
    @property
    def seed(self):
        return int(self.raw["seed"])

    def model_config(self):
        d = dict(self.raw["model"])
        if d["d_feat"] != self.raw["data"]["d_feat"]:
            raise ConfigError(f"model.d_feat ({d['d_feat']}) must equal data.d_feat "
                              f"({self.raw['data']['d_feat']})")
        return _typed(ModelConfig, d, "model")

    def train_config(self):
        a = self.raw["adapt"]
        return _typed(TrainConfig, {**self.raw["train"], "seed": self.seed,
                                    "epochs_adapt": a["epochs"], "adapt_lr": a["lr"],
                                    "include_hop_encodings": a["include_hop_encodings"]}, "train")

    def lm_config(self):
        return _typed(LmConfig, self.raw["lm"]["model"], "lm.model")

    def bootstrap_config(self):
        return _typed(BootstrapConfig, self.raw["lm"]["bootstrap"], "lm.bootstrap")

    def synthetic_spec(self, side):
        try:
            return SyntheticTagSpec(**self.raw["data"][side]["synthetic"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"data.{side}.synthetic: {exc}") from None


def _typed(cls, d, where):
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
