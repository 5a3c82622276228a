"""Frozen-LM graph adapters for text-attributed graphs, in numpy."""
from .config import RunConfig
from .data import (FewShotExampleSet, SyntheticTagSpec, TextAttributedGraph, extract_neighborhood,
                   generate_synthetic_tag, load_graph, make_lexicon, sample_few_shot, save_graph)
from .errors import ConfigError, InputError
from .evaluation import (ModelPredictor, bleu1, evaluate_classification, evaluate_summaries,
                         icl_prompt_length, parse_class_answer)
from .lm import BootstrapConfig, LmConfig, LmParameters, lm_bootstrap
from .model import (AdapterCheckpoint, GraphLanguageModel, ModelCheckpoint, ModelConfig,
                    load_lm, save_lm)
from .training import (LossLog, TrainConfig, adapt, count_pretrain_parameters,
                       count_tunable_parameters, gradient_check, node_matching_loss, pretrain)

__version__ = "0.1.0"
