"""Cross-encoder ranking with teacher/student distillation at desk scale."""

from .data import DevSet, SyntheticTaskSpec, Triple, gen_devset, gen_triples, relevance_oracle
from .encoder import EncoderConfig, EncoderParams, encode, init_params, load_params, ranking_score, save_params
from .estimator import CrossEncoderRanker, DistilledRanker
from .experiments import ExperimentConfig, expand_suite, run_suite
from .metrics import RunReport, evaluate, mrr_at_k
from .objectives import ObjectivePlan, make_layer_map, preset
from .tensor import Tensor, grad_check, no_grad
from .trainer import TrainConfig, TrainResult, distill_student, finetune, finetune_teacher

__version__ = "0.1.0"

__all__ = [
    "CrossEncoderRanker", "DevSet", "DistilledRanker", "EncoderConfig", "EncoderParams",
    "ExperimentConfig", "ObjectivePlan", "RunReport", "SyntheticTaskSpec", "Tensor", "TrainConfig",
    "TrainResult", "Triple", "distill_student", "encode", "evaluate", "expand_suite", "finetune",
    "finetune_teacher", "gen_devset", "gen_triples", "grad_check", "init_params", "load_params",
    "make_layer_map", "mrr_at_k", "no_grad", "preset", "ranking_score", "relevance_oracle",
    "run_suite", "save_params",
]
