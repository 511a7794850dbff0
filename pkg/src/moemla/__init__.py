"""MoE-MLA-RoPE language model, analysis engine and tooling at desk scale."""

from .analysis import (ComplexityReport, complexity_report, cost_moe, flops_mha, flops_mla,
                       kv_cache_model, speedup_asymptotic)
from .attention import KVCache, LatentKVCache, cache_bytes, compress_kv, mha_forward, mla_forward
from .config import ModelConfig, RunConfig, TrainConfig
from .estimator import MoEMLALanguageModel
from .model import LanguageModel, load_checkpoint, param_counts, save_checkpoint
from .moe import (ExpertConfig, RouterState, aux_balance_loss, balancer_update, load_cv, moe_forward,
                  route, routing_combinations)
from .rope import RopeTable, rope_apply, rope_extend
from .tensor import Precision, Tensor, backward
from .trainer import ByteTokenizer, Corpus, train

__version__ = "0.1.0"

__all__ = [
    "ByteTokenizer", "ComplexityReport", "Corpus", "ExpertConfig", "KVCache", "LanguageModel", "LatentKVCache", "ModelConfig",
    "MoEMLALanguageModel", "Precision", "RopeTable", "RouterState", "RunConfig", "Tensor", "TrainConfig",
    "aux_balance_loss", "backward", "balancer_update", "cache_bytes", "complexity_report", "compress_kv",
    "cost_moe", "flops_mha", "flops_mla", "kv_cache_model", "load_checkpoint", "load_cv", "mha_forward",
    "mla_forward", "moe_forward", "param_counts", "rope_apply", "rope_extend", "route",
    "routing_combinations", "save_checkpoint", "speedup_asymptotic", "train",
]
