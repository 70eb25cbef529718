"""Long-context transformer inference with early-layer token selection.

Public surface: numeric kernels, the decoder-only model, KV compression
baselines, the token-selection path, the exact cost model, and the harness
(tokenizer, model files, seeded test models, needle runs, CLI).
"""

from .config import ModelConfig
from .counting import GENERATION, PROMPT, CostSession, PhaseCost
from .costmodel import CostParams, cost_table, verify_counters
from .errors import (
    ConfigurationError,
    ContractViolation,
    EngineError,
    ModelFormatError,
)
from .model import (
    LayerKV,
    ModelWeights,
    causal_attention,
    decode_step,
    embed,
    greedy_generate,
    prefill,
    repeat_kv,
)
from .modelio import load_model, save_model
from .needle import NeedleReport, NeedleSpec, needle_run
from .runner import RunConfig, RunResult, Strategy, run_generation
from .selection import (
    SelectionResult,
    decode_selection,
    select_indices,
    selection_gen,
    selection_scores,
)
from .strategies import (
    CompressedKV,
    EvictionPolicyParams,
    cache_bytes,
    compressed_prefill,
    decode_with_compressed,
    h2o_compress,
    snapkv_compress,
)
from .testmodels import copy_model_config, make_copy_model, make_random_model
from .tokenizer import VOCAB_SIZE, detokenize, tokenize

__version__ = "0.1.0"

__all__ = [
    "CostParams",
    "CostSession",
    "CompressedKV",
    "ConfigurationError",
    "ContractViolation",
    "EngineError",
    "EvictionPolicyParams",
    "GENERATION",
    "LayerKV",
    "ModelConfig",
    "ModelFormatError",
    "ModelWeights",
    "NeedleReport",
    "NeedleSpec",
    "PROMPT",
    "PhaseCost",
    "RunConfig",
    "RunResult",
    "SelectionResult",
    "Strategy",
    "VOCAB_SIZE",
    "cache_bytes",
    "causal_attention",
    "compressed_prefill",
    "copy_model_config",
    "cost_table",
    "decode_selection",
    "decode_step",
    "decode_with_compressed",
    "detokenize",
    "embed",
    "greedy_generate",
    "h2o_compress",
    "load_model",
    "make_copy_model",
    "make_random_model",
    "needle_run",
    "prefill",
    "repeat_kv",
    "run_generation",
    "save_model",
    "select_indices",
    "selection_gen",
    "selection_scores",
    "snapkv_compress",
    "tokenize",
    "verify_counters",
]
