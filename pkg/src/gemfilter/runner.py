"""Strategy dispatch: one instrumented generation run per call.

Phase discipline lives here (and in :func:`gemfilter.selection.selection_gen`,
which owns its own two passes): the prompt pass bills the prompt phase, the
first output token comes from that pass's logits, and each further token is
one decode step in the generation phase.  Every run gets a private
:class:`CostSession`, so concurrent runs never share counters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .counting import GENERATION, PROMPT, CostSession
from .errors import ConfigurationError, ContractViolation
from .kernels import argmax
from .model import ModelWeights, decode_step, prefill
from .selection import SelectionResult, selection_gen
from .strategies import (
    EvictionPolicyParams,
    cache_bytes,
    compressed_prefill,
    decode_with_compressed,
)


class Strategy(str, Enum):
    FULL = "full"
    GEMFILTER = "gemfilter"
    SNAPKV = "snapkv"
    H2O = "h2o"

    @classmethod
    def parse(cls, name: str) -> "Strategy":
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigurationError(
                f"unknown strategy {name!r}; expected one of {[s.value for s in cls]}"
            ) from None


@dataclass(frozen=True)
class RunConfig:
    strategy: Strategy
    max_new_tokens: int = 16
    select_k: int = 64
    filter_layer: int = 1
    pool_kernel: int = 5
    pool_mode: str = "avg"
    include_first: bool = False
    eviction: EvictionPolicyParams = field(default_factory=EvictionPolicyParams)


@dataclass
class RunResult:
    output_tokens: list[int]
    session: CostSession
    selection: SelectionResult | None = None


def run_generation(weights: ModelWeights, tokens, rc: RunConfig) -> RunResult:
    if rc.max_new_tokens < 0:
        raise ContractViolation("max_new_tokens must be >= 0")
    session = CostSession()
    with session.activate():
        if rc.strategy is Strategy.FULL:
            result = _run_full(weights, tokens, rc, session)
        elif rc.strategy is Strategy.GEMFILTER:
            out, sel = selection_gen(
                weights,
                tokens,
                rc.filter_layer,
                rc.select_k,
                rc.max_new_tokens,
                rc.pool_kernel,
                rc.include_first,
                rc.pool_mode,
            )
            result = RunResult(output_tokens=out, session=session, selection=sel)
        else:
            result = _run_compressed(weights, tokens, rc, session)
    return result


def _run_full(weights, tokens, rc, session) -> RunResult:
    t = rc.max_new_tokens
    out: list[int] = []
    with session.in_phase(PROMPT):
        pre = prefill(tokens, weights, want_logits=t >= 1)
        if t >= 1:
            out.append(argmax(pre.logits))
    if t >= 1:
        with session.in_phase(GENERATION):
            session.note_kv_bytes(cache_bytes(pre.caches))
            for _ in range(t - 1):
                logits = decode_step(out[-1], pre.caches, weights)
                out.append(argmax(logits))
    return RunResult(output_tokens=out, session=session)


def _run_compressed(weights, tokens, rc, session) -> RunResult:
    t = rc.max_new_tokens
    out: list[int] = []
    with session.in_phase(PROMPT):
        compressed, logits = compressed_prefill(
            tokens,
            weights,
            rc.strategy.value,
            rc.select_k,
            rc.eviction,
            want_logits=t >= 1,
        )
        if t >= 1:
            out.append(argmax(logits))
    if t >= 1:
        with session.in_phase(GENERATION):
            session.note_kv_bytes(cache_bytes(compressed))
            for _ in range(t - 1):
                logits = decode_with_compressed(out[-1], compressed, weights)
                out.append(argmax(logits))
    return RunResult(output_tokens=out, session=session)


def deterministic_run_id(strategy: str, tokens, params: dict) -> str:
    """Stable id derived from the run inputs; keeps metrics byte-reproducible."""
    payload = json.dumps(
        {"strategy": strategy, "tokens": list(map(int, tokens)), "params": params},
        sort_keys=True,
    ).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:16]


def metrics_document(
    *,
    weights: ModelWeights,
    tokens,
    rc: RunConfig,
    result: RunResult,
    include_wall_times: bool = True,
    include_scores: bool = False,
    selection_extra: dict | None = None,
) -> dict:
    """One metrics record per run (serialized as one NDJSON line)."""
    cfg = weights.config
    params = {
        "n": int(np.asarray(tokens).size),
        "k": rc.select_k,
        "t": rc.max_new_tokens,
        "r": rc.filter_layer,
        "m": cfg.n_layers,
        "h": cfg.n_heads,
        "d": cfg.head_dim,
    }
    doc: dict = {
        "run_id": deterministic_run_id(rc.strategy.value, tokens, params),
        "strategy": rc.strategy.value,
        "params": params,
        "phase_costs": [],
        "output_tokens": [int(t) for t in result.output_tokens],
    }
    wall_times = {}
    for phase, cost in result.session.snapshot().items():
        entry = {
            "phase": phase,
            "matmul_flops": cost.matmul_flops,
            "flops_by_tag": cost.flops_by_tag,
            "kv_bytes_peak": cost.kv_bytes_peak,
            "weight_bytes_touched": cost.weight_bytes_touched,
        }
        if include_wall_times:
            entry["wall_time"] = cost.wall_time
        wall_times[phase] = cost.wall_time
        doc["phase_costs"].append(entry)
    if result.selection is not None:
        selection = {"indices": [int(i) for i in result.selection.indices]}
        if include_scores:
            selection["scores"] = [float(s) for s in result.selection.raw_scores]
        if selection_extra:
            selection.update(selection_extra)
        doc["selection"] = selection
    elif selection_extra:
        doc["selection"] = dict(selection_extra)
    if include_wall_times:
        doc["wall_times"] = wall_times
    return doc


def write_metrics(path, docs) -> None:
    """Append newline-delimited JSON documents (UTF-8)."""
    with open(path, "a", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc, sort_keys=True) + "\n")
