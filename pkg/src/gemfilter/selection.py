"""Early-layer token selection and two-pass generation.

The filter pass runs only the first ``r`` transformer layers of the prompt,
scores every key position by the summed last-row attention of layer ``r``
across all heads, and keeps the top ``k`` positions as one global, sorted
index set.  The second pass re-runs the full model over just the selected
sub-sequence with fresh positions 0..k-1 (the rotary embedding is recomputed,
so the positional span shrinks to k + t) and generates greedily.

Selection scores are raw inner products: no softmax and no 1/sqrt(d) scale,
both immaterial to a top-k decision because they are strictly increasing
transforms.  The score readout is not charged to the FLOP counters; only
model matmuls are counted, and the filter pass's cost is exactly the r-layer
share of a full prompt pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .counting import GENERATION, PROMPT, phase_scope
from .errors import ContractViolation
from .kernels import pool_1d, topk_indices
from .model import ModelWeights, greedy_generate, prefill, repeat_kv


@dataclass
class SelectionResult:
    """A single global index set: ascending positions, plus the raw scores."""

    indices: np.ndarray  # (min(k, n),) int64, strictly increasing
    raw_scores: np.ndarray  # (n,) pooled head-summed scores
    filter_layer: int
    budget: int

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64)
        n = self.raw_scores.shape[0]
        if idx.ndim != 1 or idx.size != min(self.budget, n):
            raise ContractViolation("selection must keep min(budget, n) indices")
        if idx.size and (idx[0] < 0 or idx[-1] >= n):
            raise ContractViolation("selection index out of range")
        if idx.size > 1 and not np.all(np.diff(idx) > 0):
            raise ContractViolation("selection indices must be strictly increasing")
        self.indices = idx


def selection_scores(
    last_q: np.ndarray, keys: np.ndarray, pool_kernel: int = 5, pool_mode: str = "avg"
) -> np.ndarray:
    """Pooled, head-summed inner products of the last query against all keys.

    ``last_q`` is the final position's per-head query ``(h, head_dim)`` and
    ``keys`` the per-head key matrix ``(n, h, head_dim)`` with kv-heads
    already expanded to the full head count.  Heads are summed before
    pooling.  Average pooling is the default; ``pool_mode="max"`` is kept as
    an A/B knob.
    """
    last_q = np.asarray(last_q)
    keys = np.asarray(keys)
    if last_q.ndim != 2 or keys.ndim != 3:
        raise ContractViolation("selection_scores expects (h, d) query and (n, h, d) keys")
    if keys.shape[1] != last_q.shape[0] or keys.shape[2] != last_q.shape[1]:
        raise ContractViolation(
            f"head layout mismatch: query {last_q.shape} vs keys {keys.shape}"
        )
    scores = np.einsum("nhd,hd->n", keys.astype(np.float64), last_q.astype(np.float64))
    return pool_1d(scores, pool_kernel, pool_mode)


def select_indices(
    weights: ModelWeights,
    tokens,
    r: int,
    k: int,
    pool_kernel: int = 5,
    include_first: bool = False,
    pool_mode: str = "avg",
) -> SelectionResult:
    """Run the r-layer filter pass and pick the top-k positions, sorted.

    Layers past ``r`` are never touched and no KV cache is retained, so the
    charged prompt cost is exactly r layers' worth.  ``k`` larger than the
    prompt clamps to selecting everything.
    """
    cfg = weights.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ContractViolation("select_indices requires a non-empty prompt")
    if not 1 <= r <= cfg.n_layers:
        raise ContractViolation(f"filter layer {r} outside 1..{cfg.n_layers}")
    if k < 1:
        raise ContractViolation("selection budget k must be >= 1")
    pre = prefill(ids, weights, upto_layer=r, retain_caches=False, want_logits=False)
    keys = repeat_kv(pre.layer_k, cfg.kv_groups)
    scores = selection_scores(pre.layer_q[-1], keys, pool_kernel, pool_mode)
    kept = topk_indices(scores, min(k, ids.size))
    if include_first and 0 not in kept:
        kept = np.concatenate([kept[:-1], np.asarray([0], dtype=np.int64)])
    return SelectionResult(
        indices=np.sort(kept), raw_scores=scores, filter_layer=r, budget=k
    )


def decode_selection(tokens, sel: SelectionResult) -> list[int]:
    """The selected sub-sequence in original order, for display and reuse."""
    ids = np.asarray(tokens, dtype=np.int64)
    if sel.indices.size and (sel.indices[0] < 0 or sel.indices[-1] >= ids.size):
        raise ContractViolation("selection indices out of range for this sequence")
    return [int(t) for t in ids[sel.indices]]


def selection_gen(
    weights: ModelWeights,
    tokens,
    r: int,
    k: int,
    t_max: int,
    pool_kernel: int = 5,
    include_first: bool = False,
    pool_mode: str = "avg",
) -> tuple[list[int], SelectionResult]:
    """Two-pass generation: filter pass, then full-model greedy over T_J.

    The filter pass bills the prompt phase; everything about the second pass,
    including its prefill over the k selected tokens, bills the generation
    phase.  With ``t_max = 0`` the second pass is skipped entirely.
    """
    if t_max < 0:
        raise ContractViolation("t_max must be >= 0")
    with phase_scope(PROMPT):
        sel = select_indices(weights, tokens, r, k, pool_kernel, include_first, pool_mode)
    if t_max == 0:
        return [], sel
    sub = decode_selection(tokens, sel)
    with phase_scope(GENERATION):
        out = greedy_generate(weights, sub, t_max)
    return out, sel
