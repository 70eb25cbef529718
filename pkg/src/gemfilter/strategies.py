"""Prompt-phase KV cache compression baselines.

Two eviction families are implemented against the same cache contract:

* SnapKV-style: score every key by the attention mass it receives from the
  trailing observation window, smooth the scores with 1-D average pooling,
  keep the best prefix positions plus the window itself.
* H2O-style: score every key by its cumulative attention column sum over the
  whole prompt, keep the heaviest prefix positions plus a recency window.

Both keep an independent index set per layer and per kv-head (contrast with
the single global set the early-layer selection path uses).  Retained keys
keep their original rotary positions; decode appends new tokens at positions
n, n+1, ... so the positional span grows to n + t.

:func:`compressed_prefill` streams layer by layer so that at most one layer's
full KV is ever live alongside the compressed caches, which is exactly the
peak the closed-form memory model charges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .counting import note_kv_bytes, touch_layer
from .errors import ConfigurationError, ContractViolation
from .kernels import matmul, pool_1d, rms_norm_rows, topk_indices
from .model import (
    F32,
    LayerAttnStats,
    LayerKV,
    ModelWeights,
    _attention,
    _mlp,
    apply_rope,
    embed,
    logits_from_hidden,
    run_layer,
)


@dataclass(frozen=True)
class EvictionPolicyParams:
    observation_window: int = 32
    pool_kernel: int = 5
    recent_keep: int = 32
    pool_mode: str = "avg"
    # When False, the observation window is kept on top of the budget instead
    # of counting against it (SnapKV only).
    window_in_budget: bool = True

    def __post_init__(self) -> None:
        if self.observation_window < 1:
            raise ConfigurationError("observation_window must be >= 1")
        if self.pool_kernel < 1 or self.pool_kernel % 2 == 0:
            raise ConfigurationError("pool_kernel must be odd and >= 1")
        if self.recent_keep < 1:
            raise ConfigurationError("recent_keep must be >= 1")
        if self.pool_mode not in ("avg", "max"):
            raise ConfigurationError("pool_mode must be 'avg' or 'max'")


@dataclass
class CompressedLayerKV:
    """One layer's compressed cache: per kv-head retained rows.

    ``indices[j]`` holds ascending original positions retained for kv-head j;
    appended decode tokens extend every head with positions past the prompt.
    """

    keys: np.ndarray  # (n_kv_heads, kept, head_dim)
    values: np.ndarray  # (n_kv_heads, kept, head_dim)
    indices: np.ndarray  # (n_kv_heads, kept) int64

    def __post_init__(self) -> None:
        if self.keys.shape != self.values.shape or self.keys.shape[:2] != self.indices.shape:
            raise ContractViolation("CompressedLayerKV component shapes disagree")

    @property
    def nbytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes

    def append(self, k_row: np.ndarray, v_row: np.ndarray, position: int) -> None:
        self.keys = np.concatenate([self.keys, k_row[:, None, :]], axis=1)
        self.values = np.concatenate([self.values, v_row[:, None, :]], axis=1)
        pos_col = np.full((self.indices.shape[0], 1), position, dtype=np.int64)
        self.indices = np.concatenate([self.indices, pos_col], axis=1)


@dataclass
class CompressedKV:
    """Whole-model compressed cache plus the position decode resumes from."""

    layers: list[CompressedLayerKV]
    budget: int
    next_position: int

    @property
    def nbytes(self) -> int:
        return sum(layer.nbytes for layer in self.layers)


def cache_bytes(cache) -> int:
    """Exact bytes of key+value storage for any cache object (or list of them)."""
    if cache is None:
        return 0
    if isinstance(cache, (LayerKV, CompressedLayerKV, CompressedKV)):
        return cache.nbytes
    return sum(cache_bytes(item) for item in cache)


def _group_scores(per_head: np.ndarray, n_kv_heads: int) -> np.ndarray:
    """Sum per-query-head score vectors within each kv-head group."""
    h, n = per_head.shape
    if h % n_kv_heads != 0:
        raise ConfigurationError("query heads must divide evenly into kv heads")
    groups = h // n_kv_heads
    return per_head.reshape(n_kv_heads, groups, n).sum(axis=1)


def snapkv_retained_indices(
    window_scores: np.ndarray, k: int, params: EvictionPolicyParams
) -> np.ndarray:
    """Ascending retained positions for one kv-head from window attention scores.

    Scores are pooled with :func:`avg_pool_1d`; the best ``k - window`` prefix
    positions join the always-kept observation window.
    """
    n = window_scores.shape[0]
    w = params.observation_window
    if n < w:
        raise ContractViolation(f"prompt length {n} shorter than observation window {w}")
    budget = min(k, n)
    if budget >= n:
        return np.arange(n, dtype=np.int64)
    if k < w:
        raise ConfigurationError(f"budget k={k} smaller than observation window {w}")
    pooled = pool_1d(window_scores, params.pool_kernel, params.pool_mode)
    prefix = pooled[: n - w]
    n_prefix = (budget - w) if params.window_in_budget else min(k, n - w)
    picked = topk_indices(prefix, n_prefix) if n_prefix > 0 else np.empty(0, dtype=np.int64)
    window_positions = np.arange(n - w, n, dtype=np.int64)
    return np.sort(np.concatenate([picked, window_positions]))


def h2o_retained_indices(
    col_scores: np.ndarray, k: int, params: EvictionPolicyParams
) -> np.ndarray:
    """Ascending retained positions for one kv-head from cumulative column sums."""
    n = col_scores.shape[0]
    r = params.recent_keep
    budget = min(k, n)
    if budget >= n:
        return np.arange(n, dtype=np.int64)
    if k < r:
        raise ConfigurationError(f"budget k={k} smaller than recent_keep {r}")
    prefix = col_scores[: n - r]
    picked = topk_indices(prefix, budget - r) if budget - r > 0 else np.empty(0, dtype=np.int64)
    recent = np.arange(n - r, n, dtype=np.int64)
    return np.sort(np.concatenate([picked, recent]))


def _compress_layer(
    cache: LayerKV, stats: LayerAttnStats, k: int, params: EvictionPolicyParams, method: str
) -> CompressedLayerKV:
    n, n_kv, head_dim = cache.keys.shape
    if method == "snapkv":
        per_kv = _group_scores(stats.window_sums, n_kv)
        select = lambda scores: snapkv_retained_indices(scores, k, params)
    elif method == "h2o":
        per_kv = _group_scores(stats.col_sums, n_kv)
        select = lambda scores: h2o_retained_indices(scores, k, params)
    else:
        raise ConfigurationError(f"unknown compression method {method!r}")
    kept0 = select(per_kv[0])
    keys = np.empty((n_kv, kept0.shape[0], head_dim), dtype=cache.keys.dtype)
    values = np.empty_like(keys)
    indices = np.empty((n_kv, kept0.shape[0]), dtype=np.int64)
    for j in range(n_kv):
        kept = kept0 if j == 0 else select(per_kv[j])
        indices[j] = cache.positions[kept]
        keys[j] = cache.keys[kept, j, :]
        values[j] = cache.values[kept, j, :]
    return CompressedLayerKV(keys=keys, values=values, indices=indices)


def snapkv_compress(
    caches: list[LayerKV], stats: list[LayerAttnStats], k: int, params: EvictionPolicyParams
) -> CompressedKV:
    """Compress full prompt caches using observation-window attention scores."""
    return _compress(caches, stats, k, params, "snapkv")


def h2o_compress(
    caches: list[LayerKV], stats: list[LayerAttnStats], k: int, params: EvictionPolicyParams
) -> CompressedKV:
    """Compress full prompt caches using cumulative attention column sums."""
    return _compress(caches, stats, k, params, "h2o")


def _compress(caches, stats, k, params, method) -> CompressedKV:
    if not caches or len(caches) != len(stats):
        raise ContractViolation("compression needs one stats record per cached layer")
    if k < 1:
        raise ContractViolation("cache budget k must be >= 1")
    layers = [
        _compress_layer(cache, st, k, params, method) for cache, st in zip(caches, stats)
    ]
    next_position = int(caches[0].positions[-1]) + 1
    return CompressedKV(layers=layers, budget=k, next_position=next_position)


def compressed_prefill(
    tokens,
    weights: ModelWeights,
    method: str,
    k: int,
    params: EvictionPolicyParams,
    *,
    want_logits: bool = True,
) -> tuple[CompressedKV, np.ndarray | None]:
    """Prompt pass that evicts each layer's KV as soon as the layer finishes.

    Peak live KV is one layer's full cache plus all compressed layers, the
    same quantity the cost model's prompt-memory row charges.
    """
    cfg = weights.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ContractViolation("prefill requires a non-empty prompt")
    if ids.size > cfg.max_seq:
        raise ContractViolation(f"prompt length {ids.size} exceeds max_seq {cfg.max_seq}")
    if method == "snapkv" and ids.size < params.observation_window:
        raise ContractViolation(
            f"prompt length {ids.size} shorter than observation window {params.observation_window}"
        )
    window = params.observation_window if method == "snapkv" else min(1, ids.size)

    n = ids.size
    x = embed(ids, weights)
    positions = np.arange(n, dtype=np.int64)
    compressed: list[CompressedLayerKV] = []
    for li in range(cfg.n_layers):
        x, _q, key, val, st = run_layer(x, weights, li, positions, stats_window=window)
        full_layer = LayerKV(keys=key, values=val, positions=positions.copy())
        compressed.append(_compress_layer(full_layer, st, k, params, method))
        # Checkpoint while the current layer's full KV and every compressed
        # layer so far are both live, then drop the full copy.
        note_kv_bytes(full_layer.nbytes + sum(c.nbytes for c in compressed))
        del full_layer, key, val
    logits = logits_from_hidden(x[-1], weights) if want_logits else None
    return CompressedKV(layers=compressed, budget=k, next_position=n), logits


def decode_with_compressed(
    token: int, compressed: CompressedKV, weights: ModelWeights
) -> np.ndarray:
    """One decode step where each head attends only its retained keys.

    Identical to the full decode path except for the per-head key/value sets;
    with budget >= prompt length the two agree bit for bit.
    """
    cfg = weights.config
    if len(compressed.layers) != cfg.n_layers:
        raise ContractViolation("compressed cache must cover every layer")
    if not 0 <= int(token) < cfg.vocab_size:
        raise ContractViolation(f"token id {token} outside vocabulary")
    h, hk, dh = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    position = compressed.next_position
    if position + 1 > cfg.max_seq:
        raise ContractViolation("cache would exceed max_seq")
    pos_arr = np.asarray([position], dtype=np.int64)
    x = weights.tok_emb[int(token)][None, :].astype(F32, copy=True)
    groups = cfg.kv_groups
    for li, (lw, layer) in enumerate(zip(weights.layers, compressed.layers)):
        touch_layer(li, weights.per_layer_bytes)
        xn = rms_norm_rows(x, lw.attn_norm, cfg.norm_eps)
        q = matmul(xn, lw.wq, tag="proj").reshape(1, h, dh)
        k = matmul(xn, lw.wk, tag="proj").reshape(1, hk, dh)
        v = matmul(xn, lw.wv, tag="proj").reshape(1, hk, dh)
        if cfg.use_rope:
            q = apply_rope(q, pos_arr, cfg.rope_theta)
            k = apply_rope(k, pos_arr, cfg.rope_theta)
        layer.append(k[0], v[0], position)
        attn = np.empty((1, cfg.d_model), dtype=F32)
        for qh in range(h):
            kvh = qh // groups
            k_head = np.ascontiguousarray(layer.keys[kvh])
            v_head = np.ascontiguousarray(layer.values[kvh])
            out, _ = _attention(q[:, qh, :], k_head, v_head, want_probs=False)
            attn[:, qh * dh : (qh + 1) * dh] = out
        x = x + matmul(attn, lw.wo, tag="proj")
        xn2 = rms_norm_rows(x, lw.mlp_norm, cfg.norm_eps)
        x = x + _mlp(xn2, lw)
    compressed.next_position = position + 1
    note_kv_bytes(compressed.nbytes)
    return logits_from_hidden(x[0], weights)
