"""Decoder-only transformer with grouped-query causal attention.

The forward path is split the way the engine needs it: :func:`prefill` runs
the prompt through the first ``upto_layer`` layers (optionally without
retaining KV caches, and exposing the last computed layer's per-head Q/K for
token selection), and :func:`decode_step` advances one token against mutable
per-layer caches.

Layer body: RMS-norm -> attention -> residual add -> RMS-norm -> two-matrix
MLP with a sigmoid-weighted linear activation -> residual add.  All math is
float32.  Matmuls report to the ambient cost session; KV byte checkpoints and
per-layer weight touches are recorded here so phase counters match the closed
forms in :mod:`gemfilter.costmodel` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .counting import note_kv_bytes, touch_layer
from .errors import ConfigurationError, ContractViolation
from .kernels import argmax, matmul, rms_norm_rows

F32 = np.float32


@dataclass
class LayerWeights:
    wq: np.ndarray  # (d_model, n_heads * head_dim)
    wk: np.ndarray  # (d_model, n_kv_heads * head_dim)
    wv: np.ndarray  # (d_model, n_kv_heads * head_dim)
    wo: np.ndarray  # (d_model, d_model)
    w_in: np.ndarray  # (d_model, hidden_mlp)
    w_out: np.ndarray  # (hidden_mlp, d_model)
    attn_norm: np.ndarray  # (d_model,)
    mlp_norm: np.ndarray  # (d_model,)

    def nbytes(self) -> int:
        return (
            self.wq.nbytes + self.wk.nbytes + self.wv.nbytes + self.wo.nbytes
            + self.w_in.nbytes + self.w_out.nbytes
            + self.attn_norm.nbytes + self.mlp_norm.nbytes
        )


@dataclass
class ModelWeights:
    config: ModelConfig
    tok_emb: np.ndarray  # (vocab_size, d_model)
    layers: list[LayerWeights]
    final_norm: np.ndarray  # (d_model,)
    out_emb: np.ndarray  # (d_model, vocab_size)

    def __post_init__(self) -> None:
        cfg = self.config
        expect = {
            "tok_emb": (cfg.vocab_size, cfg.d_model),
            "final_norm": (cfg.d_model,),
            "out_emb": (cfg.d_model, cfg.vocab_size),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ConfigurationError(f"{name} has shape {arr.shape}, expected {shape}")
        if len(self.layers) != cfg.n_layers:
            raise ConfigurationError(
                f"expected {cfg.n_layers} layers, got {len(self.layers)}"
            )
        kv_dim = cfg.n_kv_heads * cfg.head_dim
        layer_expect = {
            "wq": (cfg.d_model, cfg.d_model),
            "wk": (cfg.d_model, kv_dim),
            "wv": (cfg.d_model, kv_dim),
            "wo": (cfg.d_model, cfg.d_model),
            "w_in": (cfg.d_model, cfg.hidden_mlp),
            "w_out": (cfg.hidden_mlp, cfg.d_model),
            "attn_norm": (cfg.d_model,),
            "mlp_norm": (cfg.d_model,),
        }
        sizes = set()
        for i, lw in enumerate(self.layers):
            for name, shape in layer_expect.items():
                arr = getattr(lw, name)
                if arr.shape != shape:
                    raise ConfigurationError(
                        f"layers.{i}.{name} has shape {arr.shape}, expected {shape}"
                    )
            sizes.add(lw.nbytes())
        if len(sizes) != 1:
            raise ConfigurationError("per-layer weight byte sizes must be identical")

    @property
    def per_layer_bytes(self) -> int:
        """Weight bytes of one transformer layer (identical across layers)."""
        return self.layers[0].nbytes()

    def named_tensors(self):
        """Yield every weight tensor with a stable name, for serialization."""
        yield "tok_emb", self.tok_emb
        for i, lw in enumerate(self.layers):
            for name in ("wq", "wk", "wv", "wo", "w_in", "w_out", "attn_norm", "mlp_norm"):
                yield f"layers.{i}.{name}", getattr(lw, name)
        yield "final_norm", self.final_norm
        yield "out_emb", self.out_emb


@dataclass
class LayerKV:
    """Per-layer key/value cache: post-rotation keys, plus original positions."""

    keys: np.ndarray  # (seq, n_kv_heads, head_dim)
    values: np.ndarray  # (seq, n_kv_heads, head_dim)
    positions: np.ndarray  # (seq,) int64, strictly increasing

    def __post_init__(self) -> None:
        if not (self.keys.shape == self.values.shape and self.keys.shape[0] == self.positions.shape[0]):
            raise ContractViolation("LayerKV component lengths disagree")
        if self.positions.size > 1 and not np.all(np.diff(self.positions) > 0):
            raise ContractViolation("LayerKV positions must be strictly increasing")

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def nbytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes

    def append(self, k_row: np.ndarray, v_row: np.ndarray, position: int) -> None:
        """Append one token's per-kv-head K/V rows."""
        if len(self) and int(self.positions[-1]) >= position:
            raise ContractViolation("appended position must exceed the cache maximum")
        self.keys = np.concatenate([self.keys, k_row[None]], axis=0)
        self.values = np.concatenate([self.values, v_row[None]], axis=0)
        self.positions = np.concatenate([self.positions, np.asarray([position], dtype=np.int64)])


@dataclass
class LayerAttnStats:
    """Reductions of one layer's prompt attention, per query head.

    ``col_sums[j, i]`` is the total attention probability key ``i`` received
    from every query of head ``j``; ``window_sums`` restricts the senders to
    the trailing observation window.
    """

    col_sums: np.ndarray  # (n_heads, n) float64
    window_sums: np.ndarray  # (n_heads, n) float64
    window: int


@dataclass
class PrefillResult:
    hidden: np.ndarray  # (n, d_model) last computed layer's output (pre final norm)
    caches: list[LayerKV] | None
    layer_q: np.ndarray  # (n, n_heads, head_dim) post-rotation Q of last computed layer
    layer_k: np.ndarray  # (n, n_kv_heads, head_dim) post-rotation K of last computed layer
    logits: np.ndarray | None  # (vocab,) last-position logits, when requested
    stats: list[LayerAttnStats] | None = None
    layer_stats_window: int = 0
    extra: dict = field(default_factory=dict)


def embed(tokens, weights: ModelWeights) -> np.ndarray:
    """Look up embedding rows; row i is the table row for tokens[i]."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ContractViolation("embed expects a non-empty token sequence")
    vocab = weights.config.vocab_size
    if ids.min() < 0 or ids.max() >= vocab:
        bad = int(ids[(ids < 0) | (ids >= vocab)][0])
        raise ContractViolation(f"token id {bad} outside vocabulary of size {vocab}")
    return weights.tok_emb[ids].astype(F32, copy=True)


def _rope_cos_sin(positions: np.ndarray, head_dim: int, theta: float):
    if head_dim % 2 != 0:
        raise ConfigurationError("rotary embedding requires an even head_dim")
    rates = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * rates[None, :]
    return np.cos(angles).astype(F32), np.sin(angles).astype(F32)


def apply_rope(x: np.ndarray, positions, theta: float) -> np.ndarray:
    """Rotate consecutive dimension pairs of per-head vectors.

    Pair ``i`` of a vector at position ``p`` rotates by ``p * theta**(-2i/head_dim)``.
    Shape ``(seq, heads, head_dim)``; positions may be any integers.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ContractViolation("apply_rope expects (seq, heads, head_dim)")
    positions = np.asarray(positions)
    if positions.shape != (x.shape[0],):
        raise ContractViolation("apply_rope positions must match the sequence length")
    cos, sin = _rope_cos_sin(positions, x.shape[2], theta)
    cos = cos[:, None, :]
    sin = sin[:, None, :]
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def repeat_kv(kv: np.ndarray, groups: int) -> np.ndarray:
    """Expand kv-head vectors so kv-head j serves query heads [j*groups, (j+1)*groups)."""
    kv = np.asarray(kv)
    if kv.ndim != 3:
        raise ContractViolation("repeat_kv expects (seq, n_kv_heads, head_dim)")
    if groups < 1:
        raise ConfigurationError("repeat_kv groups must be >= 1")
    if groups == 1:
        return kv
    return np.repeat(kv, groups, axis=1)


def _attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, want_probs: bool):
    """Single-head causal attention; optionally returns the probability matrix.

    Queries align with the end of the key sequence: query i attends keys
    0..(nk - nq + i).  The score matrix is computed densely and masked
    pre-softmax, so the FLOP charge is the full 2*nq*d*nk + 2*nq*nk*d.
    """
    nq, dim = q.shape
    nk = k.shape[0]
    if k.shape[1] != dim or v.shape[0] != nk:
        raise ContractViolation(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    if nq > nk:
        raise ContractViolation("attention requires q rows <= k rows")
    scores = matmul(q, k.T, tag="attn_score")
    scores *= F32(1.0 / np.sqrt(dim))
    offset = nk - nq
    for i in range(nq):
        lo = offset + i + 1
        if lo >= nk:
            break
        scores[i, lo:] = -np.inf
    scores -= np.max(scores, axis=1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= np.sum(scores, axis=1, keepdims=True)
    out = matmul(scores, v, tag="attn_value")
    return out, (scores if want_probs else None)


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Causal self-attention for one head: masked softmax(q k^T / sqrt(d)) v."""
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.asarray(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ContractViolation("causal_attention expects 2-D q, k, v")
    out, _ = _attention(q, k, v, want_probs=False)
    return out


def _silu(x: np.ndarray) -> np.ndarray:
    # Clipping keeps exp() in range; beyond +-60 the sigmoid saturates in f32.
    z = np.clip(x, -60.0, 60.0)
    return x / (1.0 + np.exp(-z))


def _mlp(xn: np.ndarray, lw: LayerWeights) -> np.ndarray:
    hidden = matmul(xn, lw.w_in, tag="mlp")
    hidden = _silu(hidden)
    return matmul(hidden, lw.w_out, tag="mlp")


def run_layer(
    x: np.ndarray,
    weights: ModelWeights,
    layer_idx: int,
    positions: np.ndarray,
    stats_window: int = 0,
):
    """One transformer layer over the whole sequence.

    Returns ``(x_out, q_heads, k_heads, v_heads, stats)`` where q/k are
    post-rotation.  ``stats_window > 0`` additionally reduces each head's
    attention probabilities into column sums (whole prompt and trailing
    window), which the cache compression strategies consume.
    """
    cfg = weights.config
    lw = weights.layers[layer_idx]
    touch_layer(layer_idx, weights.per_layer_bytes)
    n = x.shape[0]
    h, hk, dh = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim

    xn = rms_norm_rows(x, lw.attn_norm, cfg.norm_eps)
    q = matmul(xn, lw.wq, tag="proj").reshape(n, h, dh)
    k = matmul(xn, lw.wk, tag="proj").reshape(n, hk, dh)
    v = matmul(xn, lw.wv, tag="proj").reshape(n, hk, dh)
    if cfg.use_rope:
        q = apply_rope(q, positions, cfg.rope_theta)
        k = apply_rope(k, positions, cfg.rope_theta)

    stats = None
    if stats_window:
        if stats_window > n:
            raise ContractViolation("stats window exceeds prompt length")
        stats = LayerAttnStats(
            col_sums=np.zeros((h, n), dtype=np.float64),
            window_sums=np.zeros((h, n), dtype=np.float64),
            window=stats_window,
        )
    attn = np.empty((n, cfg.d_model), dtype=F32)
    groups = cfg.kv_groups
    for qh in range(h):
        kvh = qh // groups
        k_head = np.ascontiguousarray(k[:, kvh, :])
        v_head = np.ascontiguousarray(v[:, kvh, :])
        out, probs = _attention(q[:, qh, :], k_head, v_head, want_probs=stats is not None)
        attn[:, qh * dh : (qh + 1) * dh] = out
        if stats is not None:
            stats.col_sums[qh] = probs.sum(axis=0, dtype=np.float64)
            stats.window_sums[qh] = probs[n - stats_window :].sum(axis=0, dtype=np.float64)
    x = x + matmul(attn, lw.wo, tag="proj")
    xn2 = rms_norm_rows(x, lw.mlp_norm, cfg.norm_eps)
    x = x + _mlp(xn2, lw)
    return x, q, k, v, stats


def logits_from_hidden(hidden_row: np.ndarray, weights: ModelWeights) -> np.ndarray:
    """Final norm plus output embedding for a single hidden row."""
    normed = rms_norm_rows(hidden_row.reshape(1, -1), weights.final_norm, weights.config.norm_eps)
    return matmul(normed, weights.out_emb, tag="logits")[0]


def prefill(
    tokens,
    weights: ModelWeights,
    upto_layer: int | None = None,
    *,
    retain_caches: bool = True,
    want_logits: bool | None = None,
    stats_window: int = 0,
) -> PrefillResult:
    """Run the prompt through layers 1..upto_layer.

    With ``retain_caches=False`` only the current layer's K/V stay live (the
    token-selection pass needs no caches), which the KV byte checkpoints
    reflect.  Logits require the full stack and are computed for the last
    position only.
    """
    cfg = weights.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ContractViolation("prefill requires a non-empty prompt")
    if ids.size > cfg.max_seq:
        raise ContractViolation(f"prompt length {ids.size} exceeds max_seq {cfg.max_seq}")
    upto = cfg.n_layers if upto_layer is None else int(upto_layer)
    if not 1 <= upto <= cfg.n_layers:
        raise ContractViolation(f"upto_layer {upto} outside 1..{cfg.n_layers}")
    if want_logits is None:
        want_logits = upto == cfg.n_layers
    if want_logits and upto != cfg.n_layers:
        raise ContractViolation("logits require running every layer")

    n = ids.size
    x = embed(ids, weights)
    positions = np.arange(n, dtype=np.int64)
    caches: list[LayerKV] | None = [] if retain_caches else None
    stats_list: list[LayerAttnStats] | None = [] if stats_window else None
    last_q = last_k = None
    for li in range(upto):
        x, q, k, v, st = run_layer(x, weights, li, positions, stats_window=stats_window)
        if caches is not None:
            caches.append(LayerKV(keys=k, values=v, positions=positions.copy()))
            note_kv_bytes(sum(c.nbytes for c in caches))
        else:
            note_kv_bytes(k.nbytes + v.nbytes)
        if stats_list is not None:
            stats_list.append(st)
        if li == upto - 1:
            last_q, last_k = q, k

    logits = logits_from_hidden(x[-1], weights) if want_logits else None
    return PrefillResult(
        hidden=x,
        caches=caches,
        layer_q=last_q,
        layer_k=last_k,
        logits=logits,
        stats=stats_list,
        layer_stats_window=stats_window,
    )


def decode_step(token: int, caches: list[LayerKV], weights: ModelWeights) -> np.ndarray:
    """Advance generation by one token; appends one K/V row per layer.

    The new token's position is one past the previous cache maximum, and the
    returned logits cover the whole vocabulary.
    """
    cfg = weights.config
    if not caches or len(caches) != cfg.n_layers:
        raise ContractViolation("decode_step requires one prefilled cache per layer")
    if not 0 <= int(token) < cfg.vocab_size:
        raise ContractViolation(f"token id {token} outside vocabulary")
    if len(caches[0]) + 1 > cfg.max_seq:
        raise ContractViolation("cache would exceed max_seq")

    h, hk, dh = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    position = int(caches[0].positions[-1]) + 1
    pos_arr = np.asarray([position], dtype=np.int64)
    x = weights.tok_emb[int(token)][None, :].astype(F32, copy=True)
    groups = cfg.kv_groups
    for li, (lw, cache) in enumerate(zip(weights.layers, caches)):
        touch_layer(li, weights.per_layer_bytes)
        xn = rms_norm_rows(x, lw.attn_norm, cfg.norm_eps)
        q = matmul(xn, lw.wq, tag="proj").reshape(1, h, dh)
        k = matmul(xn, lw.wk, tag="proj").reshape(1, hk, dh)
        v = matmul(xn, lw.wv, tag="proj").reshape(1, hk, dh)
        if cfg.use_rope:
            q = apply_rope(q, pos_arr, cfg.rope_theta)
            k = apply_rope(k, pos_arr, cfg.rope_theta)
        cache.append(k[0], v[0], position)
        attn = np.empty((1, cfg.d_model), dtype=F32)
        for qh in range(h):
            kvh = qh // groups
            k_head = np.ascontiguousarray(cache.keys[:, kvh, :])
            v_head = np.ascontiguousarray(cache.values[:, kvh, :])
            out, _ = _attention(q[:, qh, :], k_head, v_head, want_probs=False)
            attn[:, qh * dh : (qh + 1) * dh] = out
        x = x + matmul(attn, lw.wo, tag="proj")
        xn2 = rms_norm_rows(x, lw.mlp_norm, cfg.norm_eps)
        x = x + _mlp(xn2, lw)
    note_kv_bytes(sum(c.nbytes for c in caches))
    return logits_from_hidden(x[0], weights)


def greedy_generate(weights: ModelWeights, tokens, t_max: int) -> list[int]:
    """Full-model greedy generation: prefill, then token-by-token decode.

    Token 1 comes from the prefill's last-position logits; each further token
    costs one decode step.  Phase attribution is the caller's concern.
    """
    if t_max < 0:
        raise ContractViolation("t_max must be >= 0")
    if t_max == 0:
        return []
    pre = prefill(tokens, weights, want_logits=True)
    out = [argmax(pre.logits)]
    for _ in range(t_max - 1):
        logits = decode_step(out[-1], pre.caches, weights)
        out.append(argmax(logits))
    return out
