"""Seeded model constructors for experiments and verification.

``make_random_model`` gives an arbitrary but deterministic model whose
activations stay finite at long prompt lengths.  ``make_copy_model`` builds a
model whose early-layer attention scores have a closed form: embeddings are
near-orthonormal unit vectors and the attention projections are identities,
so the head-summed last-row score of key position i is (up to one positive
normalization factor per layer) the embedding inner product between token i
and the final query token.  Positions of tokens equal to the query token
therefore win every selection, at any depth, with no positional term.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .errors import ConfigurationError
from .model import F32, LayerWeights, ModelWeights

_COPY_EMBED_SEED = 0x5EED


def make_random_model(cfg: ModelConfig, seed: int) -> ModelWeights:
    """Deterministic random weights, scaled 1/sqrt(d_model) to keep activations finite."""
    rng = np.random.default_rng(seed)
    scale = F32(1.0 / np.sqrt(cfg.d_model))
    kv_dim = cfg.n_kv_heads * cfg.head_dim

    def mat(rows: int, cols: int) -> np.ndarray:
        return (rng.standard_normal((rows, cols), dtype=np.float32) * scale).astype(F32)

    layers = [
        LayerWeights(
            wq=mat(cfg.d_model, cfg.d_model),
            wk=mat(cfg.d_model, kv_dim),
            wv=mat(cfg.d_model, kv_dim),
            wo=mat(cfg.d_model, cfg.d_model),
            w_in=mat(cfg.d_model, cfg.hidden_mlp),
            w_out=mat(cfg.hidden_mlp, cfg.d_model),
            attn_norm=np.ones(cfg.d_model, dtype=F32),
            mlp_norm=np.ones(cfg.d_model, dtype=F32),
        )
        for _ in range(cfg.n_layers)
    ]
    return ModelWeights(
        config=cfg,
        tok_emb=mat(cfg.vocab_size, cfg.d_model),
        layers=layers,
        final_norm=np.ones(cfg.d_model, dtype=F32),
        out_emb=mat(cfg.d_model, cfg.vocab_size),
    )


def _unit_rows(rows: int, cols: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((rows, cols))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x.astype(F32)


def make_copy_model(cfg: ModelConfig) -> ModelWeights:
    """Identity-attention model with predictable selection behavior.

    Requires ``use_rope=False`` (selection must be position-free), identity-
    shaped projections (``n_kv_heads == n_heads``), and ``head_dim >= 64`` so
    random unit embeddings are close enough to orthogonal that cross-token
    scores never compete with a same-token match.  The MLP is zeroed, norm
    gains are ones, and the output embedding is the transpose of the input
    table, so greedy decoding emits whichever token the last position's
    hidden state most resembles.
    """
    if cfg.use_rope:
        raise ConfigurationError("copy model requires use_rope=False")
    if cfg.n_kv_heads != cfg.n_heads:
        raise ConfigurationError("copy model requires n_kv_heads == n_heads")
    if cfg.head_dim < 64:
        raise ConfigurationError("copy model requires head_dim >= 64")
    if cfg.n_layers < 1:
        raise ConfigurationError("copy model requires at least one layer")

    eye = np.eye(cfg.d_model, dtype=F32)
    layers = [
        LayerWeights(
            wq=eye.copy(),
            wk=eye.copy(),
            wv=eye.copy(),
            wo=eye.copy(),
            w_in=np.zeros((cfg.d_model, cfg.hidden_mlp), dtype=F32),
            w_out=np.zeros((cfg.hidden_mlp, cfg.d_model), dtype=F32),
            attn_norm=np.ones(cfg.d_model, dtype=F32),
            mlp_norm=np.ones(cfg.d_model, dtype=F32),
        )
        for _ in range(cfg.n_layers)
    ]
    tok_emb = _unit_rows(cfg.vocab_size, cfg.d_model, _COPY_EMBED_SEED)
    return ModelWeights(
        config=cfg,
        tok_emb=tok_emb,
        layers=layers,
        final_norm=np.ones(cfg.d_model, dtype=F32),
        out_emb=tok_emb.T.copy(),
    )


def copy_model_config(
    *,
    n_layers: int = 2,
    n_heads: int = 2,
    head_dim: int = 64,
    hidden_mlp: int = 64,
    vocab_size: int = 260,
    max_seq: int = 16384,
) -> ModelConfig:
    """A config satisfying the copy-model constraints."""
    return ModelConfig(
        n_layers=n_layers,
        n_heads=n_heads,
        n_kv_heads=n_heads,
        head_dim=head_dim,
        d_model=n_heads * head_dim,
        vocab_size=vocab_size,
        hidden_mlp=hidden_mlp,
        use_rope=False,
        max_seq=max_seq,
    )
