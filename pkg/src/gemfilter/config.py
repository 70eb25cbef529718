"""Model architecture hyperparameters."""

from __future__ import annotations

from dataclasses import dataclass, asdict, fields

from .errors import ConfigurationError


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    d_model: int
    vocab_size: int
    hidden_mlp: int
    rope_theta: float = 10000.0
    use_rope: bool = True
    norm_eps: float = 1e-5
    max_seq: int = 8192

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise ConfigurationError("n_layers must be >= 1")
        if self.n_heads < 1 or self.n_kv_heads < 1:
            raise ConfigurationError("head counts must be >= 1")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigurationError(
                f"n_heads ({self.n_heads}) must be divisible by n_kv_heads ({self.n_kv_heads})"
            )
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must equal n_heads * head_dim "
                f"({self.n_heads} * {self.head_dim})"
            )
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must be >= 2")
        if self.hidden_mlp < 1:
            raise ConfigurationError("hidden_mlp must be >= 1")
        if self.rope_theta <= 0:
            raise ConfigurationError("rope_theta must be positive")
        if self.use_rope and self.head_dim % 2 != 0:
            raise ConfigurationError("rotary embedding requires an even head_dim")
        if self.norm_eps <= 0:
            raise ConfigurationError("norm_eps must be positive")
        if self.max_seq < 1:
            raise ConfigurationError("max_seq must be >= 1")

    @property
    def kv_groups(self) -> int:
        return self.n_heads // self.n_kv_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigurationError(f"unknown config fields: {sorted(extra)}")
        values = dict(data)
        # d_model may be omitted; it is determined by the head layout.
        if "d_model" not in values and "n_heads" in values and "head_dim" in values:
            values["d_model"] = values["n_heads"] * values["head_dim"]
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc
