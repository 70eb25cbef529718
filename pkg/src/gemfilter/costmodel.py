"""Closed-form cost model for the four generation strategies.

Every cell of the asymptotic complexity table is concretized with the
engine's own constants so that measured counters can be checked as exact
integer identities.  The conventions, shared with the implementation:

* One multiply-add = 2 FLOPs; only matmuls count.  Per layer over ``n``
  tokens: attention scores and values cost ``2*h*n^2*head_dim`` each, the
  q/k/v/o projections ``4*n*d_model^2 + 4*n*d_model*(h_kv*head_dim)``, and
  the MLP ``4*n*d_model*hidden_mlp``.  A logits readout costs
  ``2*d_model*vocab`` per position.
* Generating ``t`` tokens takes the prompt pass's last-position logits plus
  ``t - 1`` decode steps; decode step ``j`` attends over ``start + j`` keys.
* KV bytes are key+value storage only, ``bytes_per_elem`` per element, with
  ``h_kv`` stored heads (the single-kv-head-per-group table is the special
  case ``h_kv = h``).
* Weight bytes count transformer layers actually read in a phase
  (``layers_touched * w``); embeddings and the final norm live outside ``w``.

Wall time is measured and reported but never predicted here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import ModelConfig
from .counting import GENERATION, PROMPT, PhaseCost
from .errors import ContractViolation

METHODS = ("full", "snapkv", "h2o", "gemfilter")
FLOP_TERMS = ("attn_score", "attn_value", "proj", "mlp", "logits")


@dataclass(frozen=True)
class CostParams:
    """Inputs to the closed forms; dims mirror the model configuration."""

    n: int  # prompt length
    k: int  # selection / cache budget
    t: int  # generated tokens
    r: int  # filter layer
    m: int  # layers
    h: int  # query heads
    head_dim: int
    h_kv: int
    d_model: int
    hidden_mlp: int
    vocab: int
    layer_weight_bytes: int
    bytes_per_elem: int = 4

    def __post_init__(self) -> None:
        if min(self.n, self.k, self.r, self.m, self.h, self.head_dim) < 1 or self.t < 0:
            raise ContractViolation("cost parameters must be positive (t may be 0)")
        if not 1 <= self.r <= self.m:
            raise ContractViolation(f"filter layer {self.r} outside 1..{self.m}")

    @property
    def k_eff(self) -> int:
        return min(self.k, self.n)

    @property
    def dominance_holds(self) -> bool:
        """The regime n >= max(d, k, t) under which the ordering claims apply."""
        return self.n >= max(self.head_dim, self.k, self.t)

    @classmethod
    def from_config(
        cls, cfg: ModelConfig, *, n: int, k: int, t: int, r: int, layer_weight_bytes: int
    ) -> "CostParams":
        return cls(
            n=n,
            k=k,
            t=t,
            r=r,
            m=cfg.n_layers,
            h=cfg.n_heads,
            head_dim=cfg.head_dim,
            h_kv=cfg.n_kv_heads,
            d_model=cfg.d_model,
            hidden_mlp=cfg.hidden_mlp,
            vocab=cfg.vocab_size,
            layer_weight_bytes=layer_weight_bytes,
        )

    @classmethod
    def from_weights(cls, weights, *, n: int, k: int, t: int, r: int) -> "CostParams":
        return cls.from_config(
            weights.config, n=n, k=k, t=t, r=r, layer_weight_bytes=weights.per_layer_bytes
        )


@dataclass
class CostCell:
    """Predicted exact counters for one method in one phase."""

    flops: dict[str, int] = field(default_factory=dict)
    kv_bytes_peak: int = 0
    weight_bytes: int = 0

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    @property
    def total_bytes(self) -> int:
        return self.kv_bytes_peak + self.weight_bytes


def _zero_cell() -> CostCell:
    return CostCell(flops={term: 0 for term in FLOP_TERMS})


def _prefill_flops(p: CostParams, n_tokens: int, layers: int) -> dict[str, int]:
    attn = layers * p.h * 2 * n_tokens * n_tokens * p.head_dim
    proj = layers * n_tokens * (
        4 * p.d_model * p.d_model + 4 * p.d_model * p.h_kv * p.head_dim
    )
    mlp = layers * 4 * n_tokens * p.d_model * p.hidden_mlp
    return {"attn_score": attn, "attn_value": attn, "proj": proj, "mlp": mlp, "logits": 0}


def _decode_flops(p: CostParams, start: int, steps: int) -> dict[str, int]:
    key_rows = steps * start + steps * (steps + 1) // 2
    attn = p.m * p.h * 2 * p.head_dim * key_rows
    proj = p.m * steps * (
        4 * p.d_model * p.d_model + 4 * p.d_model * p.h_kv * p.head_dim
    )
    mlp = p.m * steps * 4 * p.d_model * p.hidden_mlp
    logits = steps * 2 * p.d_model * p.vocab
    return {"attn_score": attn, "attn_value": attn, "proj": proj, "mlp": mlp, "logits": logits}


def _add(a: dict[str, int], b: dict[str, int]) -> dict[str, int]:
    return {term: a.get(term, 0) + b.get(term, 0) for term in FLOP_TERMS}


def _kv_bytes(p: CostParams, layers: int, rows: int) -> int:
    return 2 * layers * p.h_kv * rows * p.head_dim * p.bytes_per_elem


def cost_table(p: CostParams) -> dict[str, dict[str, CostCell]]:
    """Exact predicted counters per method and phase.

    Prompt-phase rows: a full-cache pass costs every layer over n tokens and
    retains all caches; the compressors cost the same pass but peak at one
    full layer plus all compressed layers; the filter pass costs r layers and
    retains nothing beyond one layer's K/V.  Generation-phase rows: the
    two-pass method re-prefills the k selected tokens (its k^2 term) while
    the others decode against caches of n or k rows.
    """
    k = p.k_eff
    s = max(p.t - 1, 0)
    logits_once = 2 * p.d_model * p.vocab if p.t >= 1 else 0
    gen_weight = p.m * p.layer_weight_bytes if p.t >= 2 else 0

    full_prompt = CostCell(
        flops=_add(_prefill_flops(p, p.n, p.m), {"logits": logits_once}),
        kv_bytes_peak=_kv_bytes(p, p.m, p.n),
        weight_bytes=p.m * p.layer_weight_bytes,
    )
    compress_prompt = CostCell(
        flops=dict(full_prompt.flops),
        kv_bytes_peak=_kv_bytes(p, 1, p.n) + _kv_bytes(p, p.m, k),
        weight_bytes=p.m * p.layer_weight_bytes,
    )
    filter_prompt = CostCell(
        flops=_prefill_flops(p, p.n, p.r),
        kv_bytes_peak=_kv_bytes(p, 1, p.n),
        weight_bytes=p.r * p.layer_weight_bytes,
    )

    if p.t == 0:
        full_gen = _zero_cell()
        compress_gen = _zero_cell()
        twopass_gen = _zero_cell()
    else:
        full_gen = CostCell(
            flops=_decode_flops(p, p.n, s),
            kv_bytes_peak=_kv_bytes(p, p.m, p.n + s),
            weight_bytes=gen_weight,
        )
        compress_gen = CostCell(
            flops=_decode_flops(p, k, s),
            kv_bytes_peak=_kv_bytes(p, p.m, k + s),
            weight_bytes=gen_weight,
        )
        twopass_gen = CostCell(
            flops=_add(
                _add(_prefill_flops(p, k, p.m), {"logits": logits_once}),
                _decode_flops(p, k, s),
            ),
            kv_bytes_peak=_kv_bytes(p, p.m, k + s),
            weight_bytes=p.m * p.layer_weight_bytes,
        )

    return {
        "full": {PROMPT: full_prompt, GENERATION: full_gen},
        "snapkv": {PROMPT: compress_prompt, GENERATION: compress_gen},
        "h2o": {
            PROMPT: CostCell(
                flops=dict(compress_prompt.flops),
                kv_bytes_peak=compress_prompt.kv_bytes_peak,
                weight_bytes=compress_prompt.weight_bytes,
            ),
            GENERATION: CostCell(
                flops=dict(compress_gen.flops),
                kv_bytes_peak=compress_gen.kv_bytes_peak,
                weight_bytes=compress_gen.weight_bytes,
            ),
        },
        "gemfilter": {PROMPT: filter_prompt, GENERATION: twopass_gen},
    }


@dataclass
class VerificationEntry:
    method: str
    phase: str
    term: str
    predicted: int
    measured: int

    @property
    def ok(self) -> bool:
        return self.predicted == self.measured


@dataclass
class VerificationReport:
    entries: list[VerificationEntry]
    wall_times: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(e.ok for e in self.entries)

    def mismatches(self) -> list[VerificationEntry]:
        return [e for e in self.entries if not e.ok]

    def format_text(self) -> str:
        lines = []
        width = max((len(f"{e.method}/{e.phase}/{e.term}") for e in self.entries), default=10)
        for e in self.entries:
            state = "ok " if e.ok else "FAIL"
            name = f"{e.method}/{e.phase}/{e.term}"
            lines.append(
                f"{state} {name:<{width}} predicted={e.predicted:>16d} measured={e.measured:>16d}"
            )
        for method, phases in sorted(self.wall_times.items()):
            for phase, wall in sorted(phases.items()):
                lines.append(f"time {method}/{phase}: {wall:.4f}s (reported only)")
        lines.append("counters " + ("MATCH" if self.ok else "DIVERGE"))
        return "\n".join(lines)


def verify_counters(
    measured: dict[str, dict[str, PhaseCost]],
    predicted: dict[str, dict[str, CostCell]],
) -> VerificationReport:
    """Compare measured phase counters against the closed forms, exactly.

    Every FLOP term, KV byte peak, and weight byte count must match as an
    integer.  Wall times are carried through for reporting, never asserted.
    """
    entries: list[VerificationEntry] = []
    walls: dict[str, dict[str, float]] = {}
    for method, phases in measured.items():
        if method not in predicted:
            raise ContractViolation(f"no predictions for method {method!r}")
        for phase, cost in phases.items():
            cell = predicted[method][phase]
            for term in FLOP_TERMS:
                entries.append(
                    VerificationEntry(
                        method=method,
                        phase=phase,
                        term=term,
                        predicted=cell.flops.get(term, 0),
                        measured=cost.flops_by_tag.get(term, 0),
                    )
                )
            entries.append(
                VerificationEntry(
                    method=method,
                    phase=phase,
                    term="kv_bytes_peak",
                    predicted=cell.kv_bytes_peak,
                    measured=cost.kv_bytes_peak,
                )
            )
            entries.append(
                VerificationEntry(
                    method=method,
                    phase=phase,
                    term="weight_bytes",
                    predicted=cell.weight_bytes,
                    measured=cost.weight_bytes_touched,
                )
            )
            walls.setdefault(method, {})[phase] = cost.wall_time
    return VerificationReport(entries=entries, wall_times=walls)


def format_cost_table(p: CostParams, table: dict[str, dict[str, CostCell]]) -> str:
    """Aligned text rendering of the predicted table plus headline ratios."""
    lines = [
        f"cost model: n={p.n} k={p.k} t={p.t} r={p.r} m={p.m} h={p.h} "
        f"head_dim={p.head_dim} h_kv={p.h_kv} d_model={p.d_model} w={p.layer_weight_bytes}B",
        f"{'method':<10} {'phase':<11} {'flops':>16} {'kv_bytes_peak':>14} {'weight_bytes':>13}",
    ]
    for method in METHODS:
        for phase in (PROMPT, GENERATION):
            cell = table[method][phase]
            lines.append(
                f"{method:<10} {phase:<11} {cell.total_flops:>16d} "
                f"{cell.kv_bytes_peak:>14d} {cell.weight_bytes:>13d}"
            )
    full_p = table["full"][PROMPT]
    gem_p = table["gemfilter"][PROMPT]
    if gem_p.total_flops:
        ratio = full_p.total_flops / gem_p.total_flops
        lines.append(f"prompt flops ratio full/gemfilter = {ratio:.2f} (layer ratio {p.m}/{p.r} = {p.m / p.r:.2f})")
    if gem_p.total_bytes:
        lines.append(
            "prompt bytes full : snapkv : gemfilter = "
            f"{full_p.total_bytes} : {table['snapkv'][PROMPT].total_bytes} : {gem_p.total_bytes}"
        )
    return "\n".join(lines)
