"""Synthetic needle-in-a-haystack harness.

A needle token sequence is planted at a controlled depth inside a filler
haystack, a query token is appended, and the selection path is asked to find
it.  Scoring is exact rather than graded: per filter layer we report the
fraction of needle positions the selection covered and the minimum absolute
index distance from any selected position to the needle span (0 means the
span was hit).  When a single filter layer is given, the harness also checks
whether two-pass generation reproduces the full model's continuation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .counting import CostSession
from .errors import ContractViolation
from .model import ModelWeights, greedy_generate
from .selection import select_indices, selection_gen

METRIC_NOTE = (
    "exact metrics: coverage = |needle indices in selection| / needle length; "
    "min_distance = min absolute index distance from selection to the needle span "
    "(0 = overlap); no graded scoring"
)


@dataclass(frozen=True)
class NeedleSpec:
    haystack_len: int
    depth_percent: float
    needle: tuple[int, ...]
    query_token: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.haystack_len < 1:
            raise ContractViolation("haystack_len must be >= 1")
        if not 0 <= self.depth_percent <= 100:
            raise ContractViolation("depth_percent must lie in [0, 100]")
        if not self.needle:
            raise ContractViolation("needle must be non-empty")
        if len(self.needle) > self.haystack_len:
            raise ContractViolation("needle must fit inside the haystack")

    @property
    def insertion_index(self) -> int:
        return int(self.depth_percent / 100.0 * (self.haystack_len - len(self.needle)))


def build_needle_prompt(spec: NeedleSpec, vocab_size: int) -> tuple[list[int], tuple[int, int]]:
    """Build the prompt and needle span: haystack with the needle spliced in,
    then the query token appended as the final position.

    Filler tokens are drawn (seeded) from byte ids not used by the needle or
    the query, so the needle is the only content matching the query.
    """
    for tid in (*spec.needle, spec.query_token):
        if not 0 <= tid < vocab_size:
            raise ContractViolation(f"token id {tid} outside vocabulary of size {vocab_size}")
    forbidden = set(spec.needle) | {spec.query_token}
    pool = [t for t in range(min(vocab_size, 256)) if t not in forbidden]
    if not pool:
        raise ContractViolation("no filler tokens available outside the needle alphabet")
    rng = np.random.default_rng(spec.seed)
    filler = rng.choice(np.asarray(pool, dtype=np.int64), size=spec.haystack_len)
    start = spec.insertion_index
    tokens = filler.copy()
    tokens[start : start + len(spec.needle)] = np.asarray(spec.needle, dtype=np.int64)
    prompt = tokens.tolist() + [spec.query_token]
    return prompt, (start, start + len(spec.needle))


@dataclass
class NeedleLayerResult:
    layer: int
    coverage: float
    min_distance: int


@dataclass
class NeedleReport:
    spec: NeedleSpec
    k: int
    layer_results: list[NeedleLayerResult]
    chosen_layer: int
    generation_match: bool | None = None
    metric_note: str = METRIC_NOTE
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metric_note": self.metric_note,
            "haystack_len": self.spec.haystack_len,
            "depth_percent": self.spec.depth_percent,
            "needle_len": len(self.spec.needle),
            "k": self.k,
            "chosen_layer": self.chosen_layer,
            "layers": [
                {"layer": lr.layer, "coverage": lr.coverage, "min_distance": lr.min_distance}
                for lr in self.layer_results
            ],
            "generation_match": self.generation_match,
        }


def coverage_and_distance(indices: np.ndarray, span: tuple[int, int]) -> tuple[float, int]:
    start, end = span
    needle_len = end - start
    inside = np.count_nonzero((indices >= start) & (indices < end))
    coverage = inside / needle_len
    if inside:
        return coverage, 0
    below = indices[indices < start]
    above = indices[indices >= end]
    dists = []
    if below.size:
        dists.append(int(start - below.max()))
    if above.size:
        dists.append(int(above.min() - (end - 1)))
    return coverage, min(dists) if dists else int(10**9)


def needle_run(
    spec: NeedleSpec,
    weights: ModelWeights,
    r_list,
    k: int,
    *,
    t_max: int = 8,
    pool_kernel: int = 5,
    pool_mode: str = "avg",
) -> NeedleReport:
    """Score the selection path against a planted needle.

    For every layer in ``r_list``: run selection and record coverage and
    distance.  With a single layer, additionally compare two-pass generation
    against full-model generation on the same prompt.
    """
    r_list = [int(r) for r in r_list]
    if not r_list:
        raise ContractViolation("r_list must name at least one filter layer")
    prompt, span = build_needle_prompt(spec, weights.config.vocab_size)
    results = []
    for r in r_list:
        sel = select_indices(weights, prompt, r, k, pool_kernel, pool_mode=pool_mode)
        coverage, dist = coverage_and_distance(sel.indices, span)
        results.append(NeedleLayerResult(layer=r, coverage=coverage, min_distance=dist))
    chosen = r_list[0]
    match: bool | None = None
    if len(r_list) == 1 and t_max > 0:
        with CostSession().activate():
            two_pass, _sel = selection_gen(
                weights, prompt, chosen, k, t_max, pool_kernel, pool_mode=pool_mode
            )
        with CostSession().activate():
            reference = greedy_generate(weights, prompt, t_max)
        match = two_pass == reference
    return NeedleReport(
        spec=spec, k=k, layer_results=results, chosen_layer=chosen, generation_match=match
    )
