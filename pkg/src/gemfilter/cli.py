"""Command-line interface.

Subcommands: ``make-model``, ``generate``, ``select``, ``needle``, ``cost``,
``bench``.  Exit codes: 0 success, 1 contract or runtime error (named on
stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import tokenizer
from .config import ModelConfig
from .costmodel import CostParams, cost_table, format_cost_table, verify_counters
from .errors import ContractViolation, EngineError
from .modelio import load_model, save_model
from .needle import NeedleSpec, needle_run
from .runner import (
    RunConfig,
    Strategy,
    metrics_document,
    run_generation,
    write_metrics,
)
from .selection import decode_selection, select_indices
from .strategies import EvictionPolicyParams
from .testmodels import make_copy_model, make_random_model

DEFAULT_CONFIG = dict(
    n_layers=4,
    n_heads=4,
    n_kv_heads=2,
    head_dim=16,
    vocab_size=tokenizer.VOCAB_SIZE,
    hidden_mlp=128,
    max_seq=16384,
)

# Copy models need identity-shaped projections and wide, rotation-free heads.
COPY_CONFIG = dict(
    n_layers=2,
    n_heads=2,
    n_kv_heads=2,
    head_dim=64,
    vocab_size=tokenizer.VOCAB_SIZE,
    hidden_mlp=64,
    max_seq=16384,
    use_rope=False,
)


def _add_prompt_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--prompt-text", help="prompt as raw text (byte tokenizer)")
    src.add_argument("--prompt-tokens", help="path to a JSON array of token ids")
    src.add_argument(
        "--prompt-random",
        type=int,
        metavar="N",
        help="random prompt of N tokens (see --seed)",
    )


def _add_metrics_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--metrics-out", help="append one NDJSON metrics document per run")
    p.add_argument(
        "--no-wall-times",
        action="store_true",
        help="omit wall times from metrics (byte-reproducible output)",
    )


def _load_prompt(args, vocab_size: int) -> list[int]:
    if args.prompt_text is not None:
        tokens = tokenizer.tokenize(args.prompt_text)
    elif args.prompt_tokens is not None:
        with open(args.prompt_tokens, "r", encoding="utf-8") as fh:
            tokens = json.load(fh)
        if not isinstance(tokens, list):
            raise ContractViolation("--prompt-tokens file must hold a JSON array")
        tokens = [int(t) for t in tokens]
    else:
        rng = np.random.default_rng(args.seed)
        tokens = rng.integers(0, vocab_size, size=int(args.prompt_random)).tolist()
    if not tokens:
        raise ContractViolation("prompt must be non-empty")
    return tokens


def _config_from_args(args, base: dict | None = None) -> ModelConfig:
    values = dict(DEFAULT_CONFIG if base is None else base)
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            values.update(json.load(fh))
    overrides = {
        "n_layers": args.layers,
        "n_heads": args.heads,
        "n_kv_heads": args.kv_heads,
        "head_dim": args.head_dim,
        "hidden_mlp": args.hidden_mlp,
        "vocab_size": args.vocab,
        "max_seq": args.max_seq,
        "rope_theta": args.rope_theta,
    }
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    if getattr(args, "no_rope", False):
        values["use_rope"] = False
    values.pop("d_model", None)
    values["d_model"] = values["n_heads"] * values["head_dim"]
    return ModelConfig.from_dict(values)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of model config fields")
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--kv-heads", type=int)
    p.add_argument("--head-dim", type=int)
    p.add_argument("--hidden-mlp", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--max-seq", type=int)
    p.add_argument("--rope-theta", type=float)
    p.add_argument("--no-rope", action="store_true")


def cmd_make_model(args) -> int:
    if args.kind == "copy":
        cfg = _config_from_args(args, base=COPY_CONFIG)
        weights = make_copy_model(cfg)
    else:
        cfg = _config_from_args(args)
        weights = make_random_model(cfg, args.seed)
    save_model(args.out, weights)
    print(f"wrote {args.kind} model to {args.out} ({cfg.n_layers} layers, d_model={cfg.d_model})")
    return 0


def _eviction_from_args(args) -> EvictionPolicyParams:
    return EvictionPolicyParams(
        observation_window=args.observation_window,
        pool_kernel=args.pool_kernel,
        recent_keep=args.recent_keep,
        pool_mode=getattr(args, "pool_mode", "avg"),
        window_in_budget=not args.window_outside_budget,
    )


def cmd_generate(args) -> int:
    weights = load_model(args.model)
    tokens = _load_prompt(args, weights.config.vocab_size)
    rc = RunConfig(
        strategy=Strategy.parse(args.strategy),
        max_new_tokens=args.max_new_tokens,
        select_k=args.select_k,
        filter_layer=args.filter_layer,
        pool_kernel=args.pool_kernel,
        pool_mode=args.pool_mode,
        include_first=args.include_first,
        eviction=_eviction_from_args(args),
    )
    result = run_generation(weights, tokens, rc)
    text = tokenizer.detokenize(result.output_tokens).decode("utf-8", errors="backslashreplace")
    print(text)
    if args.metrics_out:
        doc = metrics_document(
            weights=weights,
            tokens=tokens,
            rc=rc,
            result=result,
            include_wall_times=not args.no_wall_times,
            include_scores=args.emit_scores,
        )
        write_metrics(args.metrics_out, [doc])
    return 0


def cmd_select(args) -> int:
    weights = load_model(args.model)
    tokens = _load_prompt(args, weights.config.vocab_size)
    sel = select_indices(
        weights,
        tokens,
        args.filter_layer,
        args.select_k,
        args.pool_kernel,
        args.include_first,
        args.pool_mode,
    )
    sub = decode_selection(tokens, sel)
    print(
        f"selected {len(sub)} of {len(tokens)} tokens "
        f"(filter layer {args.filter_layer}, k={args.select_k})"
    )
    if args.show_indices:
        print("indices:", " ".join(str(int(i)) for i in sel.indices))
    print(tokenizer.detokenize(sub).decode("utf-8", errors="backslashreplace"))
    if args.metrics_out:
        doc = {
            "strategy": "select",
            "params": {"n": len(tokens), "k": args.select_k, "r": args.filter_layer},
            "selection": {"indices": [int(i) for i in sel.indices]},
        }
        write_metrics(args.metrics_out, [doc])
    return 0


def cmd_needle(args) -> int:
    weights = load_model(args.model)
    cfg = weights.config
    needle_tokens = tuple(tokenizer.tokenize(args.needle_text))
    if not needle_tokens:
        raise ContractViolation("--needle-text must be non-empty")
    query_text = args.query_text if args.query_text is not None else args.needle_text[-1]
    query_tokens = tokenizer.tokenize(query_text)
    if len(query_tokens) != 1:
        raise ContractViolation("--query-text must be a single byte")
    spec = NeedleSpec(
        haystack_len=args.haystack_len,
        depth_percent=args.depth_percent,
        needle=needle_tokens,
        query_token=query_tokens[0],
        seed=args.seed,
    )
    r_list = list(range(1, cfg.n_layers + 1)) if args.r_sweep else [args.filter_layer]
    report = needle_run(
        spec,
        weights,
        r_list,
        args.select_k,
        t_max=args.t_max,
        pool_kernel=args.pool_kernel,
        pool_mode=args.pool_mode,
    )
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True))
    else:
        print(f"# {report.metric_note}")
        for lr in report.layer_results:
            print(
                f"layer {lr.layer:>3}: coverage={lr.coverage:.3f} min_distance={lr.min_distance}"
            )
        if report.generation_match is not None:
            print(f"generation match vs full model: {report.generation_match}")
    if args.metrics_out:
        write_metrics(args.metrics_out, [report.to_dict()])
    return 0


def _cost_params(args) -> CostParams:
    if args.model:
        weights = load_model(args.model)
        return CostParams.from_weights(weights, n=args.n, k=args.k, t=args.t, r=args.r)
    h = args.h if args.h is not None else 4
    head_dim = args.head_dim if args.head_dim is not None else 16
    h_kv = args.kv_heads if args.kv_heads is not None else h
    d_model = h * head_dim
    hidden = args.hidden_mlp if args.hidden_mlp is not None else 4 * d_model
    vocab = args.vocab if args.vocab is not None else tokenizer.VOCAB_SIZE
    if args.m is None:
        raise ContractViolation("cost requires --m (layers) unless --model is given")
    kv_dim = h_kv * head_dim
    layer_elems = (
        2 * d_model * d_model + 2 * d_model * kv_dim + 2 * d_model * hidden + 2 * d_model
    )
    return CostParams(
        n=args.n,
        k=args.k,
        t=args.t,
        r=args.r,
        m=args.m,
        h=h,
        head_dim=head_dim,
        h_kv=h_kv,
        d_model=d_model,
        hidden_mlp=hidden,
        vocab=vocab,
        layer_weight_bytes=4 * layer_elems,
    )


def cmd_cost(args) -> int:
    params = _cost_params(args)
    table = cost_table(params)
    if args.json:
        doc = {
            method: {
                phase: {
                    "flops": cell.flops,
                    "total_flops": cell.total_flops,
                    "kv_bytes_peak": cell.kv_bytes_peak,
                    "weight_bytes": cell.weight_bytes,
                }
                for phase, cell in phases.items()
            }
            for method, phases in table.items()
        }
        print(json.dumps(doc, sort_keys=True))
    else:
        print(format_cost_table(params, table))
    return 0


def cmd_bench(args) -> int:
    if args.model:
        weights = load_model(args.model)
    else:
        weights = make_random_model(_config_from_args(args), args.seed)
    cfg = weights.config
    rng = np.random.default_rng(args.seed)
    tokens = rng.integers(0, cfg.vocab_size, size=args.n).tolist()
    eviction = _eviction_from_args(args)
    measured = {}
    docs = []
    for strategy in (Strategy.FULL, Strategy.SNAPKV, Strategy.H2O, Strategy.GEMFILTER):
        rc = RunConfig(
            strategy=strategy,
            max_new_tokens=args.t,
            select_k=args.k,
            filter_layer=args.r,
            pool_kernel=args.pool_kernel,
            pool_mode=args.pool_mode,
            eviction=eviction,
        )
        result = run_generation(weights, tokens, rc)
        measured[strategy.value] = result.session.snapshot()
        docs.append(
            metrics_document(
                weights=weights,
                tokens=tokens,
                rc=rc,
                result=result,
                include_wall_times=not args.no_wall_times,
            )
        )
    params = CostParams.from_weights(weights, n=args.n, k=args.k, t=args.t, r=args.r)
    report = verify_counters(measured, cost_table(params))
    if args.json:
        print(
            json.dumps(
                {
                    "ok": report.ok,
                    "mismatches": [
                        {
                            "method": e.method,
                            "phase": e.phase,
                            "term": e.term,
                            "predicted": e.predicted,
                            "measured": e.measured,
                        }
                        for e in report.mismatches()
                    ],
                    "wall_times": report.wall_times,
                },
                sort_keys=True,
            )
        )
    else:
        print(report.format_text())
    if args.metrics_out:
        write_metrics(args.metrics_out, docs)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gemfilter",
        description=(
            "Long-context inference engine: early-layer token selection, "
            "KV compression baselines, and an exact cost model."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-model", help="create and save a model file")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("random", "copy"), default="random")
    p.add_argument("--seed", type=int, default=0)
    _add_config_args(p)
    p.set_defaults(func=cmd_make_model)

    p = sub.add_parser("generate", help="generate tokens with a chosen strategy")
    p.add_argument("--model", required=True)
    _add_prompt_args(p)
    p.add_argument("--strategy", default="full", help="full | gemfilter | snapkv | h2o")
    p.add_argument("--max-new-tokens", type=int, default=16)
    p.add_argument("--select-k", type=int, default=64)
    p.add_argument("--filter-layer", type=int, default=1)
    p.add_argument("--pool-kernel", type=int, default=5)
    p.add_argument("--pool-mode", choices=("avg", "max"), default="avg")
    p.add_argument("--include-first", action="store_true")
    p.add_argument("--observation-window", type=int, default=32)
    p.add_argument("--recent-keep", type=int, default=32)
    p.add_argument("--window-outside-budget", action="store_true")
    p.add_argument("--emit-scores", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    _add_metrics_args(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("select", help="print the selected sub-sequence for inspection")
    p.add_argument("--model", required=True)
    _add_prompt_args(p)
    p.add_argument("--filter-layer", type=int, default=1)
    p.add_argument("--select-k", type=int, default=64)
    p.add_argument("--pool-kernel", type=int, default=5)
    p.add_argument("--pool-mode", choices=("avg", "max"), default="avg")
    p.add_argument("--include-first", action="store_true")
    p.add_argument("--show-indices", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    _add_metrics_args(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("needle", help="plant a needle and score the selection path")
    p.add_argument("--model", required=True)
    p.add_argument("--haystack-len", type=int, required=True)
    p.add_argument("--depth-percent", type=float, default=50.0)
    p.add_argument("--needle-text", default="bbbbbbbb")
    p.add_argument("--query-text", default=None)
    p.add_argument("--select-k", type=int, default=64)
    p.add_argument("--filter-layer", type=int, default=1)
    p.add_argument("--r-sweep", action="store_true", help="evaluate every layer")
    p.add_argument("--t-max", type=int, default=8)
    p.add_argument("--pool-kernel", type=int, default=5)
    p.add_argument("--pool-mode", choices=("avg", "max"), default="avg")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    _add_metrics_args(p)
    p.set_defaults(func=cmd_needle)

    p = sub.add_parser("cost", help="print the closed-form cost table")
    p.add_argument("--model")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--m", type=int)
    p.add_argument("--h", type=int)
    p.add_argument("--head-dim", type=int)
    p.add_argument("--kv-heads", type=int)
    p.add_argument("--hidden-mlp", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("bench", help="run all strategies and verify counters")
    p.add_argument("--model")
    _add_config_args(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pool-kernel", type=int, default=5)
    p.add_argument("--pool-mode", choices=("avg", "max"), default="avg")
    p.add_argument("--observation-window", type=int, default=32)
    p.add_argument("--recent-keep", type=int, default=32)
    p.add_argument("--window-outside-budget", action="store_true")
    p.add_argument("--json", action="store_true")
    _add_metrics_args(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except EngineError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
