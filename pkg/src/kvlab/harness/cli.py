"""Command-line entry point.

Subcommands:
    gen-trace       write a synthetic trace file
    run             policy x budget sweep on traces or the toy model
    recall-sweep    sliding-window recall curve for one trace
    ablate          lookahead length/quality ablation
    latency         stage latency breakdown of one toy pipeline run
    export-queries  dump lookahead and response queries for external tools

Exit status: 0 only if every requested cell succeeded; 1 otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from ..binio import ContainerHeader, write_container
from ..metrics import window_recall_sweep
from ..policies import PolicyConfig
from .experiment import (
    DEFAULT_BUDGETS,
    DEFAULT_POLICIES,
    SCHEMA_VERSION,
    ExperimentConfig,
    run_ablation,
    run_experiment,
    run_toy_pipeline,
)
from .traces import TraceParams, gen_synthetic_trace, read_trace, write_trace


def _add_policy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=None, help="lookahead steps S")
    p.add_argument("--window", type=int, default=None, help="observation window length w")
    p.add_argument("--kernel", type=int, default=None, help="pooling kernel (odd)")
    p.add_argument("--mode", choices=["raw", "softmax"], default=None, help="score mode")
    p.add_argument("--sink-count", type=int, default=None)
    p.add_argument("--pyramid-floor", type=int, default=None)
    p.add_argument("--no-keep-window", action="store_true",
                   help="do not force-keep the observation window")
    p.add_argument("--lookahead-policy", default=None)
    p.add_argument("--lookahead-budget", type=int, default=None)


def _policy_config(args, base: PolicyConfig | None = None) -> PolicyConfig:
    cfg = base if base is not None else PolicyConfig()
    updates = {}
    if args.steps is not None:
        updates["lookahead_steps"] = args.steps
    if args.window is not None:
        updates["window_len"] = args.window
    if args.kernel is not None:
        updates["pool_kernel"] = args.kernel
    if args.mode is not None:
        updates["score_mode"] = args.mode
    if args.sink_count is not None:
        updates["sink_count"] = args.sink_count
    if args.pyramid_floor is not None:
        updates["pyramid_floor"] = args.pyramid_floor
    if args.no_keep_window:
        updates["keep_window"] = False
    if args.lookahead_policy is not None:
        updates["lookahead_policy"] = args.lookahead_policy
    if args.lookahead_budget is not None:
        updates["lookahead_budget"] = args.lookahead_budget
    return dataclasses.replace(cfg, **updates)


def _experiment_config(args) -> ExperimentConfig:
    if args.config:
        with open(args.config) as f:
            config = ExperimentConfig.from_json(json.load(f))
    else:
        config = ExperimentConfig()
    updates = {"policy": _policy_config(args, config.policy)}
    if args.trace:
        updates["trace_paths"] = tuple(args.trace)
        updates["mode"] = "trace-replay"
    if getattr(args, "toy", False):
        updates["mode"] = "toy-model"
    if args.policy:
        updates["policies"] = tuple(args.policy)
    if args.budget:
        if any(b < 1 for b in args.budget):
            raise SystemExit("--budget must be >= 1")
        updates["budgets"] = tuple(args.budget)
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "prompt_len", None):
        updates["prompt_len"] = args.prompt_len
    if getattr(args, "decode_steps", None):
        updates["decode_steps"] = args.decode_steps
    return dataclasses.replace(config, **updates)


def _emit(record, out_dir, fmt: str, stem: str = "results") -> None:
    if out_dir is None:
        json.dump(record.to_json(), sys.stdout, indent=2)
        sys.stdout.write("\n")
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt in ("json", "both"):
        record.write_json(out / f"{stem}.json")
    if fmt in ("csv", "both"):
        record.write_csv(out / f"{stem}.csv")


def _cmd_gen_trace(args) -> int:
    params = TraceParams(
        layers=args.layers,
        heads=args.heads,
        head_dim=args.head_dim,
        t_input=args.t_input,
        t_response=args.t_response,
        needle_count=args.needle_count,
        divergence=args.divergence,
        seed=args.seed if args.seed is not None else 0,
    )
    bundle = gen_synthetic_trace(params)
    write_trace(bundle, args.out)
    print(
        f"wrote {args.out}: L={bundle.layers} H={bundle.heads} d_h={bundle.head_dim} "
        f"T_input={bundle.t_input} T_response={bundle.t_response}"
    )
    return 0


def _cmd_run(args) -> int:
    config = _experiment_config(args)
    record = run_experiment(config)
    _emit(record, args.out, args.format)
    failed = [c for c in record.cells if c.get("status") != "ok"]
    for c in failed:
        print(f"cell failed: {c.get('policy')}@{c.get('budget')}: {c.get('reason')}",
              file=sys.stderr)
    return 0 if record.all_ok else 1


def _cmd_recall_sweep(args) -> int:
    bundle = read_trace(args.trace)
    curve = window_recall_sweep(bundle, args.window, args.budget, mode=args.mode)
    if args.out is None:
        json.dump({"schema_version": SCHEMA_VERSION, "sweep": curve.to_json()}, sys.stdout, indent=2)
        sys.stdout.write("\n")
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.format in ("json", "both"):
        with open(out / "sweep.json", "w") as f:
            json.dump({"schema_version": SCHEMA_VERSION, "sweep": curve.to_json()}, f, indent=2)
    if args.format in ("csv", "both"):
        import csv as _csv

        with open(out / "sweep.csv", "w", newline="") as f:
            w = _csv.writer(f)
            for row in curve.csv_rows():
                w.writerow(row)
    return 0


def _cmd_ablate(args) -> int:
    config = _experiment_config(args)
    steps = tuple(args.ablate_steps)
    qualities = tuple(args.quality) if args.quality else None
    record = run_ablation(config, steps=steps, qualities=qualities)
    _emit(record, args.out, args.format, stem="ablation")
    return 0 if record.all_ok else 1


def _cmd_latency(args) -> int:
    config = _experiment_config(args)
    run = run_toy_pipeline(config, args.latency_policy, args.budget[0] if args.budget else 32)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "policy": args.latency_policy,
        "latency": run.latency.to_json(),
        "transcript_len": len(run.transcript),
    }
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "latency.json", "w") as f:
            json.dump(payload, f, indent=2)
    else:
        json.dump(payload, sys.stdout, indent=2)
        sys.stdout.write("\n")
    return 0


def _cmd_export_queries(args) -> int:
    if not args.out:
        raise SystemExit("export-queries needs --out FILE")
    steps = args.steps if args.steps is not None else 8
    if args.trace:
        bundle = read_trace(args.trace[0])
        qc = bundle.lookahead_qcache(steps)
        import numpy as np

        stacked = np.stack([np.stack(row) for row in qc.queries])
        header = ContainerHeader(
            bundle.layers, bundle.heads, bundle.head_dim,
            bundle.t_input, bundle.t_response, bundle.vocab,
            provenance=f"query export of {args.trace[0]}",
        )
        sections = [
            ("qcache", stacked),
            ("response_queries", bundle.response_queries),
        ]
    else:
        config = _experiment_config(args)
        run = run_toy_pipeline(config, "laq_pp", args.budget[0] if args.budget else 32)
        import numpy as np

        qc = run.qcache
        stacked = np.stack([np.stack(row) for row in qc.queries])
        resp = np.stack([np.stack(row) for row in run.response_queries.queries])
        mc = config.model
        header = ContainerHeader(
            mc.layers, mc.heads, mc.head_dim, config.prompt_len,
            len(run.transcript), mc.vocab, provenance="toy-model query export",
        )
        sections = [("qcache", stacked), ("response_queries", resp)]
    write_container(args.out, header, sections)
    print(f"wrote {args.out}: sections {[s[0] for s in sections]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvlab",
        description="KV-cache eviction laboratory: policies, recall instrumentation, ablations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, toy_flags=True):
        p.add_argument("--config", default=None, help="JSON experiment config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--format", choices=["json", "csv", "both"], default="both")
        p.add_argument("--trace", action="append", default=None, help="trace file (repeatable)")
        p.add_argument("--policy", action="append", default=None,
                       help=f"policy id (repeatable); one of {DEFAULT_POLICIES + ('full',)}")
        p.add_argument("--budget", action="append", type=int, default=None,
                       help=f"cache budget (repeatable); default {list(DEFAULT_BUDGETS)}")
        if toy_flags:
            p.add_argument("--toy", action="store_true", help="run the toy model pipeline")
            p.add_argument("--prompt-len", type=int, default=None)
            p.add_argument("--decode-steps", type=int, default=None)
        _add_policy_flags(p)

    g = sub.add_parser("gen-trace", help="write a synthetic divergence trace")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--heads", type=int, default=2)
    g.add_argument("--head-dim", type=int, default=16)
    g.add_argument("--t-input", type=int, default=128)
    g.add_argument("--t-response", type=int, default=24)
    g.add_argument("--needle-count", type=int, default=8)
    g.add_argument("--divergence", type=float, default=4.0)
    g.set_defaults(func=_cmd_gen_trace)

    r = sub.add_parser("run", help="policy x budget sweep")
    common(r)
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("recall-sweep", help="sliding-window recall curve")
    s.add_argument("--trace", required=True)
    s.add_argument("--window", type=int, default=8)
    s.add_argument("--budget", type=int, default=8)
    s.add_argument("--mode", choices=["raw", "softmax"], default="raw")
    s.add_argument("--out", default=None)
    s.add_argument("--format", choices=["json", "csv", "both"], default="both")
    s.set_defaults(func=_cmd_recall_sweep)

    a = sub.add_parser("ablate", help="lookahead length/quality ablation")
    common(a)
    a.add_argument("--ablate-steps", type=int, nargs="+", default=[1, 2, 4, 8],
                   help="lookahead lengths to sweep")
    a.add_argument("--quality", action="append", default=None,
                   help="trace mode: response|input; toy mode: lookahead budget")
    a.set_defaults(func=_cmd_ablate)

    l = sub.add_parser("latency", help="stage latency of one toy pipeline run")
    common(l)
    l.add_argument("--latency-policy", default="laq_pp",
                   help="policy to time (default laq_pp)")
    l.set_defaults(func=_cmd_latency, toy=True)

    e = sub.add_parser("export-queries", help="dump lookahead + response queries")
    common(e)
    e.set_defaults(func=_cmd_export_queries)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
