"""Command-line pipeline: gen -> plan -> simulate -> report, plus attn-selftest.

Exit codes: 0 success, 1 validation or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from . import attention, metrics, prefix_tree, scheduler, workload
from .errors import PrefixBatchError


def _default_seed() -> int:
    return int(os.environ.get("PREFIXBATCH_SEED", "0"))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prefixbatch",
        description="Plan and simulate prefix-shared large-batch LLM inference.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic workload file")
    gen.add_argument("--prefix-len", type=int, required=True)
    gen.add_argument("--distinct-len", type=int, required=True)
    gen.add_argument("--sharing-degree", type=int, required=True)
    gen.add_argument("--num-groups", type=int, required=True)
    gen.add_argument("--output-len", type=int, required=True)
    gen.add_argument("--seed", type=int, default=_default_seed())
    gen.add_argument("--shuffle", action="store_true",
                     help="shuffle request order (same seed)")
    gen.add_argument("-o", "--output", required=True, help="workload JSONL path")

    plan = sub.add_parser("plan", help="group a workload by shared prefixes")
    plan.add_argument("-i", "--input", required=True, help="workload JSONL path")
    plan.add_argument("-o", "--output", required=True, help="groups JSONL path")

    sim = sub.add_parser("simulate", help="run the batching simulator")
    sim.add_argument("-i", "--input", required=True,
                     help="groups file (batchllm) or workload file (fcfs policies)")
    sim.add_argument("-o", "--output", required=True,
                     help="trace CSV path; a .summary.json sidecar is written too")
    sim.add_argument("--policy", action="append", choices=scheduler.POLICIES,
                     required=True, help="may be given multiple times")
    sim.add_argument("--chunk-size", type=int, default=2048)
    sim.add_argument("--block-size", type=int, default=16)
    sim.add_argument("--total-blocks", type=int, default=65536)
    sim.add_argument("--mem-threshold", type=int, default=None)
    sim.add_argument("--request-cap", type=int, default=256)
    sim.add_argument("--lru-blocks", type=int, default=None)
    sim.add_argument("--no-reorder", action="store_true",
                     help="keep group order instead of decode-share ordering")
    sim.add_argument("--valley-alpha", type=float, default=0.5)

    rep = sub.add_parser("report", help="compare traces over one workload")
    rep.add_argument("-i", "--input", nargs="+", required=True,
                     help="trace CSV paths (each with its .summary.json sidecar)")
    rep.add_argument("-o", "--output", required=True,
                     help="output prefix; writes <prefix>.summary.json and <prefix>.compare.csv")
    rep.add_argument("--valley-alpha", type=float, default=0.5)

    selftest = sub.add_parser("attn-selftest",
                              help="check the attention reference against its oracle")
    selftest.add_argument("--trials", type=int, default=50)
    selftest.add_argument("--seed", type=int, default=_default_seed())
    return parser


def _cmd_gen(args) -> int:
    spec = workload.SyntheticSpec(
        prefix_len=args.prefix_len,
        distinct_len=args.distinct_len,
        sharing_degree=args.sharing_degree,
        num_groups=args.num_groups,
        output_len=args.output_len,
        seed=args.seed,
    )
    w = workload.generate_microbenchmark(spec)
    if args.shuffle:
        w = workload.shuffle_workload(w, args.seed)
    workload.write_workload(w, args.output)
    print(f"wrote {len(w)} requests to {args.output}")
    return 0


def _cmd_plan(args) -> int:
    w = workload.read_workload(args.input)
    started = time.perf_counter()
    tree = prefix_tree.build_tree(w)
    tree = prefix_tree.maximize_reuse(tree)
    groups = prefix_tree.extract_groups(tree)
    elapsed = time.perf_counter() - started
    prefix_tree.write_groups(groups, w.output_lens(), args.output)
    ratio = prefix_tree.saving_ratio_static(groups)
    saved = prefix_tree.saved_tokens(groups)
    logical = w.total_prompt_tokens()
    shared = sum(1 for g in groups if len(g.members) > 1)
    print(f"wrote {len(groups)} groups ({shared} shared) to {args.output}")
    print(f"static saving ratio: {100 * ratio:.2f}% "
          f"(saved {saved} of {logical} logical prefill tokens)")
    print(f"preprocessing time: {elapsed:.2f} s")
    return 0


def _trace_paths(output: str, policy: str, multi: bool) -> tuple[str, str]:
    root, ext = os.path.splitext(output)
    if multi:
        root = f"{root}.{policy}"
    csv_path = root + (ext or ".csv")
    return csv_path, root + ".summary.json"


def _cmd_simulate(args) -> int:
    policies = args.policy
    vc = metrics.ValleyConfig(alpha=args.valley_alpha)
    for policy in policies:
        config = scheduler.SchedulerConfig(
            chunk_size=args.chunk_size,
            block_size=args.block_size,
            total_blocks=args.total_blocks,
            mem_threshold=args.mem_threshold,
            policy=policy,
            request_cap=args.request_cap,
            lru_blocks=args.lru_blocks,
            reorder=not args.no_reorder,
        )
        if policy == scheduler.POLICY_BATCHLLM:
            groups, output_lens = prefix_tree.read_groups(args.input)
            trace = scheduler.simulate(groups, config, output_lens)
        else:
            trace = scheduler.simulate(workload.read_workload(args.input), config)
        csv_path, summary_path = _trace_paths(args.output, policy, len(policies) > 1)
        metrics.write_trace_csv(trace, csv_path)
        metrics.write_summary_json(trace, summary_path, vc)
        summary = metrics.trace_summary(trace, vc)
        print(f"[{policy}] iterations={summary['iterations']} "
              f"saving_ratio={100 * summary['saving_ratio']:.2f}% "
              f"mean_tokens/iter={summary['mean_tokens_per_iteration']:.1f} "
              f"valley_fraction={summary['valley_fraction']:.3f} -> {csv_path}")
    return 0


def _cmd_report(args) -> int:
    traces = []
    for csv_path in args.input:
        root, _ = os.path.splitext(csv_path)
        traces.append(metrics.read_trace(csv_path, root + ".summary.json"))
    report = metrics.build_report(traces, metrics.ValleyConfig(alpha=args.valley_alpha))
    summary_path = args.output + ".summary.json"
    comparison_path = args.output + ".compare.csv" if report.comparison_rows else None
    metrics.write_report(report, summary_path, comparison_path)
    print(f"wrote {summary_path}")
    if comparison_path:
        print(f"wrote {comparison_path}")
    return 0


def _cmd_attn_selftest(args) -> int:
    result = attention.run_selftest(trials=args.trials, seed=args.seed)
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0 if result["passed"] else 1


_COMMANDS = {
    "gen": _cmd_gen,
    "plan": _cmd_plan,
    "simulate": _cmd_simulate,
    "report": _cmd_report,
    "attn-selftest": _cmd_attn_selftest,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except PrefixBatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
