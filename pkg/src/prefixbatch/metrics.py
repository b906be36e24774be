"""Saving ratios, valley statistics, and trace reports.

The valley cutoff (an iteration counts as a valley when its token batch is
below ``alpha * chunk_size``) is an artifact convention: underutilized
iterations are a visual phenomenon in token-per-iteration timelines, so any
numeric threshold is a choice. Reports flag the alpha used.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

from .errors import ParseError, ValidationError
from .scheduler import IterationTrace, SimulationTrace


@dataclass(frozen=True)
class ValleyConfig:
    """Fraction of the chunk size below which an iteration is a valley."""

    alpha: float = 0.5

    def __post_init__(self):
        if not (0 < self.alpha <= 1):
            raise ValidationError("alpha must be in (0, 1]")


def saving_ratio(trace: SimulationTrace) -> float:
    """Fraction of logical prefill tokens avoided: 1 - processed/logical."""
    if trace.n_logical_prefill_tokens == 0:
        raise ValidationError("saving ratio undefined: zero logical prefill tokens")
    return 1.0 - trace.n_processed_prefill_tokens / trace.n_logical_prefill_tokens


def _drain_tail_start(rows: list[IterationTrace]) -> int:
    """Index of the first iteration of the final decode-only drain."""
    for i in range(len(rows) - 1, -1, -1):
        if rows[i].prefill_tokens > 0:
            return i + 1
    return 0


def valley_fraction(trace: SimulationTrace, vc: ValleyConfig = ValleyConfig(),
                    s_chunk: int | None = None, exclude_tail: bool = True) -> float:
    """Fraction of iterations whose batch stayed below ``alpha * s_chunk``.

    The final drain (trailing iterations with no prefill work left) is
    necessarily small-batched, so it is excluded by default; pass
    ``exclude_tail=False`` for the unfiltered number.
    """
    if not trace.rows:
        raise ValidationError("empty trace")
    if s_chunk is None:
        s_chunk = trace.s_chunk
    rows = trace.rows[:_drain_tail_start(trace.rows)] if exclude_tail else trace.rows
    if not rows:
        return 0.0
    cutoff = vc.alpha * s_chunk
    return sum(1 for r in rows if r.total_tokens < cutoff) / len(rows)


def mean_tokens_per_iteration(trace: SimulationTrace) -> float:
    if not trace.rows:
        raise ValidationError("empty trace")
    return sum(r.total_tokens for r in trace.rows) / len(trace.rows)


def trace_summary(trace: SimulationTrace, vc: ValleyConfig = ValleyConfig()) -> dict:
    """Summary record written next to every trace CSV."""
    return {
        "iterations": trace.iterations,
        "n_processed_prefill_tokens": trace.n_processed_prefill_tokens,
        "n_logical_prefill_tokens": trace.n_logical_prefill_tokens,
        "saving_ratio": saving_ratio(trace),
        "mean_tokens_per_iteration": mean_tokens_per_iteration(trace),
        "valley_fraction": valley_fraction(trace, vc),
        "valley_fraction_with_tail": valley_fraction(trace, vc, exclude_tail=False),
        "valley_alpha": vc.alpha,
        "policy": trace.policy,
        "s_chunk": trace.s_chunk,
        "total_decode_tokens": trace.total_decode_tokens,
        "reused_prefill_tokens": trace.reused_prefill_tokens,
        "workload_fingerprint": trace.workload_fingerprint,
    }


_TRACE_HEADER = ["iteration", "total_tokens", "decode_tokens", "prefill_tokens",
                 "blocks_used", "active_requests"]


def write_trace_csv(trace: SimulationTrace, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_TRACE_HEADER)
        for r in trace.rows:
            writer.writerow([r.iteration, r.total_tokens, r.decode_tokens,
                             r.prefill_tokens, r.blocks_used, r.active_requests])


def write_summary_json(trace: SimulationTrace, path: str,
                       vc: ValleyConfig = ValleyConfig()) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(trace_summary(trace, vc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_trace(csv_path: str, summary_path: str) -> SimulationTrace:
    """Rebuild a trace from its CSV rows and sidecar summary."""
    rows = []
    with open(csv_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _TRACE_HEADER:
            raise ParseError(csv_path, 1, f"expected header {','.join(_TRACE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append(IterationTrace(*[int(x) for x in row]))
            except (TypeError, ValueError) as exc:
                raise ParseError(csv_path, lineno, "malformed trace row") from exc
    try:
        with open(summary_path, "r", encoding="utf-8") as fh:
            summary = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(summary_path, exc.lineno, "invalid summary JSON") from exc
    try:
        return SimulationTrace(
            policy=summary["policy"],
            s_chunk=summary["s_chunk"],
            rows=rows,
            n_processed_prefill_tokens=summary["n_processed_prefill_tokens"],
            n_logical_prefill_tokens=summary["n_logical_prefill_tokens"],
            total_decode_tokens=summary["total_decode_tokens"],
            reused_prefill_tokens=summary["reused_prefill_tokens"],
            workload_fingerprint=summary["workload_fingerprint"],
        )
    except KeyError as exc:
        raise ValidationError(f"summary {summary_path} is missing field {exc}") from exc


@dataclass
class Report:
    """Side-by-side view of traces over one workload."""

    labels: list[str]
    summaries: list[dict]
    comparison_rows: list[list[int | None]] | None  # None when only one trace


def build_report(traces: list[SimulationTrace], vc: ValleyConfig = ValleyConfig()) -> Report:
    """Summaries plus an aligned per-iteration token-count table.

    All traces must come from the same workload; per-iteration columns are
    padded to the longest trace so the table can be plotted directly.
    """
    if not traces:
        raise ValidationError("report needs at least one trace")
    fingerprints = {t.workload_fingerprint for t in traces}
    if len(fingerprints) != 1:
        raise ValidationError("traces cover different workloads; refusing to compare")
    labels = []
    counts: dict[str, int] = {}
    for t in traces:
        n = counts.get(t.policy, 0) + 1
        counts[t.policy] = n
        labels.append(t.policy if n == 1 else f"{t.policy}#{n}")
    summaries = [dict(trace_summary(t, vc), label=label)
                 for t, label in zip(traces, labels)]
    comparison = None
    if len(traces) > 1:
        depth = max(t.iterations for t in traces)
        comparison = []
        for i in range(depth):
            row: list[int | None] = [i + 1]
            for t in traces:
                row.append(t.rows[i].total_tokens if i < t.iterations else None)
            comparison.append(row)
    return Report(labels=labels, summaries=summaries, comparison_rows=comparison)


def write_report(report: Report, summary_path: str, comparison_path: str | None) -> None:
    with open(summary_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report.summaries, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if report.comparison_rows is not None and comparison_path is not None:
        with open(comparison_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration"] + [f"total_tokens[{lb}]" for lb in report.labels])
            for row in report.comparison_rows:
                writer.writerow(["" if x is None else x for x in row])
