"""Request/workload model, synthetic microbenchmark generation, and JSONL I/O.

A workload is an ordered list of requests, each a non-empty sequence of
32-bit token ids plus the known decode length. Token ids are opaque
vocabulary indices; plain ``int`` is used throughout.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError

_MAX_TOKEN = 2**32


@dataclass(frozen=True)
class Request:
    """One unit of work: a prompt and its ground-truth decode length."""

    id: str
    tokens: tuple[int, ...]
    output_len: int

    def __post_init__(self):
        if not self.tokens:
            raise ValidationError(f"request {self.id!r} has an empty prompt")
        if self.output_len < 1:
            raise ValidationError(
                f"request {self.id!r} has non-positive output_len {self.output_len}"
            )

    @property
    def prompt_len(self) -> int:
        return len(self.tokens)


@dataclass
class Workload:
    """Ordered collection of requests with distinct ids."""

    requests: list[Request] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for r in self.requests:
            if r.id in seen:
                raise ValidationError(f"duplicate request id {r.id!r}")
            seen.add(r.id)

    def __len__(self) -> int:
        return len(self.requests)

    def output_lens(self) -> dict[str, int]:
        return {r.id: r.output_len for r in self.requests}

    def total_prompt_tokens(self) -> int:
        return sum(r.prompt_len for r in self.requests)


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape of a synthetic microbenchmark: equal-sized prefix-sharing groups."""

    prefix_len: int
    distinct_len: int
    sharing_degree: int
    num_groups: int
    output_len: int
    seed: int

    def __post_init__(self):
        for name in ("prefix_len", "distinct_len", "sharing_degree", "num_groups", "output_len"):
            if getattr(self, name) < 1:
                raise ValidationError(f"spec field {name} must be positive")


# Counter-based splitmix64 stream: platform- and version-independent, unlike
# library RNGs whose bit streams may change between releases.
_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_MUL2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    z = x + _SM_GAMMA
    z = (z ^ (z >> np.uint64(30))) * _SM_MUL1
    z = (z ^ (z >> np.uint64(27))) * _SM_MUL2
    return z ^ (z >> np.uint64(31))


def _token_stream(seed: int, stream: int, count: int) -> list[int]:
    """`count` deterministic tokens in [0, 2**31) for the given (seed, stream)."""
    if count == 0:
        return []
    key = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _splitmix64(np.uint64(stream)))
    values = _splitmix64(key + np.arange(count, dtype=np.uint64))
    return (values >> np.uint64(33)).tolist()


def generate_microbenchmark(spec: SyntheticSpec) -> Workload:
    """Generate ``num_groups * sharing_degree`` requests with exact sharing structure.

    Within a group, all prompts share exactly ``prefix_len`` leading tokens;
    suffixes differ at their first token. Prompts of different groups differ
    at their very first token (a per-group sentinel id), so cross-group
    common prefixes have length zero and analytic saving ratios are exact.
    """
    with np.errstate(over="ignore"):
        requests = []
        for g in range(spec.num_groups):
            prefix = [g] + _token_stream(spec.seed, 2 * g, spec.prefix_len - 1)
            suffix_body = _token_stream(
                spec.seed, 2 * g + 1, (spec.distinct_len - 1) * spec.sharing_degree
            )
            for j in range(spec.sharing_degree):
                suffix = [j] + suffix_body[(spec.distinct_len - 1) * j:(spec.distinct_len - 1) * (j + 1)]
                requests.append(
                    Request(
                        id=f"g{g}_r{j}",
                        tokens=tuple(prefix + suffix),
                        output_len=spec.output_len,
                    )
                )
    return Workload(requests)


def shuffle_workload(workload: Workload, seed: int) -> Workload:
    """Deterministically permute request order; the requests themselves are shared."""
    requests = list(workload.requests)
    random.Random(seed).shuffle(requests)
    return Workload(requests)


def write_workload(workload: Workload, path: str) -> None:
    """Write line-delimited JSON: one {id, tokens, output_len} record per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in workload.requests:
            fh.write(json.dumps(
                {"id": r.id, "tokens": list(r.tokens), "output_len": r.output_len},
                separators=(",", ":"),
            ))
            fh.write("\n")


def _parse_record(path: str, lineno: int, line: str) -> Request:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(path, lineno, f"invalid JSON: {exc.msg}") from exc
    if not isinstance(record, dict):
        raise ParseError(path, lineno, "record is not a JSON object")
    for key in ("id", "tokens", "output_len"):
        if key not in record:
            raise ParseError(path, lineno, f"missing field {key!r}")
    rid = record["id"]
    tokens = record["tokens"]
    output_len = record["output_len"]
    if not isinstance(rid, str) or not rid:
        raise ParseError(path, lineno, "field 'id' must be a non-empty string")
    if not isinstance(tokens, list) or not tokens:
        raise ParseError(path, lineno, "field 'tokens' must be a non-empty array")
    for t in tokens:
        if isinstance(t, bool) or not isinstance(t, int) or not (0 <= t < _MAX_TOKEN):
            raise ParseError(path, lineno, f"token {t!r} is not a 32-bit unsigned integer")
    if isinstance(output_len, bool) or not isinstance(output_len, int) or output_len < 1:
        raise ParseError(path, lineno, "field 'output_len' must be a positive integer")
    return Request(id=rid, tokens=tuple(tokens), output_len=output_len)


def read_workload(path: str) -> Workload:
    """Read a workload file written by :func:`write_workload`.

    Raises :class:`ParseError` (naming the line) on malformed records and
    :class:`ValidationError` on duplicate request ids.
    """
    requests = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                raise ParseError(path, lineno, "blank line")
            requests.append(_parse_record(path, lineno, line))
    return Workload(requests)
