"""Shared test helpers: independent oracles and random case generators."""

from __future__ import annotations

import random

from prefixbatch import (
    Phase,
    Request,
    SchedulerConfig,
    SchedulerState,
    SyntheticSpec,
    Workload,
    build_tree,
    extract_groups,
    generate_microbenchmark,
    maximize_reuse,
    shuffle_workload,
    step,
)
from prefixbatch.scheduler import DECODE, DISTINCT_CHUNK, PREFIX_CHUNK, POLICIES


def lcp_len(a, b) -> int:
    """Token-by-token longest-common-prefix scan; the reference for all LCP claims."""
    n = min(len(a), len(b))
    i = 0
    while i < n and a[i] == b[i]:
        i += 1
    return i


def random_workload(rng: random.Random, max_requests: int = 8, max_len: int = 12,
                    alphabet: int = 4, max_output: int = 5) -> Workload:
    """Small random workload over a tiny alphabet (rich accidental sharing)."""
    n = rng.randint(1, max_requests)
    requests = []
    for i in range(n):
        length = rng.randint(1, max_len)
        tokens = tuple(rng.randrange(alphabet) for _ in range(length))
        requests.append(Request(f"r{i}", tokens, rng.randint(1, max_output)))
    return Workload(requests)


def random_sim_case(rng: random.Random):
    """Random (workload, groups, config) triple with a schedulable memory bound."""
    block_size = rng.choice([1, 2, 4, 8])
    chunk_size = block_size * rng.randint(1, 8)
    policy = rng.choice(POLICIES)
    spec = SyntheticSpec(
        prefix_len=rng.randint(1, 12),
        distinct_len=rng.randint(1, 8),
        sharing_degree=rng.randint(1, 4),
        num_groups=rng.randint(1, 4),
        output_len=rng.randint(1, 6),
        seed=rng.randrange(2**32),
    )
    base = generate_microbenchmark(spec)
    extras = [
        Request(
            f"x{i}",
            tuple(rng.randrange(50) for _ in range(rng.randint(1, 15))),
            rng.randint(1, 6),
        )
        for i in range(rng.randint(0, 5))
    ]
    workload = shuffle_workload(Workload(base.requests + extras), rng.randrange(2**32))
    groups = extract_groups(maximize_reuse(build_tree(workload)))
    output_lens = workload.output_lens()

    def blocks(tokens):
        return -(-tokens // block_size)

    min_needed = max(
        blocks(len(g.prefix)) + blocks(len(m.suffix) + output_lens[m.id])
        for g in groups for m in g.members
    )
    mem_threshold = rng.randint(min_needed, 3 * min_needed + 2)
    config = SchedulerConfig(
        chunk_size=chunk_size,
        block_size=block_size,
        total_blocks=mem_threshold + rng.randint(0, 8),
        mem_threshold=mem_threshold,
        policy=policy,
        request_cap=rng.randint(1, 6),
        lru_blocks=rng.randint(1, 20) if policy == "fcfs_cap_lru" else None,
        reorder=rng.random() < 0.8,
    )
    return workload, groups, config


def run_checked_simulation(workload: Workload, groups, config: SchedulerConfig):
    """Drive a simulation step by step, asserting every scheduler invariant."""
    if config.policy == "batchllm":
        state = SchedulerState.from_groups(groups, workload.output_lens(), config)
    else:
        state = SchedulerState.from_workload(workload, config)
    bound = sum(r.prompt_len + r.output_len for r in workload.requests) + 1
    prefix_progress: dict[int, int] = {}
    prefix_complete_iter: dict[int, int] = {}
    first_distinct_iter: dict[int, int] = {}
    rows = []
    while not state.all_done():
        assert len(rows) <= bound, "simulation exceeded its iteration bound"
        row = step(state, config)
        rows.append(row)
        batch = state.last_batch
        assert batch.total_tokens <= config.chunk_size
        assert row.total_tokens == batch.total_tokens
        assert row.blocks_used <= config.total_blocks
        assert state.committed_blocks <= config.mem_threshold
        assert state.allocator.used_blocks + state.allocator.free_blocks == config.total_blocks
        decode_owners = [e.owner for e in batch.entries if e.kind == DECODE]
        assert len(decode_owners) == len(set(decode_owners))
        assert all(e.tokens == 1 for e in batch.entries if e.kind == DECODE)
        if config.policy != "batchllm":
            assert len({e.owner for e in batch.entries}) <= config.request_cap
        for e in batch.entries:
            if e.kind == PREFIX_CHUNK:
                gi = int(e.owner.split("#", 1)[1])
                prefix_progress[gi] = prefix_progress.get(gi, 0) + e.tokens
                if prefix_progress[gi] == state.groups[gi].prefix_len:
                    prefix_complete_iter[gi] = batch.iteration
            elif e.kind == DISTINCT_CHUNK and config.policy == "batchllm":
                gi = state.requests[e.owner].group
                first_distinct_iter.setdefault(gi, batch.iteration)

    assert state.allocator.used_blocks == 0
    assert state.committed_blocks == 0
    assert all(r.phase is Phase.DONE for r in state.requests.values())
    assert sum(r.decode_tokens for r in rows) == sum(r.output_len for r in workload.requests)
    assert sum(r.prefill_tokens for r in rows) == state.n_processed_prefill
    if config.policy == "batchllm":
        assert state.reused_prefill == 0
        assert state.n_processed_prefill <= state.n_logical_prefill
    else:
        assert state.n_processed_prefill + state.reused_prefill == state.n_logical_prefill
    for gi, first_iter in first_distinct_iter.items():
        if state.groups[gi].prefix_len > 0:
            assert gi in prefix_complete_iter
            assert first_iter > prefix_complete_iter[gi]
    return state, rows
