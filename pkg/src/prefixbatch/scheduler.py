"""Discrete-iteration simulator of continuous batching with prefix sharing.

One iteration forms a token batch (decode tokens first, then distinct-prompt
chunks, then shared-prefix chunks), applies it, and accounts KV blocks. No
wall-clock or kernel model: token counts, iteration counts, and block usage
are the observables.

Memory is handled by reservation: admitting any unit of prefill work charges
its worst-case block footprint (known decode lengths make this exact), so an
admitted request always runs to completion and the allocator can never
overflow. Under the grouped policy a new group's prefix is admitted only
once every member of all earlier groups holds its reservation; combined with
in-order admission this makes the schedule deadlock-free whenever each
single request fits below the memory threshold.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
from collections import OrderedDict, deque
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import UnschedulableRequestError, ValidationError
from .prefix_tree import PrefixSharingGroup
from .workload import Workload

POLICY_BATCHLLM = "batchllm"
POLICY_FCFS_CAP = "fcfs_cap"
POLICY_FCFS_CAP_LRU = "fcfs_cap_lru"
POLICIES = (POLICY_BATCHLLM, POLICY_FCFS_CAP, POLICY_FCFS_CAP_LRU)

PREFIX_CHUNK = "prefix_chunk"
DISTINCT_CHUNK = "distinct_chunk"
DECODE = "decode"


@dataclass
class SchedulerConfig:
    """Batching limits and memory model shared by all policies."""

    chunk_size: int = 2048
    block_size: int = 16
    total_blocks: int = 65536
    mem_threshold: int | None = None  # admission cap in blocks; None = total_blocks
    policy: str = POLICY_BATCHLLM
    request_cap: int = 256            # fcfs policies: max distinct requests per batch
    lru_blocks: int | None = None     # fcfs_cap_lru: cache capacity in blocks
    reorder: bool = True              # batchllm: order groups by decode share

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValidationError(f"unknown policy {self.policy!r}")
        if self.chunk_size < 1 or self.block_size < 1 or self.total_blocks < 1:
            raise ValidationError("chunk_size, block_size and total_blocks must be positive")
        if self.mem_threshold is None:
            self.mem_threshold = self.total_blocks
        if not (1 <= self.mem_threshold <= self.total_blocks):
            raise ValidationError("mem_threshold must be in [1, total_blocks]")
        if self.request_cap < 1:
            raise ValidationError("request_cap must be positive")
        if self.policy == POLICY_BATCHLLM and self.chunk_size < self.block_size:
            # block-aligned prefix chunks could never fit into the batch
            raise ValidationError("batchllm needs chunk_size >= block_size")
        if self.policy == POLICY_FCFS_CAP_LRU and (self.lru_blocks is None or self.lru_blocks < 1):
            raise ValidationError("fcfs_cap_lru needs a positive lru_blocks")

    def blocks_for(self, tokens: int) -> int:
        return -(-tokens // self.block_size)


class Phase(enum.Enum):
    WAITING = "waiting"
    PREFILL_PREFIX_PENDING = "prefill_prefix_pending"
    PREFILLING = "prefilling"
    DECODING = "decoding"
    DONE = "done"


_PHASE_ORDER = {p: i for i, p in enumerate(Phase)}


@dataclass
class RequestState:
    """Per-request scheduling state.

    ``suffix_*`` counters cover the private part of the prompt (everything
    after the shared prefix; the whole prompt under fcfs policies).
    ``*_admitted`` advances when a chunk enters a batch, ``*_done`` when the
    batch is applied; they agree between iterations.
    """

    id: str
    group: int | None
    prompt_len: int
    suffix_len: int
    output_len: int
    phase: Phase = Phase.WAITING
    prefix_credit: int = 0     # shared-prefix tokens already usable by this request
    suffix_admitted: int = 0
    suffix_done: int = 0
    reused_tokens: int = 0     # prompt tokens skipped via cache hits
    decode_done: int = 0
    committed: bool = False

    @property
    def prefill_done(self) -> int:
        return self.prefix_credit + self.reused_tokens + self.suffix_done

    def set_phase(self, phase: Phase) -> None:
        if _PHASE_ORDER[phase] < _PHASE_ORDER[self.phase]:
            raise AssertionError(f"phase of {self.id} moved backwards: "
                                 f"{self.phase} -> {phase}")
        self.phase = phase


@dataclass
class GroupState:
    index: int
    prefix: tuple[int, ...]
    member_ids: list[str]
    owner: str
    prefix_admitted: int = 0
    prefix_done: int = 0
    committed: bool = False
    next_member: int = 0       # members before this index hold reservations
    members_done: int = 0

    @property
    def prefix_len(self) -> int:
        return len(self.prefix)

    @property
    def fully_committed(self) -> bool:
        return self.next_member == len(self.member_ids)


class KVAllocator:
    """Blocked KV memory pool with per-owner allocation and prefix refcounts."""

    def __init__(self, total_blocks: int):
        self.total_blocks = total_blocks
        self._free: list[int] = list(range(total_blocks - 1, -1, -1))
        self.allocations: dict[str, list[int]] = {}
        self.ref_counts: dict[str, int] = {}

    @property
    def used_blocks(self) -> int:
        return self.total_blocks - len(self._free)

    @property
    def free_blocks(self) -> int:
        return len(self._free)

    def owned(self, owner: str) -> int:
        return len(self.allocations.get(owner, ()))

    def blocks_of(self, owner: str) -> list[int]:
        return list(self.allocations.get(owner, ()))

    def grow(self, owner: str, total_needed: int) -> None:
        """Extend the owner's allocation to ``total_needed`` blocks."""
        have = self.allocations.setdefault(owner, [])
        delta = total_needed - len(have)
        if delta <= 0:
            return
        if delta > len(self._free):
            raise RuntimeError("KV allocator overflow: admission reservation violated")
        have.extend(self._free.pop() for _ in range(delta))

    def free_owner(self, owner: str) -> int:
        blocks = self.allocations.pop(owner, [])
        self._free.extend(blocks)
        self.ref_counts.pop(owner, None)
        return len(blocks)

    def set_refs(self, owner: str, count: int) -> None:
        self.ref_counts[owner] = count

    def release(self, owner: str) -> int:
        """Drop one reference; frees the owner's blocks when it reaches zero."""
        self.ref_counts[owner] -= 1
        if self.ref_counts[owner] == 0:
            return self.free_owner(owner)
        return 0


class LRUPrefixCache:
    """Content-hash block cache with strict LRU eviction of unpinned entries.

    Entries are keyed by the chain hash of a full block (block tokens plus
    the predecessor hash, i.e. the whole prompt up to the block boundary).
    A hit pins the entry for the hitting request until it finishes; pinned
    entries are never evicted, so occupancy may transiently exceed capacity
    while everything is referenced.
    """

    def __init__(self, capacity_blocks: int):
        self.capacity = capacity_blocks
        self._entries: OrderedDict[int, set[str]] = OrderedDict()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._entries)

    def match(self, chain_hash: int, owner: str) -> bool:
        pins = self._entries.get(chain_hash)
        if pins is None:
            self.misses += 1
            return False
        self._entries.move_to_end(chain_hash)
        pins.add(owner)
        self.hits += 1
        return True

    def insert(self, chain_hash: int) -> None:
        if chain_hash in self._entries:
            self._entries.move_to_end(chain_hash)
            return
        self._entries[chain_hash] = set()
        while len(self._entries) > self.capacity:
            victim = next((h for h, pins in self._entries.items() if not pins), None)
            if victim is None:
                break
            del self._entries[victim]

    def unpin(self, chain_hash: int, owner: str) -> None:
        pins = self._entries.get(chain_hash)
        if pins is not None:
            pins.discard(owner)


def block_hash_chain(tokens: Sequence[int], block_size: int) -> list[int]:
    """Chain hashes of all full blocks of a prompt (tail partial excluded)."""
    hashes = []
    prev = 0
    for i in range(len(tokens) // block_size):
        prev = hash((prev, tuple(tokens[i * block_size:(i + 1) * block_size])))
        hashes.append(prev)
    return hashes


@dataclass(frozen=True)
class BatchEntry:
    owner: str      # request id, or the group prefix owner for prefix chunks
    kind: str       # prefix_chunk | distinct_chunk | decode
    tokens: int


@dataclass(frozen=True)
class TokenBatch:
    iteration: int
    entries: tuple[BatchEntry, ...]

    @property
    def total_tokens(self) -> int:
        return sum(e.tokens for e in self.entries)

    @property
    def decode_tokens(self) -> int:
        return sum(e.tokens for e in self.entries if e.kind == DECODE)

    @property
    def prefill_tokens(self) -> int:
        return sum(e.tokens for e in self.entries if e.kind != DECODE)


@dataclass(frozen=True)
class IterationTrace:
    iteration: int
    total_tokens: int
    decode_tokens: int
    prefill_tokens: int
    blocks_used: int
    active_requests: int


@dataclass
class SimulationTrace:
    policy: str
    s_chunk: int
    rows: list[IterationTrace]
    n_processed_prefill_tokens: int
    n_logical_prefill_tokens: int
    total_decode_tokens: int
    reused_prefill_tokens: int
    workload_fingerprint: str

    @property
    def iterations(self) -> int:
        return len(self.rows)


def _fingerprint(items: Iterable[tuple[str, int, int]]) -> str:
    digest = hashlib.sha256()
    for rid, prompt_len, output_len in sorted(items):
        digest.update(f"{rid}\x00{prompt_len}\x00{output_len}\n".encode())
    return digest.hexdigest()[:16]


def order_groups(groups: Sequence[PrefixSharingGroup]) -> list[PrefixSharingGroup]:
    """Schedule groups with the largest decode share of work first.

    With decode lengths normalized to a constant, a group's decode-to-prefill
    ratio is the reciprocal of its total prefill tokens, so sorting ascending
    by total prefill tokens (stable, ties keep input order) puts the
    decode-heaviest groups first.
    """
    return sorted(groups, key=lambda g: g.total_prefill_tokens)


class SchedulerState:
    """Mutable simulation state: requests, groups, queues, memory accounting."""

    def __init__(self, config: SchedulerConfig):
        self.config = config
        self.allocator = KVAllocator(config.total_blocks)
        self.requests: dict[str, RequestState] = {}
        self.groups: list[GroupState] = []
        self.iteration = 0
        self.committed_blocks = 0
        self.active_requests = 0
        self.done_count = 0
        self.n_logical_prefill = 0
        self.n_processed_prefill = 0
        self.total_decode = 0
        self.reused_prefill = 0
        self.workload_fingerprint = ""
        # queues
        self.decode_queue: deque[str] = deque()
        self.open_members: deque[str] = deque()       # committed, suffix pending
        self.distinct_ready: list[int] = []           # heap of group indices
        self.committed_watermark = 0                  # groups[:w] fully committed
        self.prefix_cursor = 0
        self.pending_prefill: deque[str] = deque()    # fcfs arrival order
        self.pending_activations: list[str] = []      # prefill completed without entry
        self.last_batch: TokenBatch | None = None
        self.cache: LRUPrefixCache | None = None
        self.block_hashes: dict[str, list[int]] = {}
        self.pinned_hashes: dict[str, list[int]] = {}

    # -- construction -----------------------------------------------------

    @classmethod
    def from_workload(cls, workload: Workload, config: SchedulerConfig) -> "SchedulerState":
        if config.policy == POLICY_BATCHLLM:
            raise ValidationError("policy batchllm takes prefix-sharing groups, not a workload")
        state = cls(config)
        for r in workload.requests:
            state.requests[r.id] = RequestState(
                id=r.id, group=None, prompt_len=r.prompt_len,
                suffix_len=r.prompt_len, output_len=r.output_len,
            )
            state.pending_prefill.append(r.id)
            state.n_logical_prefill += r.prompt_len
            if config.policy == POLICY_FCFS_CAP_LRU:
                state.block_hashes[r.id] = block_hash_chain(r.tokens, config.block_size)
                state.pinned_hashes[r.id] = []
        if config.policy == POLICY_FCFS_CAP_LRU:
            state.cache = LRUPrefixCache(config.lru_blocks)
        state.workload_fingerprint = _fingerprint(
            (r.id, r.prompt_len, r.output_len) for r in workload.requests
        )
        return state

    @classmethod
    def from_groups(cls, groups: Sequence[PrefixSharingGroup],
                    output_lens: Mapping[str, int],
                    config: SchedulerConfig) -> "SchedulerState":
        if config.policy != POLICY_BATCHLLM:
            raise ValidationError(f"policy {config.policy} takes a raw workload, not groups")
        state = cls(config)
        ordered = order_groups(groups) if config.reorder else list(groups)
        for gi, group in enumerate(ordered):
            member_ids = []
            for m in group.members:
                if m.id in state.requests:
                    raise ValidationError(f"request {m.id!r} appears in more than one group")
                if m.id not in output_lens:
                    raise ValidationError(f"no output_len for request {m.id!r}")
                prompt_len = len(group.prefix) + len(m.suffix)
                state.requests[m.id] = RequestState(
                    id=m.id, group=gi, prompt_len=prompt_len,
                    suffix_len=len(m.suffix), output_len=output_lens[m.id],
                )
                member_ids.append(m.id)
                state.n_logical_prefill += prompt_len
            state.groups.append(GroupState(
                index=gi, prefix=group.prefix, member_ids=member_ids,
                owner=f"prefix#{gi}",
            ))
            if not group.prefix:
                heapq.heappush(state.distinct_ready, gi)
        state.workload_fingerprint = _fingerprint(
            (r.id, r.prompt_len, r.output_len) for r in state.requests.values()
        )
        return state

    # -- helpers ----------------------------------------------------------

    def request_peak_blocks(self, r: RequestState) -> int:
        return self.config.blocks_for(r.suffix_len + r.output_len)

    def group_prefix_blocks(self, g: GroupState) -> int:
        return self.config.blocks_for(g.prefix_len)

    def all_done(self) -> bool:
        return self.done_count == len(self.requests)

    def _advance_watermark(self) -> None:
        while (self.committed_watermark < len(self.groups)
               and self.groups[self.committed_watermark].fully_committed):
            self.committed_watermark += 1

    def _commit(self, blocks: int) -> bool:
        if self.committed_blocks + blocks > self.config.mem_threshold:
            return False
        self.committed_blocks += blocks
        return True


def form_token_batch(state: SchedulerState, config: SchedulerConfig) -> TokenBatch:
    """Decide the next token batch and record its admission reservations.

    Fetch order: decode queue, then distinct-prompt queue, then the shared
    prefix queue. Queue bookkeeping (rotation, removal of fully admitted
    items, reservations, cache lookups) happens here; token counters, phase
    transitions and block allocation happen in :func:`step`.
    """
    if state.all_done():
        raise ValidationError("no pending requests")
    budget = config.chunk_size
    entries: list[BatchEntry] = []
    batch_rids: set[str] = set()
    capped = config.policy != POLICY_BATCHLLM

    # 1) decode queue: every active decoder gets one token, round-robin when
    # the budget or request cap cuts the pass short.
    for _ in range(len(state.decode_queue)):
        if budget == 0 or (capped and len(batch_rids) >= config.request_cap):
            break
        rid = state.decode_queue.popleft()
        if state.requests[rid].phase is not Phase.DECODING:
            continue  # finished earlier; drop lazily
        entries.append(BatchEntry(rid, DECODE, 1))
        batch_rids.add(rid)
        budget -= 1
        state.decode_queue.append(rid)

    if config.policy == POLICY_BATCHLLM:
        budget = _form_grouped_prefill(state, config, budget, entries)
    else:
        budget = _form_fcfs_prefill(state, config, budget, entries, batch_rids)

    state.iteration += 1
    state.last_batch = TokenBatch(iteration=state.iteration, entries=tuple(entries))
    return state.last_batch


def _form_grouped_prefill(state: SchedulerState, config: SchedulerConfig,
                          budget: int, entries: list[BatchEntry]) -> int:
    # 2a) distinct queue: members already holding reservations come first.
    while state.open_members and budget > 0:
        rid = state.open_members[0]
        r = state.requests[rid]
        take = min(r.suffix_len - r.suffix_admitted, budget)
        entries.append(BatchEntry(rid, DISTINCT_CHUNK, take))
        r.suffix_admitted += take
        budget -= take
        if r.suffix_admitted == r.suffix_len:
            state.open_members.popleft()
        else:
            break

    # 2b) commit further members in group order; stop at the first one that
    # does not fit to keep admission order (and therefore liveness) intact.
    blocked = False
    while budget > 0 and state.distinct_ready and not blocked:
        g = state.groups[state.distinct_ready[0]]
        while g.next_member < len(g.member_ids) and budget > 0:
            r = state.requests[g.member_ids[g.next_member]]
            peak = state.request_peak_blocks(r)
            if not state._commit(peak):
                if state.group_prefix_blocks(g) + peak > config.mem_threshold:
                    raise UnschedulableRequestError(
                        f"request {r.id!r} needs {state.group_prefix_blocks(g) + peak} blocks, "
                        f"mem_threshold is {config.mem_threshold}"
                    )
                blocked = True
                break
            r.committed = True
            g.next_member += 1
            if r.suffix_len == 0:
                state.pending_activations.append(r.id)
                continue
            take = min(r.suffix_len, budget)
            entries.append(BatchEntry(r.id, DISTINCT_CHUNK, take))
            r.suffix_admitted = take
            budget -= take
            if take < r.suffix_len:
                state.open_members.append(r.id)
        if g.fully_committed:
            heapq.heappop(state.distinct_ready)
            state._advance_watermark()

    # 3) prefix queue: prefixes are admitted greedily in group order, but a
    # group's prefix may start only once every member of all earlier groups
    # holds its reservation. Reserving a group's members as soon as its
    # prefix is fully admitted lets the next prefix start in the leftover
    # budget without ever admitting ahead of a memory-blocked member, which
    # is what keeps the schedule deadlock-free.
    while budget > 0 and not blocked:
        g = _next_prefix_group(state)
        if g is None or state.committed_watermark < g.index:
            break
        if not g.committed:
            if not state._commit(state.group_prefix_blocks(g)):
                break
            g.committed = True
        remaining = g.prefix_len - g.prefix_admitted
        if remaining <= budget:
            take = remaining  # final chunk: no alignment requirement
        else:
            take = (budget // config.block_size) * config.block_size
        if take == 0:
            break
        entries.append(BatchEntry(g.owner, PREFIX_CHUNK, take))
        g.prefix_admitted += take
        budget -= take
        if g.prefix_admitted < g.prefix_len:
            break
        blocked = not _precommit_members(state, config, g)
    return budget


def _next_prefix_group(state: SchedulerState) -> GroupState | None:
    while state.prefix_cursor < len(state.groups):
        g = state.groups[state.prefix_cursor]
        if g.prefix_len == 0 or g.prefix_admitted == g.prefix_len:
            state.prefix_cursor += 1
            continue
        return g
    return None


def _precommit_members(state: SchedulerState, config: SchedulerConfig,
                       g: GroupState) -> bool:
    """Reserve memory for a group's members; True when all of them fit."""
    while g.next_member < len(g.member_ids):
        r = state.requests[g.member_ids[g.next_member]]
        peak = state.request_peak_blocks(r)
        if not state._commit(peak):
            if state.group_prefix_blocks(g) + peak > config.mem_threshold:
                raise UnschedulableRequestError(
                    f"request {r.id!r} needs {state.group_prefix_blocks(g) + peak} blocks, "
                    f"mem_threshold is {config.mem_threshold}"
                )
            return False
        r.committed = True
        g.next_member += 1
        if r.suffix_len == 0:
            state.pending_activations.append(r.id)
        else:
            state.open_members.append(r.id)
    state._advance_watermark()
    return True


def _form_fcfs_prefill(state: SchedulerState, config: SchedulerConfig, budget: int,
                       entries: list[BatchEntry], batch_rids: set[str]) -> int:
    while budget > 0 and state.pending_prefill:
        if len(batch_rids) >= config.request_cap:
            break
        rid = state.pending_prefill[0]
        r = state.requests[rid]
        if not r.committed:
            peak = state.request_peak_blocks(r)
            if not state._commit(peak):
                if peak > config.mem_threshold:
                    raise UnschedulableRequestError(
                        f"request {rid!r} needs {peak} blocks, "
                        f"mem_threshold is {config.mem_threshold}"
                    )
                break
            r.committed = True
        if state.cache is not None:
            _skip_cached_blocks(state, r)
        covered = r.reused_tokens + r.suffix_admitted
        remaining = r.prompt_len - covered
        if remaining == 0:
            # prompt fully covered by cache hits: nothing to process
            state.pending_prefill.popleft()
            state.pending_activations.append(rid)
            continue
        take = min(remaining, budget)
        entries.append(BatchEntry(rid, DISTINCT_CHUNK, take))
        batch_rids.add(rid)
        budget -= take
        if state.cache is not None:
            _insert_processed_blocks(state, r, covered, covered + take)
        r.suffix_admitted += take
        if covered + take == r.prompt_len:
            state.pending_prefill.popleft()
        else:
            break
    return budget


def _skip_cached_blocks(state: SchedulerState, r: RequestState) -> None:
    bs = state.config.block_size
    hashes = state.block_hashes[r.id]
    covered = r.reused_tokens + r.suffix_admitted
    while covered % bs == 0 and covered // bs < len(hashes):
        h = hashes[covered // bs]
        if not state.cache.match(h, r.id):
            break
        state.pinned_hashes[r.id].append(h)
        r.reused_tokens += bs
        state.reused_prefill += bs
        covered += bs


def _insert_processed_blocks(state: SchedulerState, r: RequestState,
                             start: int, end: int) -> None:
    bs = state.config.block_size
    hashes = state.block_hashes[r.id]
    for i in range(start // bs, end // bs):
        state.cache.insert(hashes[i])


def step(state: SchedulerState, config: SchedulerConfig) -> IterationTrace:
    """Form and apply one token batch; returns the iteration's trace row."""
    batch = form_token_batch(state, config)
    decode_tokens = 0
    prefill_tokens = 0
    finished: list[str] = []

    for entry in batch.entries:
        if entry.kind == PREFIX_CHUNK:
            gi = int(entry.owner.split("#", 1)[1])
            g = state.groups[gi]
            if g.prefix_done == 0:
                state.allocator.set_refs(g.owner, len(g.member_ids))
                for rid in g.member_ids:
                    state.requests[rid].set_phase(Phase.PREFILL_PREFIX_PENDING)
                state.active_requests += len(g.member_ids)
            g.prefix_done += entry.tokens
            state.allocator.grow(g.owner, config.blocks_for(g.prefix_done))
            prefill_tokens += entry.tokens
            if g.prefix_done == g.prefix_len:
                for rid in g.member_ids:
                    state.requests[rid].prefix_credit = g.prefix_len
                heapq.heappush(state.distinct_ready, gi)
        elif entry.kind == DISTINCT_CHUNK:
            r = state.requests[entry.owner]
            if r.phase in (Phase.WAITING, Phase.PREFILL_PREFIX_PENDING):
                if r.phase is Phase.WAITING:
                    state.active_requests += 1
                r.set_phase(Phase.PREFILLING)
            r.suffix_done += entry.tokens
            state.allocator.grow(r.id, config.blocks_for(r.suffix_done))
            prefill_tokens += entry.tokens
            if r.prefill_done == r.prompt_len:
                _complete_prefill(state, r)
        else:
            r = state.requests[entry.owner]
            r.decode_done += 1
            state.allocator.grow(r.id, config.blocks_for(r.suffix_done + r.decode_done))
            decode_tokens += 1
            if r.decode_done == r.output_len:
                finished.append(r.id)

    # requests whose prefill completed without a processed token this
    # iteration (zero-length suffix, or prompt fully covered by cache hits)
    for rid in state.pending_activations:
        _complete_prefill(state, state.requests[rid])
    state.pending_activations.clear()

    blocks_used = state.allocator.used_blocks

    for rid in finished:
        _finish_request(state, state.requests[rid])

    state.n_processed_prefill += prefill_tokens
    state.total_decode += decode_tokens
    return IterationTrace(
        iteration=batch.iteration,
        total_tokens=decode_tokens + prefill_tokens,
        decode_tokens=decode_tokens,
        prefill_tokens=prefill_tokens,
        blocks_used=blocks_used,
        active_requests=state.active_requests,
    )


def _complete_prefill(state: SchedulerState, r: RequestState) -> None:
    if r.phase is Phase.WAITING:
        state.active_requests += 1
    r.set_phase(Phase.DECODING)
    state.decode_queue.append(r.id)


def _finish_request(state: SchedulerState, r: RequestState) -> None:
    r.set_phase(Phase.DONE)
    state.active_requests -= 1
    state.done_count += 1
    state.allocator.free_owner(r.id)
    state.committed_blocks -= state.request_peak_blocks(r)
    if r.group is not None:
        g = state.groups[r.group]
        g.members_done += 1
        if g.prefix_len > 0:
            freed = state.allocator.release(g.owner)
            if freed:
                state.committed_blocks -= state.group_prefix_blocks(g)
    if state.cache is not None:
        for h in state.pinned_hashes.get(r.id, ()):
            state.cache.unpin(h, r.id)
        state.pinned_hashes[r.id] = []


def simulate(source, config: SchedulerConfig,
             output_lens: Mapping[str, int] | None = None) -> SimulationTrace:
    """Run a full simulation.

    ``source`` is a :class:`Workload` for the fcfs policies or a sequence of
    :class:`PrefixSharingGroup` (with ``output_lens``) for the grouped
    policy. Deterministic: no randomness anywhere in the scheduler.
    """
    if isinstance(source, Workload):
        state = SchedulerState.from_workload(source, config)
    else:
        if output_lens is None:
            raise ValidationError("simulating groups requires output_lens")
        state = SchedulerState.from_groups(list(source), output_lens, config)
    if not state.requests:
        raise ValidationError("nothing to simulate")

    rows: list[IterationTrace] = []
    bound = sum(r.prompt_len + r.output_len for r in state.requests.values()) + 1
    while not state.all_done():
        if state.iteration > bound:
            raise RuntimeError("simulation exceeded its iteration bound; scheduler bug")
        rows.append(step(state, config))

    if state.committed_blocks != 0 or state.allocator.used_blocks != 0:
        raise RuntimeError("allocator not empty at end of simulation; scheduler bug")

    return SimulationTrace(
        policy=config.policy,
        s_chunk=config.chunk_size,
        rows=rows,
        n_processed_prefill_tokens=state.n_processed_prefill,
        n_logical_prefill_tokens=state.n_logical_prefill,
        total_decode_tokens=state.total_decode,
        reused_prefill_tokens=state.reused_prefill,
        workload_fingerprint=state.workload_fingerprint,
    )
