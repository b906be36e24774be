"""Compact prefix tree over token sequences and first-level reuse planning.

The pipeline is: build a radix tree over all prompts, enlarge its first
level so that one level of sharing captures as much KV reuse as possible,
then flatten first-level subtrees into prefix-sharing groups (one shared
prefix plus the distinct remainder of every member prompt). A brute-force
set-partition oracle validates the enlargement on small workloads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping

from .errors import CapacityError, ParseError, ValidationError
from .workload import Workload

_SCAN_CHUNK = 256


class TreeNode:
    """Tree node holding an edge span, ordered children, and terminating ids.

    ``tokens`` is the span of the edge leading into the node (empty only for
    the root). ``leaf_ids`` holds ids of requests whose prompt ends exactly
    at this node; several requests may share one node (identical prompts).
    """

    __slots__ = ("tokens", "children", "leaf_ids")

    def __init__(self, tokens: tuple[int, ...], children: list["TreeNode"] | None = None,
                 leaf_ids: set[str] | None = None):
        self.tokens = tokens
        self.children: list[TreeNode] = children if children is not None else []
        self.leaf_ids: set[str] = leaf_ids if leaf_ids is not None else set()

    def __eq__(self, other) -> bool:
        if not isinstance(other, TreeNode):
            return NotImplemented
        return (self.tokens == other.tokens and self.leaf_ids == other.leaf_ids
                and self.children == other.children)

    def __repr__(self) -> str:
        return (f"TreeNode(tokens={self.tokens!r}, leaf_ids={sorted(self.leaf_ids)!r}, "
                f"children={len(self.children)})")


@dataclass
class PrefixTree:
    root: TreeNode

    def __eq__(self, other) -> bool:
        if not isinstance(other, PrefixTree):
            return NotImplemented
        return self.root == other.root


@dataclass(frozen=True)
class GroupMember:
    id: str
    suffix: tuple[int, ...]


@dataclass(frozen=True)
class PrefixSharingGroup:
    """One shared prefix plus every request reusing it (suffix per member)."""

    prefix: tuple[int, ...]
    members: tuple[GroupMember, ...]

    def __post_init__(self):
        if not self.members:
            raise ValidationError("group has no members")
        ids = [m.id for m in self.members]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate member ids within a group")
        for m in self.members:
            if not self.prefix and not m.suffix:
                raise ValidationError(f"member {m.id!r} reconstructs an empty prompt")

    @property
    def total_prefill_tokens(self) -> int:
        return len(self.prefix) + sum(len(m.suffix) for m in self.members)


def _common_prefix_len(span: tuple[int, ...], tokens: tuple[int, ...], pos: int) -> int:
    """Length of the common prefix of ``span`` and ``tokens[pos:]``.

    Compares in chunks so that fully matching spans cost one tuple
    comparison instead of a per-token Python loop.
    """
    m = min(len(span), len(tokens) - pos)
    if tokens[pos:pos + m] == span[:m]:
        return m
    k = 0
    while True:
        step = min(_SCAN_CHUNK, m - k)
        if span[k:k + step] == tokens[pos + k:pos + k + step]:
            k += step
            continue
        for i in range(k, k + step):
            if span[i] != tokens[pos + i]:
                return i


def build_tree(workload: Workload) -> PrefixTree:
    """Build the compact (radix) tree over all prompts in the workload.

    The result is insertion-order independent: children are kept in
    canonical order (sorted by edge span), and every non-root node with a
    single child and no terminating ids is merged with that child.
    """
    root = TreeNode(())
    # Transient per-node lookup of children by first token; valid only while
    # the tree is a strict radix tree (distinct first tokens per sibling set).
    index: dict[int, dict[int, TreeNode]] = {id(root): {}}
    for request in workload.requests:
        _insert(root, index, request.tokens, request.id)
    _sort_children(root)
    return PrefixTree(root)


def _insert(root: TreeNode, index: dict[int, dict[int, TreeNode]],
            tokens: tuple[int, ...], rid: str) -> None:
    node = root
    pos = 0
    n = len(tokens)
    while True:
        if pos == n:
            node.leaf_ids.add(rid)
            return
        table = index[id(node)]
        child = table.get(tokens[pos])
        if child is None:
            leaf = TreeNode(tokens[pos:], leaf_ids={rid})
            node.children.append(leaf)
            table[tokens[pos]] = leaf
            index[id(leaf)] = {}
            return
        k = _common_prefix_len(child.tokens, tokens, pos)
        if k < len(child.tokens):
            # Split the edge: child keeps span[:k], a new node takes the rest.
            rest = TreeNode(child.tokens[k:], children=child.children, leaf_ids=child.leaf_ids)
            index[id(rest)] = index.pop(id(child))
            child.tokens = child.tokens[:k]
            child.children = [rest]
            child.leaf_ids = set()
            index[id(child)] = {rest.tokens[0]: rest}
        node = child
        pos += k


def _sort_children(root: TreeNode) -> None:
    stack = [root]
    while stack:
        node = stack.pop()
        node.children.sort(key=lambda c: c.tokens)
        stack.extend(node.children)


def _clone(node: TreeNode, keepalive: list[TreeNode]) -> TreeNode:
    copy = TreeNode(node.tokens, leaf_ids=set(node.leaf_ids))
    keepalive.append(copy)
    stack = [(node, copy)]
    while stack:
        old, new = stack.pop()
        for child in old.children:
            cc = TreeNode(child.tokens, leaf_ids=set(child.leaf_ids))
            keepalive.append(cc)
            new.children.append(cc)
            stack.append((child, cc))
    return copy


def subtree_leaves(node: TreeNode) -> int:
    """Number of request ids terminating anywhere in the subtree."""
    total = 0
    stack = [node]
    while stack:
        n = stack.pop()
        total += len(n.leaf_ids)
        stack.extend(n.children)
    return total


def maximize_reuse(tree: PrefixTree) -> PrefixTree:
    """Enlarge first-level prefixes bottom-up; the input tree is not modified.

    At each node, after its children have been solved, every grandchild is
    considered for promotion: forking a grandchild into a new first-level
    sibling (span = child span + grandchild span) changes the node's
    first-level saved tokens by exactly

        (leaves(grandchild) - 1) * len(grandchild span) - len(child span)

    i.e. gain - penalty, so the fork is applied precisely when it strictly
    improves reuse. Ties are left alone. A residual child left with one
    child and no terminating ids is re-merged to preserve compactness; a
    residual child left empty is dropped. The output is canonically ordered
    but is no longer a strict radix tree: first-level siblings may share
    leading tokens.
    """
    keepalive: list[TreeNode] = []
    root = _clone(tree.root, keepalive)
    counts: dict[int, int] = {}
    stack: list[tuple[TreeNode, bool]] = [(root, False)]
    while stack:
        node, ready = stack.pop()
        if not ready:
            stack.append((node, True))
            for child in node.children:
                stack.append((child, False))
            continue
        _enlarge_first_level(node, counts, keepalive)
    return PrefixTree(root)


def _enlarge_first_level(node: TreeNode, counts: dict[int, int],
                         keepalive: list[TreeNode]) -> None:
    for child in list(node.children):
        if not child.children:
            continue
        penalty = len(child.tokens)
        for gchild in list(child.children):
            gleaves = counts[id(gchild)]
            gain = (gleaves - 1) * len(gchild.tokens)
            if gain > penalty:
                forked = TreeNode(child.tokens + gchild.tokens,
                                  children=gchild.children,
                                  leaf_ids=set(gchild.leaf_ids))
                keepalive.append(forked)
                counts[id(forked)] = gleaves
                child.children.remove(gchild)
                counts[id(child)] -= gleaves
                node.children.append(forked)
        if not child.leaf_ids and not child.children:
            node.children.remove(child)
        elif not child.leaf_ids and len(child.children) == 1:
            only = child.children[0]
            child.tokens = child.tokens + only.tokens
            child.children = only.children
            child.leaf_ids = only.leaf_ids
    node.children.sort(key=lambda c: c.tokens)
    counts[id(node)] = len(node.leaf_ids) + sum(counts[id(c)] for c in node.children)


def first_level_saved_tokens(tree: PrefixTree) -> int:
    """Tokens saved by sharing only the first level: sum of (leaves-1)*span."""
    saved = 0
    for child in tree.root.children:
        leaves = subtree_leaves(child)
        if leaves >= 2:
            saved += (leaves - 1) * len(child.tokens)
    return saved


def multi_level_saved_tokens(tree: PrefixTree) -> int:
    """Tokens saved if every shared node, at any depth, were computed once."""
    saved = 0
    stack = list(tree.root.children)
    while stack:
        node = stack.pop()
        leaves = subtree_leaves(node)
        if leaves >= 2:
            saved += (leaves - 1) * len(node.tokens)
        stack.extend(node.children)
    return saved


def extract_groups(tree: PrefixTree) -> list[PrefixSharingGroup]:
    """Flatten first-level subtrees into prefix-sharing groups.

    A first-level child with two or more terminating requests becomes a
    group whose prefix is that child's span; deeper levels are expanded
    into the member suffixes. A first-level child with a single request
    becomes a singleton group with an empty prefix and the full prompt as
    the suffix. Together the groups cover every request exactly once.
    """
    groups = []
    for child in tree.root.children:
        leaves = subtree_leaves(child)
        if leaves >= 2:
            members = tuple(_collect_members(child, base=()))
            groups.append(PrefixSharingGroup(prefix=child.tokens, members=members))
        else:
            (member,) = _collect_members(child, base=child.tokens)
            groups.append(PrefixSharingGroup(prefix=(), members=(member,)))
    return groups


def _collect_members(node: TreeNode, base: tuple[int, ...]) -> list[GroupMember]:
    members = []
    stack: list[tuple[TreeNode, tuple[int, ...]]] = [(node, base)]
    while stack:
        current, suffix = stack.pop()
        for rid in sorted(current.leaf_ids):
            members.append(GroupMember(rid, suffix))
        for child in reversed(current.children):
            stack.append((child, suffix + child.tokens))
    return members


def saved_tokens(groups: Iterable[PrefixSharingGroup]) -> int:
    """Prefill tokens avoided by computing each group prefix once."""
    return sum((len(g.members) - 1) * len(g.prefix) for g in groups)


def saving_ratio_static(groups: Iterable[PrefixSharingGroup]) -> float:
    """Saved fraction of logical prefill tokens; equals 1 - processed/logical."""
    groups = list(groups)
    logical = sum(
        len(g.members) * len(g.prefix) + sum(len(m.suffix) for m in g.members)
        for g in groups
    )
    if logical == 0:
        raise ValidationError("saving ratio undefined: zero logical prefill tokens")
    return saved_tokens(groups) / logical


_ORACLE_LIMIT = 10


def optimal_partition_oracle(workload: Workload) -> tuple[float, tuple[tuple[str, ...], ...]]:
    """Exhaustive best single-level grouping over all set partitions.

    Maximizes sum over blocks of (|block|-1) * len(common prefix of block).
    Returns the best static saving ratio and one witnessing partition of the
    request ids. Only feasible for small workloads; refuses more than
    10 requests.
    """
    n = len(workload)
    if n == 0:
        raise ValidationError("oracle undefined on an empty workload")
    if n > _ORACLE_LIMIT:
        raise CapacityError(f"partition oracle limited to {_ORACLE_LIMIT} requests, got {n}")

    seqs = [r.tokens for r in workload.requests]
    ids = [r.id for r in workload.requests]
    logical = sum(len(s) for s in seqs)

    pair_lcp = [[0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            k = _common_prefix_len(seqs[i], seqs[j], 0)
            pair_lcp[i][j] = pair_lcp[j][i] = k

    best_saved = -1
    best_blocks: list[list[int]] = []
    # blocks: list of (member indices, lcp); lcp maintained incrementally using
    # any representative, which is exact because lcp is an ultrametric.
    blocks: list[list[int]] = []
    lcps: list[int] = []

    def assign(i: int, saved: int) -> None:
        nonlocal best_saved, best_blocks
        if i == n:
            if saved > best_saved:
                best_saved = saved
                best_blocks = [list(b) for b in blocks]
            return
        for b in range(len(blocks)):
            old_lcp = lcps[b]
            new_lcp = min(old_lcp, pair_lcp[i][blocks[b][0]])
            size = len(blocks[b])
            delta = size * new_lcp - (size - 1) * old_lcp
            blocks[b].append(i)
            lcps[b] = new_lcp
            assign(i + 1, saved + delta)
            blocks[b].pop()
            lcps[b] = old_lcp
        blocks.append([i])
        lcps.append(len(seqs[i]))
        assign(i + 1, saved)
        blocks.pop()
        lcps.pop()

    assign(0, 0)
    partition = tuple(tuple(ids[i] for i in block) for block in best_blocks)
    return best_saved / logical, partition


def write_groups(groups: Iterable[PrefixSharingGroup], output_lens: Mapping[str, int],
                 path: str) -> None:
    """Write line-delimited JSON, one group per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in groups:
            members = []
            for m in g.members:
                if m.id not in output_lens:
                    raise ValidationError(f"no output_len for member {m.id!r}")
                members.append(
                    {"id": m.id, "suffix": list(m.suffix), "output_len": output_lens[m.id]}
                )
            fh.write(json.dumps({"prefix": list(g.prefix), "members": members},
                                separators=(",", ":")))
            fh.write("\n")


def read_groups(path: str) -> tuple[list[PrefixSharingGroup], dict[str, int]]:
    """Read a groups file; returns the groups and the per-request decode lengths."""
    groups = []
    output_lens: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                raise ParseError(path, lineno, "blank line")
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(record, dict) or "prefix" not in record or "members" not in record:
                raise ParseError(path, lineno, "expected object with 'prefix' and 'members'")
            prefix = record["prefix"]
            raw_members = record["members"]
            if not isinstance(prefix, list) or not all(
                isinstance(t, int) and not isinstance(t, bool) and t >= 0 for t in prefix
            ):
                raise ParseError(path, lineno, "'prefix' must be an array of token ids")
            if not isinstance(raw_members, list) or not raw_members:
                raise ParseError(path, lineno, "'members' must be a non-empty array")
            members = []
            for m in raw_members:
                if (not isinstance(m, dict)
                        or not isinstance(m.get("id"), str)
                        or not isinstance(m.get("suffix"), list)
                        or not all(isinstance(t, int) and not isinstance(t, bool) and t >= 0
                                   for t in m["suffix"])
                        or isinstance(m.get("output_len"), bool)
                        or not isinstance(m.get("output_len"), int)
                        or m["output_len"] < 1):
                    raise ParseError(path, lineno, "malformed member record")
                if m["id"] in output_lens:
                    raise ValidationError(f"duplicate member id {m['id']!r}")
                members.append(GroupMember(m["id"], tuple(m["suffix"])))
                output_lens[m["id"]] = m["output_len"]
            try:
                groups.append(PrefixSharingGroup(tuple(prefix), tuple(members)))
            except ValidationError as exc:
                raise ParseError(path, lineno, str(exc)) from exc
    return groups, output_lens
