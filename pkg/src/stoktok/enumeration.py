"""Exact enumeration, counting and uniform sampling of valid tokenisations.

All counts are Python integers and every sampler branches on exact integer
ratios (``rng.randrange(total)``), so uniformity does not depend on float
precision.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

from .vocab import SplitMap, TokenSeq, Vocabulary, chunk_boundaries

ENUMERATE_GUARD = 24


class InfeasibleError(ValueError):
    """Requested layer/length has no tokenisation."""


def _edges(text: bytes, vocab: Vocabulary, boundaries: frozenset[int]):
    """edges[pos] = [(token_id, stop)] for tokens matching at pos that do not cross a boundary."""
    n = len(text)
    limits = [n] * (n + 1)
    nxt = n
    for pos in range(n, -1, -1):
        limits[pos] = nxt
        if pos in boundaries:
            nxt = pos
    return [
        [(tid, stop) for stop, tid in vocab.trie.prefixes(text, pos, limits[pos])]
        for pos in range(n)
    ]


# ---------------------------------------------------------------------------
# brute force


def enumerate_all(
    text: bytes,
    vocab: Vocabulary,
    limit: int | None = None,
    override: bool = False,
    pretokenise: bool = False,
) -> list[TokenSeq]:
    """Depth-first enumeration of every tokenisation; the oracle for everything else here."""
    if len(text) > ENUMERATE_GUARD and not override:
        raise ValueError(
            f"text has {len(text)} bytes; enumeration is guarded at {ENUMERATE_GUARD} (pass override=True)"
        )
    edges = _edges(text, vocab, chunk_boundaries(text, pretokenise))
    n = len(text)
    out: list[TokenSeq] = []
    path: list[int] = []

    def walk(pos: int) -> bool:
        if pos == n:
            out.append(TokenSeq.from_ids(path, vocab))
            return limit is not None and len(out) >= limit
        for tid, stop in edges[pos]:
            path.append(tid)
            done = walk(stop)
            path.pop()
            if done:
                return True
        return False

    walk(0)
    return out


# ---------------------------------------------------------------------------
# segmentation DAG


@dataclass(frozen=True)
class SegmentationDag:
    """Positions as nodes, one edge per matching token; ``counts[pos]`` = paths from pos to the end."""

    text: bytes
    edges: tuple[tuple[tuple[int, int], ...], ...]
    counts: tuple[int, ...]

    @property
    def total(self) -> int:
        return self.counts[0]


def build_dag(text: bytes, vocab: Vocabulary, pretokenise: bool = False) -> SegmentationDag:
    edges = _edges(text, vocab, chunk_boundaries(text, pretokenise))
    n = len(text)
    counts = [0] * (n + 1)
    counts[n] = 1
    for pos in range(n - 1, -1, -1):
        counts[pos] = sum(counts[stop] for _, stop in edges[pos])
    return SegmentationDag(text, tuple(tuple(e) for e in edges), tuple(counts))


def count_tokenisations(text: bytes, vocab: Vocabulary, pretokenise: bool = False) -> int:
    return build_dag(text, vocab, pretokenise).total


def sample_uniform(dag: SegmentationDag, rng: random.Random, vocab: Vocabulary) -> TokenSeq:
    """Exact uniform draw over all tokenisations encoded by ``dag``."""
    n = len(dag.text)
    pos = 0
    ids = []
    while pos < n:
        r = rng.randrange(dag.counts[pos])
        for tid, stop in dag.edges[pos]:
            r -= dag.counts[stop]
            if r < 0:
                ids.append(tid)
                pos = stop
                break
    return TokenSeq.from_ids(ids, vocab)


# ---------------------------------------------------------------------------
# per-token segment trees

ALL_SEGMENTATIONS = "all"
MERGE_REACHABLE = "merge-reachable"
TREE_MODES = (ALL_SEGMENTATIONS, MERGE_REACHABLE)


class _Node:
    __slots__ = ("children", "counts")

    def __init__(self):
        # children: list of (token_id, node); counts: remaining-length -> leaves
        self.children: list[tuple[int, _Node]] = []
        self.counts: dict[int, int] = {}


@dataclass(frozen=True)
class SegmentTree:
    """Root-to-leaf paths are tokenisations of one token's bytes.

    In ``all`` mode subtrees rooted at the same byte offset are shared, so the
    structure is stored as a DAG whose unfolding is the tree. In
    ``merge-reachable`` mode it is a genuine prefix tree over the sequences that
    recursive 2-way splits can reach.
    """

    token_id: int
    mode: str
    root: _Node

    def leaf_counts(self) -> dict[int, int]:
        """Number of root-to-leaf paths by path length (number of segments)."""
        return dict(sorted(self.root.counts.items()))

    def paths(self, length: int | None = None) -> Iterator[tuple[int, ...]]:
        def walk(node, remaining, prefix):
            if not node.children:
                yield tuple(prefix)
                return
            for tid, child in node.children:
                if remaining is not None and child.counts.get(remaining - 1, 0) == 0:
                    continue
                prefix.append(tid)
                yield from walk(child, None if remaining is None else remaining - 1, prefix)
                prefix.pop()

        if length is None or self.root.counts.get(length, 0):
            yield from walk(self.root, length, [])


def _finalise(node: _Node) -> None:
    if not node.children:
        node.counts = {0: 1}
        return
    counts: dict[int, int] = {}
    for _, child in node.children:
        for ln, c in child.counts.items():
            counts[ln + 1] = counts.get(ln + 1, 0) + c
    node.counts = counts


def _all_segmentations_tree(data: bytes, vocab: Vocabulary) -> _Node:
    n = len(data)
    nodes = [_Node() for _ in range(n + 1)]
    nodes[n].counts = {0: 1}
    for pos in range(n - 1, -1, -1):
        nodes[pos].children = [(tid, nodes[stop]) for stop, tid in vocab.trie.prefixes(data, pos, n)]
        _finalise(nodes[pos])
    return nodes[0]


def reachable_segmentations(token_id: int, split_map: SplitMap) -> frozenset[tuple[int, ...]]:
    """Token sequences reachable from ``token_id`` through recursive 2-way splits."""
    table = split_map.table

    @lru_cache(maxsize=None)
    def reach(tid: int) -> frozenset[tuple[int, ...]]:
        out = {(tid,)}
        for dec in table.get(tid, ()):
            if len(dec) != 2:
                continue
            a, b = dec
            for left in reach(a):
                for right in reach(b):
                    out.add(left + right)
        return frozenset(out)

    return reach(token_id)


def _prefix_tree(sequences) -> _Node:
    root = _Node()
    index: dict[tuple[int, ...], _Node] = {(): root}
    for seq in sorted(sequences):
        node = root
        for i, tid in enumerate(seq):
            key = seq[: i + 1]
            child = index.get(key)
            if child is None:
                child = _Node()
                index[key] = child
                node.children.append((tid, child))
            node = child
    for key in sorted(index, key=len, reverse=True):
        _finalise(index[key])
    return root


def build_segment_tree(
    token_id: int,
    split_map: SplitMap,
    vocab: Vocabulary,
    mode: str = ALL_SEGMENTATIONS,
) -> SegmentTree:
    data = vocab.token_bytes(token_id)
    if mode == ALL_SEGMENTATIONS:
        root = _all_segmentations_tree(data, vocab)
    elif mode == MERGE_REACHABLE:
        root = _prefix_tree(reachable_segmentations(token_id, split_map))
    else:
        raise ValueError(f"unknown tree mode {mode!r}")
    return SegmentTree(token_id, mode, root)


def sample_uniform_segments(tree: SegmentTree, segments: int, rng: random.Random) -> tuple[int, ...]:
    """Uniform draw over root-to-leaf paths with exactly ``segments`` tokens."""
    node = tree.root
    remaining = segments
    if node.counts.get(remaining, 0) == 0:
        raise InfeasibleError(f"token {tree.token_id} has no tokenisation into {segments} segments")
    out = []
    while remaining:
        r = rng.randrange(node.counts[remaining])
        for tid, child in node.children:
            r -= child.counts.get(remaining - 1, 0)
            if r < 0:
                out.append(tid)
                node = child
                remaining -= 1
                break
    return tuple(out)


class SegmentForest:
    """Lazily built, cached segment trees for every token of a vocabulary."""

    def __init__(self, vocab: Vocabulary, split_map: SplitMap):
        self.vocab = vocab
        self.split_map = split_map
        self._cache: dict[tuple[int, str], SegmentTree] = {}

    def tree(self, token_id: int, mode: str = ALL_SEGMENTATIONS) -> SegmentTree:
        key = (token_id, mode)
        tree = self._cache.get(key)
        if tree is None:
            tree = build_segment_tree(token_id, self.split_map, self.vocab, mode)
            self._cache[key] = tree
        return tree


# ---------------------------------------------------------------------------
# distance-layered DAG


@dataclass(frozen=True)
class DistanceDag:
    """Segmentation DAG where each edge costs 0 if it reproduces a reference span, else 1.

    ``counts[pos][d]`` is the number of paths from ``pos`` to the end whose
    cost is exactly ``d`` (only ``d <= k_max`` is kept).
    """

    text: bytes
    reference: TokenSeq
    k_max: int | None
    edges: tuple[tuple[tuple[int, int, int], ...], ...]
    counts: tuple[dict[int, int], ...]

    def layer_counts(self) -> dict[int, int]:
        return dict(sorted(self.counts[0].items()))

    def count(self, k: int) -> int:
        return self.counts[0].get(k, 0)


def build_distance_dag(
    text: bytes,
    reference: TokenSeq,
    k_max: int | None,
    vocab: Vocabulary,
    pretokenise: bool = False,
) -> DistanceDag:
    if reference.end != len(text):
        raise ValueError("reference does not cover the text")
    ref_spans = set(reference.spans)
    raw = _edges(text, vocab, chunk_boundaries(text, pretokenise))
    n = len(text)
    edges = tuple(
        tuple((tid, stop, 0 if (pos, stop) in ref_spans else 1) for tid, stop in raw[pos])
        for pos in range(n)
    )
    counts: list[dict[int, int]] = [dict() for _ in range(n + 1)]
    counts[n] = {0: 1}
    for pos in range(n - 1, -1, -1):
        acc: dict[int, int] = {}
        for _, stop, cost in edges[pos]:
            for d, c in counts[stop].items():
                dd = d + cost
                if k_max is not None and dd > k_max:
                    continue
                acc[dd] = acc.get(dd, 0) + c
        counts[pos] = acc
    return DistanceDag(text, reference, k_max, edges, tuple(counts))


def sample_uniform_distance(ddag: DistanceDag, k: int, rng: random.Random, vocab: Vocabulary) -> TokenSeq:
    """Uniform draw over tokenisations at span-matching distance exactly ``k`` from the reference."""
    if ddag.k_max is not None and k > ddag.k_max:
        raise ValueError(f"k={k} exceeds k_max={ddag.k_max}")
    if ddag.count(k) == 0:
        raise InfeasibleError(f"no tokenisation at distance {k}")
    n = len(ddag.text)
    pos, remaining = 0, k
    ids = []
    while pos < n:
        r = rng.randrange(ddag.counts[pos][remaining])
        for tid, stop, cost in ddag.edges[pos]:
            r -= ddag.counts[stop].get(remaining - cost, 0)
            if r < 0:
                ids.append(tid)
                pos, remaining = stop, remaining - cost
                break
    return TokenSeq.from_ids(ids, vocab)


def enumerate_layer(ddag: DistanceDag, k: int, vocab: Vocabulary) -> list[TokenSeq]:
    """Every tokenisation at distance ``k``, in edge order (for small inputs)."""
    n = len(ddag.text)
    out: list[TokenSeq] = []
    path: list[int] = []

    def walk(pos: int, remaining: int) -> None:
        if pos == n:
            out.append(TokenSeq.from_ids(path, vocab))
            return
        for tid, stop, cost in ddag.edges[pos]:
            if ddag.counts[stop].get(remaining - cost, 0):
                path.append(tid)
                walk(stop, remaining - cost)
                path.pop()

    if ddag.count(k):
        walk(0, k)
    return out
