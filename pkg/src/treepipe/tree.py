"""Dynamic speculative token tree.

A tree is stored as three aligned arrays: the token ids, the per-edge
probabilities, and a lower-triangular boolean mask whose row i marks the
root path of node i (including i itself).  Nodes are kept in BFS order,
index 0 is always the root (the last verified token), and
``level_offsets`` marks where each depth level starts.

Trees are immutable; every update returns a fresh instance so in-flight
snapshots never observe mutation.  Node identity across versions is
tracked through ``uids``, a monotonically increasing id assigned at
creation time and preserved by pruning.
"""

from __future__ import annotations

import itertools
import struct
from bisect import bisect_right
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidTokenError, OrderingError, TreeStructureError

_uid_counter = itertools.count()


def _fresh_uids(count: int) -> tuple[int, ...]:
    return tuple(next(_uid_counter) for _ in range(count))


@dataclass(frozen=True)
class SurvivorMask:
    """Bit vector over a tree's nodes marking which ones survive a prune."""

    bits: np.ndarray  # bool, shape (n,)

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def __and__(self, other: "SurvivorMask") -> "SurvivorMask":
        return SurvivorMask(self.bits & other.bits)

    def __or__(self, other: "SurvivorMask") -> "SurvivorMask":
        return SurvivorMask(self.bits | other.bits)


@dataclass(frozen=True)
class SpecTree:
    tokens: np.ndarray  # int64, shape (n,)
    probs: np.ndarray  # float64, shape (n,)
    mask: np.ndarray  # bool, shape (n, n)
    level_offsets: tuple[int, ...]
    uids: tuple[int, ...]
    vocab_size: int

    @property
    def size(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def num_levels(self) -> int:
        return len(self.level_offsets)

    def level_bounds(self, level: int) -> tuple[int, int]:
        """Half-open index range [start, end) of one depth level."""
        if not 0 <= level < self.num_levels:
            raise TreeStructureError(f"level {level} does not exist")
        start = self.level_offsets[level]
        end = self.level_offsets[level + 1] if level + 1 < self.num_levels else self.size
        return start, end

    def depth_of(self, i: int) -> int:
        self._check_index(i)
        return bisect_right(self.level_offsets, i) - 1

    def parent_of(self, i: int) -> int | None:
        """Index of i's parent, or None for the root."""
        self._check_index(i)
        if i == 0:
            return None
        start, end = self.level_bounds(self.depth_of(i) - 1)
        row = self.mask[i, start:end]
        parents = np.flatnonzero(row)
        if parents.size != 1:
            raise TreeStructureError(f"node {i} has {parents.size} parents")
        return int(start + parents[0])

    def index_of_uid(self, uid: int) -> int | None:
        try:
            return self.uids.index(uid)
        except ValueError:
            return None

    def _check_index(self, i: int) -> None:
        if not 0 <= i < self.size:
            raise TreeStructureError(f"node index {i} out of range for n={self.size}")


def new_root(token: int, vocab_size: int) -> SpecTree:
    """Degenerate single-node tree, e.g. right after a pipeline flush."""
    if not 0 <= token < vocab_size:
        raise InvalidTokenError(f"token {token} outside vocabulary of size {vocab_size}")
    return SpecTree(
        tokens=np.array([token], dtype=np.int64),
        probs=np.array([1.0]),
        mask=np.ones((1, 1), dtype=bool),
        level_offsets=(0,),
        uids=_fresh_uids(1),
        vocab_size=vocab_size,
    )


def layer_append(
    tree: SpecTree, children: Sequence[tuple[int, int, float]]
) -> SpecTree:
    """Append one new bottom level.

    ``children`` holds (parent_index, token, prob) triples, sorted by
    parent index ascending with ties broken by descending prob then
    ascending token id.  Every parent must lie in the current bottom
    level.
    """
    if not children:
        raise TreeStructureError("layer_append requires at least one child")
    bottom_start, bottom_end = tree.level_bounds(tree.num_levels - 1)
    n = tree.size
    k = len(children)

    prev = None
    for parent, token, prob in children:
        if not bottom_start <= parent < bottom_end:
            raise TreeStructureError(
                f"parent {parent} is not in the bottom level [{bottom_start}, {bottom_end})"
            )
        if not 0 <= token < tree.vocab_size:
            raise InvalidTokenError(f"token {token} outside vocabulary")
        if not 0.0 <= prob <= 1.0:
            raise TreeStructureError(f"probability {prob} outside [0, 1]")
        key = (parent, -prob, token)
        if prev is not None and key < prev:
            raise OrderingError("children must be sorted by (parent, -prob, token)")
        prev = key

    tokens = np.concatenate([tree.tokens, np.array([c[1] for c in children], dtype=np.int64)])
    probs = np.concatenate([tree.probs, np.array([c[2] for c in children])])
    mask = np.zeros((n + k, n + k), dtype=bool)
    mask[:n, :n] = tree.mask
    for j, (parent, _, _) in enumerate(children):
        mask[n + j, :n] = tree.mask[parent]  # root path of the parent
        mask[n + j, n + j] = True
    return SpecTree(
        tokens=tokens,
        probs=probs,
        mask=mask,
        level_offsets=tree.level_offsets + (n,),
        uids=tree.uids + _fresh_uids(k),
        vocab_size=tree.vocab_size,
    )


def to_subtree_prune(tree: SpecTree, new_root_index: int) -> tuple[SpecTree, SurvivorMask]:
    """Reroot the tree at ``new_root_index``, discarding every other branch.

    The survivor set is exactly column ``new_root_index`` of the mask:
    the node itself plus all of its descendants.  Survivors keep their
    conditional probabilities; the new root's probability is forced to 1.
    """
    tree._check_index(new_root_index)
    survivors = SurvivorMask(tree.mask[:, new_root_index].copy())
    keep = survivors.indices()
    depth_shift = tree.depth_of(new_root_index)

    probs = tree.probs[keep].copy()
    probs[0] = 1.0
    depths = np.array([tree.depth_of(int(i)) - depth_shift for i in keep])
    offsets = tuple(int(np.searchsorted(depths, d)) for d in range(int(depths[-1]) + 1 if depths.size else 1))
    pruned = SpecTree(
        tokens=tree.tokens[keep].copy(),
        probs=probs,
        mask=tree.mask[np.ix_(keep, keep)].copy(),
        level_offsets=offsets,
        uids=tuple(tree.uids[int(i)] for i in keep),
        vocab_size=tree.vocab_size,
    )
    return pruned, survivors


def mask_column(tree: SpecTree, i: int) -> SurvivorMask:
    """Descendant-or-self set of node i."""
    tree._check_index(i)
    return SurvivorMask(tree.mask[:, i].copy())


def mask_row(tree: SpecTree, i: int) -> SurvivorMask:
    """Ancestor-or-self set of node i (its root path)."""
    tree._check_index(i)
    return SurvivorMask(tree.mask[i, :].copy())


def bottom_level(tree: SpecTree) -> list[int]:
    start, end = tree.level_bounds(tree.num_levels - 1)
    return list(range(start, end))


def level_snapshot(tree: SpecTree, level: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tokens, probs and mask rows of one level, columns cut at the level end.

    Concatenating the snapshots of all levels reproduces the lower
    triangle of the full mask, so a receiving pipeline stage can extend
    its local mask incrementally.
    """
    start, end = tree.level_bounds(level)
    return (
        tree.tokens[start:end].copy(),
        tree.probs[start:end].copy(),
        tree.mask[start:end, :end].copy(),
    )


def cumulative_prob(tree: SpecTree, i: int) -> float:
    """Product of edge probabilities along the root path of node i."""
    tree._check_index(i)
    return float(np.prod(tree.probs[tree.mask[i]]))


def validate(tree: SpecTree) -> None:
    """Check every structural invariant; raise TreeStructureError on breach."""
    n = tree.size
    if n < 1:
        raise TreeStructureError("tree must contain at least one node")
    if tree.probs.shape != (n,) or tree.mask.shape != (n, n):
        raise TreeStructureError("array shapes disagree")
    if tree.probs[0] != 1.0:
        raise TreeStructureError("root probability must be 1")
    if len(tree.uids) != n:
        raise TreeStructureError("uid count disagrees with node count")
    if not np.all(np.diag(tree.mask)):
        raise TreeStructureError("mask diagonal must be all ones")
    if np.any(np.triu(tree.mask, k=1)):
        raise TreeStructureError("mask must be lower-triangular")
    offs = tree.level_offsets
    if offs[0] != 0 or any(a >= b for a, b in zip(offs, offs[1:])) or offs[-1] >= n + 1:
        raise TreeStructureError("level offsets must start at 0 and strictly increase")
    if offs[-1] > n - 1 and n > 1:
        raise TreeStructureError("last level offset beyond node range")
    # Ancestor closure: each row is its parent's row plus itself.
    for i in range(1, n):
        p = tree.parent_of(i)  # raises if not exactly one parent
        expected = tree.mask[p].copy()
        expected[i] = True
        if not np.array_equal(tree.mask[i], expected):
            raise TreeStructureError(f"row {i} is not the root path through parent {p}")
        if tree.depth_of(i) != tree.depth_of(p) + 1:
            raise TreeStructureError(f"node {i} not exactly one level below its parent")


# --- wire format -----------------------------------------------------------
#
# Little-endian: header {n: u32, levels: u32}, tokens u32[n], probs f64[n],
# level_offsets u32[levels], then the mask as n rows of ceil(n/8) bytes,
# row-major, bit j of row i (least significant bit first) = M[i][j].

def encode(tree: SpecTree) -> bytes:
    n = tree.size
    parts = [struct.pack("<II", n, tree.num_levels)]
    parts.append(tree.tokens.astype("<u4").tobytes())
    parts.append(tree.probs.astype("<f8").tobytes())
    parts.append(np.asarray(tree.level_offsets, dtype="<u4").tobytes())
    packed = np.packbits(tree.mask, axis=1, bitorder="little")
    parts.append(packed.tobytes())
    return b"".join(parts)


def decode(data: bytes, vocab_size: int | None = None) -> SpecTree:
    if len(data) < 8:
        raise TreeStructureError("truncated tree encoding")
    n, levels = struct.unpack_from("<II", data, 0)
    row_bytes = (n + 7) // 8
    need = 8 + 4 * n + 8 * n + 4 * levels + n * row_bytes
    if len(data) != need:
        raise TreeStructureError(f"tree encoding has {len(data)} bytes, expected {need}")
    off = 8
    tokens = np.frombuffer(data, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    probs = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
    off += 8 * n
    offsets = tuple(int(x) for x in np.frombuffer(data, dtype="<u4", count=levels, offset=off))
    off += 4 * levels
    packed = np.frombuffer(data, dtype=np.uint8, count=n * row_bytes, offset=off)
    mask = np.unpackbits(packed.reshape(n, row_bytes), axis=1, bitorder="little")[:, :n].astype(bool)
    if vocab_size is None:
        vocab_size = int(tokens.max()) + 1 if n else 1
    tree = SpecTree(
        tokens=tokens,
        probs=probs,
        mask=mask,
        level_offsets=offsets,
        uids=_fresh_uids(n),
        vocab_size=vocab_size,
    )
    validate(tree)
    return tree


def structurally_equal(a: SpecTree, b: SpecTree) -> bool:
    """Equality up to uids (which are never serialized)."""
    return (
        np.array_equal(a.tokens, b.tokens)
        and np.array_equal(a.probs, b.probs)
        and np.array_equal(a.mask, b.mask)
        and a.level_offsets == b.level_offsets
    )
