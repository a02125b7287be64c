"""Speculative token sources and the fixed-width frontier expansion.

Each decode step the tree frontier (its bottom level) is expanded: a
draft provider proposes top-k candidates per frontier node, candidates
are ranked by cumulative probability along their root path, and the best
``w`` survive.  Providers are pluggable; the package ships a synthetic
statistical provider (hit behaviour configured, fillers pseudo-random)
and a trace-replay provider for regression runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Protocol

import numpy as np

from . import tree as tree_mod
from .errors import SourceUnavailable, DraftExhausted, TraceParseError, TreeStructureError
from .tree import SpecTree


@dataclass(frozen=True)
class BeamConfig:
    """Tree width cap ``w`` and per-node candidate count ``k``."""

    w: int = 64
    k: int = 16

    def __post_init__(self):
        if self.w < 1:
            raise TreeStructureError("tree width must be >= 1")
        if self.k < 2:
            raise TreeStructureError("candidate count must be >= 2")


@dataclass(frozen=True)
class SyntheticDraftConfig:
    """Statistical stand-in for a real draft model.

    ``top1_hit`` is the chance the true next token is ranked first,
    ``miss_prob`` the chance it is absent entirely, and the residual mass
    is spread over ranks 2.. with geometric decay ``rank_decay`` (an
    untruncated draw; a rank beyond k counts as a miss at that k).  The
    defaults give a cumulative hit rate of ~0.99 at k=32.
    """

    top1_hit: float = 0.62
    rank_decay: float = 0.6
    miss_prob: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.top1_hit <= 1.0 or not 0.0 <= self.miss_prob <= 1.0:
            raise TreeStructureError("probabilities must lie in [0, 1]")
        if self.top1_hit + self.miss_prob > 1.0 + 1e-12:
            raise TreeStructureError("top1_hit + miss_prob must not exceed 1")
        if not 0.0 <= self.rank_decay < 1.0:
            raise TreeStructureError("rank_decay must lie in [0, 1)")

    def hit_rate_at(self, k: int) -> float:
        """Closed-form P(true token within the top k)."""
        residual = 1.0 - self.top1_hit - self.miss_prob
        return self.top1_hit + residual * (1.0 - self.rank_decay ** (k - 1))


def _rank_probs(count: int) -> list[float]:
    # softmax-free geometric weights: strictly descending, sum < 1
    return [2.0 ** -(j + 1) for j in range(count)]


def synthetic_draft(
    cfg: SyntheticDraftConfig,
    oracle_next: int | None,
    k: int,
    call_index: int,
    vocab_size: int,
) -> list[tuple[int, float]]:
    """One synthetic top-k proposal, deterministic in (seed, call_index)."""
    if k < 1:
        raise TreeStructureError("k must be >= 1")
    rng = np.random.default_rng([cfg.seed, call_index])
    rank = None
    if oracle_next is not None:
        u = rng.random()
        if u < cfg.miss_prob:
            rank = None
        elif u < cfg.miss_prob + cfg.top1_hit:
            rank = 1
        else:
            if cfg.rank_decay == 0.0:
                rank = 2
            else:
                rank = 1 + int(rng.geometric(1.0 - cfg.rank_decay))
            if rank > k:
                rank = None
    fillers = [
        int(t)
        for t in rng.choice(vocab_size, size=min(vocab_size, k + 1), replace=False)
        if oracle_next is None or int(t) != oracle_next
    ]
    count = min(k, len(fillers) + (1 if rank is not None else 0))
    tokens: list[int] = []
    for j in range(count):
        if rank is not None and j == rank - 1:
            tokens.append(int(oracle_next))
        else:
            tokens.append(fillers.pop(0))
    probs = _rank_probs(len(tokens))
    return list(zip(tokens, probs))


class DraftProvider(Protocol):
    def propose(
        self, context: tuple[int, ...], k: int, *, step: int = 0, frontier_node: int = 0
    ) -> list[tuple[int, float]]:
        """Top-k (token, prob) pairs for the next position after ``context``."""
        ...


class SyntheticDraft:
    """Draft provider driven by :func:`synthetic_draft`.

    It must be bound to the true greedy continuation before use; frontier
    nodes whose path has already diverged from the truth receive
    filler-only proposals (their branch can never be verified anyway).
    """

    def __init__(self, cfg: SyntheticDraftConfig, vocab_size: int):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self._reference: tuple[int, ...] | None = None
        self._calls = 0

    def bind_reference(self, sequence: list[int] | tuple[int, ...]) -> None:
        self._reference = tuple(sequence)

    def propose(self, context, k, *, step: int = 0, frontier_node: int = 0):
        if self._reference is None:
            raise SourceUnavailable("synthetic draft has no bound reference sequence")
        ref = self._reference
        oracle_next = None
        if len(context) < len(ref) and ref[: len(context)] == tuple(context):
            oracle_next = ref[len(context)]
        call_index = self._calls
        self._calls += 1
        return synthetic_draft(self.cfg, oracle_next, k, call_index, self.vocab_size)


class RecordingDraft:
    """Wraps a provider and records every proposal as a trace record."""

    def __init__(self, inner: DraftProvider):
        self.inner = inner
        self.records: list[dict] = []

    def bind_reference(self, sequence) -> None:
        bind = getattr(self.inner, "bind_reference", None)
        if bind is not None:
            bind(sequence)

    def propose(self, context, k, *, step: int = 0, frontier_node: int = 0):
        candidates = self.inner.propose(context, k, step=step, frontier_node=frontier_node)
        self.records.append(
            {
                "step": step,
                "frontier_node": frontier_node,
                "candidates": [{"token": t, "prob": p} for t, p in candidates],
            }
        )
        return candidates

    def save(self, path: str) -> None:
        write_trace(self.records, path)


def write_trace(records: list[dict], path: str) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def load_trace(path: str) -> list[dict]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(str(exc), lineno) from exc
            if not isinstance(rec, dict) or "candidates" not in rec:
                raise TraceParseError("record missing 'candidates'", lineno)
            try:
                rec["candidates"] = [
                    (int(c["token"]), float(c["prob"])) for c in rec["candidates"]
                ]
            except (KeyError, TypeError, ValueError) as exc:
                raise TraceParseError(f"bad candidate entry: {exc}", lineno) from exc
            records.append(rec)
    return records


class ReplayDraft:
    """Plays back recorded top-k lists in recorded order."""

    def __init__(self, records: list[dict]):
        self._records = records
        self._next = 0

    @classmethod
    def from_file(cls, path: str) -> "ReplayDraft":
        return cls(load_trace(path))

    def propose(self, context, k, *, step: int = 0, frontier_node: int = 0):
        if self._next >= len(self._records):
            raise DraftExhausted("replay trace exhausted")
        candidates = self._records[self._next]["candidates"]
        self._next += 1
        if len(candidates) < k:
            raise SourceUnavailable(
                f"insufficient candidates: trace has {len(candidates)}, requested {k}"
            )
        return list(candidates[:k])


def expand_fixed_width(
    spec_tree: SpecTree,
    cfg: BeamConfig,
    draft: DraftProvider,
    context: tuple[int, ...],
    step: int = 0,
) -> list[tuple[int, int, float]]:
    """Propose the next tree level, capped at ``cfg.w`` nodes.

    ``context`` is the verified token sequence ending at the tree root.
    Candidates from all frontier nodes compete on cumulative probability
    (draft prob times the parent's root-path product); ties break on
    lower parent index, then lower token id.  The result is sorted the
    way :func:`tree.layer_append` expects.
    """
    if not context or context[-1] != int(spec_tree.tokens[0]):
        raise TreeStructureError("context must end at the tree root token")
    frontier = tree_mod.bottom_level(spec_tree)
    pool: list[tuple[float, int, int, float]] = []  # (cum, parent, token, prob)
    for node in frontier:
        path = np.flatnonzero(spec_tree.mask[node])  # root path, BFS order
        node_context = context + tuple(int(spec_tree.tokens[j]) for j in path[1:])
        parent_cum = tree_mod.cumulative_prob(spec_tree, node)
        for token, prob in draft.propose(node_context, cfg.k, step=step, frontier_node=node):
            pool.append((prob * parent_cum, node, token, prob))
    pool.sort(key=lambda c: (-c[0], c[1], c[2]))
    chosen = pool[: cfg.w]
    chosen.sort(key=lambda c: (c[1], -c[3], c[2]))
    return [(parent, token, prob) for _, parent, token, prob in chosen]
