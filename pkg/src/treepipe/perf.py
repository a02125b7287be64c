"""Analytic latency model and width selection.

The per-step compute cost is a staircase in the level width: GPU-style
batching pads work up to a quantum (64 tokens by default), so cost leaps
at quantum boundaries and is flat in between.  Expected time between
tokens combines the pipeline traversal cost with the expected full
refill charged on a misprediction.  A small Bernoulli-hit cadence
simulator provides a Monte-Carlo check of the same renewal process.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class CostModel:
    base_ms: float = 40.0
    slope_ms_per_quantum: float = 8.0
    quantum: int = 64
    prune_ms: float = 1.0
    transmit_base_ms: float = 0.5
    transmit_per_node_ms: float = 0.01
    draft_ms: float = 0.0

    def __post_init__(self):
        if self.quantum < 1:
            raise ConfigError("quantum must be >= 1")
        for name in ("base_ms", "slope_ms_per_quantum", "prune_ms",
                     "transmit_base_ms", "transmit_per_node_ms", "draft_ms"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    def transmit_ms(self, level_size: int) -> float:
        if level_size <= 0:
            return 0.0
        return self.transmit_base_ms + self.transmit_per_node_ms * level_size

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "CostModel":
        return cls(**data)


def step_cost(model: CostModel, w: int) -> float:
    """Compute cost of one pipeline step on a level of ``w`` tokens."""
    if w < 1:
        raise ConfigError("level width must be >= 1")
    return model.base_ms + model.slope_ms_per_quantum * (math.ceil(w / model.quantum) - 1)


def expected_tbt_general(stage_costs, hit_prob: float) -> float:
    """max_i t_i + (1 - P) * sum_i t_i for heterogeneous stage costs."""
    costs = list(stage_costs)
    if not costs:
        raise ConfigError("at least one stage cost required")
    if not 0.0 <= hit_prob <= 1.0:
        raise ConfigError("hit probability must lie in [0, 1]")
    return max(costs) + (1.0 - hit_prob) * sum(costs)


def expected_tbt_uniform(t: float, hit_prob: float, m: int) -> float:
    """t + (1 - P) * m * t, the uniform-stage special case."""
    if m < 1:
        raise ConfigError("stage count must be >= 1")
    if not 0.0 <= hit_prob <= 1.0:
        raise ConfigError("hit probability must lie in [0, 1]")
    return t + (1.0 - hit_prob) * m * t


@dataclass(frozen=True)
class AccuracyCurve:
    """Per-step hit probability as a function of tree width."""

    widths: tuple[int, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.widths) != len(self.probs) or not self.widths:
            raise ConfigError("curve needs matching, non-empty widths and probs")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigError("widths must be strictly increasing")
        if any(not 0.0 <= p <= 1.0 for p in self.probs):
            raise ConfigError("probabilities must lie in [0, 1]")

    def __call__(self, w: int) -> float:
        try:
            return self.probs[self.widths.index(w)]
        except ValueError:
            raise ConfigError(f"width {w} not covered by the accuracy curve") from None

    def covers(self, w: int) -> bool:
        return w in self.widths

    def isotonic(self) -> "AccuracyCurve":
        """Monotone non-decreasing correction (running maximum over width)."""
        return AccuracyCurve(self.widths, tuple(np.maximum.accumulate(self.probs)))

    def to_json(self) -> dict:
        return {"widths": list(self.widths), "probs": list(self.probs)}

    @classmethod
    def from_json(cls, data: dict) -> "AccuracyCurve":
        return cls(tuple(int(w) for w in data["widths"]), tuple(float(p) for p in data["probs"]))


def select_width(cost: CostModel, acc: AccuracyCurve, m: int, candidates) -> int:
    """Width minimizing expected TBT; ties go to the smaller width."""
    cands = sorted(set(int(w) for w in candidates))
    if not cands:
        raise ConfigError("candidate list must be non-empty")
    for w in cands:
        if not acc.covers(w):
            raise ConfigError(f"candidate width {w} outside the accuracy curve")
    return min(cands, key=lambda w: (expected_tbt_uniform(step_cost(cost, w), acc(w), m), w))


def fit_accuracy_curve(samples: dict[int, tuple[int, int]]) -> AccuracyCurve:
    """Empirical P(w) from (hits, verifications) per width, isotonic-corrected.

    Raw Monte-Carlo noise could otherwise violate the plateau monotonicity
    and make width selection non-deterministic.
    """
    if not samples:
        raise ConfigError("no traces to fit")
    widths = sorted(samples)
    probs = []
    for w in widths:
        hits, total = samples[w]
        if total <= 0:
            raise ConfigError(f"width {w} has no verifications")
        probs.append(hits / total)
    return AccuracyCurve(tuple(widths), tuple(probs)).isotonic()


@dataclass
class CadenceStats:
    steps_per_token: float
    tbt_mean_ms: float
    tokens: int
    hits: int
    misses: int


def simulate_cadence(
    hit_prob: float,
    m: int,
    tokens: int,
    seed: int,
    cost: CostModel | None = None,
    width: int = 1,
) -> CadenceStats:
    """Monte-Carlo renewal process behind the expected-TBT formula.

    Each emitted token costs one pipeline step; a miss (probability
    1 - hit_prob) additionally charges a full m-step refill, mirroring the
    analytic model's worst-case accounting.  Mean steps per token
    therefore converges to 1 + (1 - hit_prob) * m.
    """
    if not 0.0 <= hit_prob <= 1.0:
        raise ConfigError("hit probability must lie in [0, 1]")
    if m < 1 or tokens < 1:
        raise ConfigError("need m >= 1 and at least one token")
    rng = np.random.default_rng(seed)
    draws = rng.random(tokens)
    misses = int(np.count_nonzero(draws >= hit_prob))
    hits = tokens - misses
    total_steps = tokens + misses * m
    t = step_cost(cost, width) if cost is not None else 1.0
    return CadenceStats(
        steps_per_token=total_steps / tokens,
        tbt_mean_ms=total_steps * t / tokens,
        tokens=tokens,
        hits=hits,
        misses=misses,
    )
