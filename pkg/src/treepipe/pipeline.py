"""Pipelined speculative decoding over a staged toy decoder.

Each decode step runs three phases: node-wise computation (every stage
forwards its resident tree level; the last stage finishes the root level
and infers the next token), pruning propagation (the verified token
reroots the tree; embeddings, masks and KV caches are trimmed on every
stage, keeping ancestors-or-descendants of the verified node), and
inter-stage transmission (surviving embeddings move one stage down; the
first stage ingests the freshly proposed level).

A misprediction flushes all speculative state and restarts the pipeline
from the verified position, degrading to plain pipeline-parallel cadence
until the refill completes.  A vanilla reference mode without speculation
is included for bracketing.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tree as tree_mod
from .errors import (
    ConfigError,
    DraftExhausted,
    InvariantViolation,
    SourceUnavailable,
    TreeStructureError,
)
from .model import KvCache, ToyModel, forward_tree, sequential_decode
from .perf import CostModel, step_cost
from .token_source import BeamConfig, DraftProvider, expand_fixed_width
from .tree import SpecTree


def split_layers(num_layers: int, num_stages: int) -> list[tuple[int, int]]:
    """Contiguous near-even partition of [0, num_layers) into stages."""
    if num_stages < 2:
        raise ConfigError("at least 2 stages required")
    if num_layers < num_stages:
        raise ConfigError("cannot give every stage at least one layer")
    base, rem = divmod(num_layers, num_stages)
    splits = []
    lo = 0
    for i in range(num_stages):
        hi = lo + base + (1 if i < rem else 0)
        splits.append((lo, hi))
        lo = hi
    return splits


@dataclass(frozen=True)
class PipelineConfig:
    num_stages: int
    cost_model: CostModel = field(default_factory=CostModel)
    mode: str = "specpipe"  # "specpipe" | "vanilla_pp"
    async_overlap: bool = True
    execution: str = "single"  # "single" | "workers"
    layer_splits: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if self.num_stages < 2:
            raise ConfigError("num_stages must be >= 2")
        if self.mode not in ("specpipe", "vanilla_pp"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.execution not in ("single", "workers"):
            raise ConfigError(f"unknown execution {self.execution!r}")

    def resolve_splits(self, num_layers: int) -> list[tuple[int, int]]:
        if self.layer_splits is not None:
            splits = [tuple(s) for s in self.layer_splits]
            if splits[0][0] != 0 or splits[-1][1] != num_layers or any(
                a[1] != b[0] for a, b in zip(splits, splits[1:])
            ):
                raise ConfigError("layer_splits must partition the layer range")
            return splits
        return split_layers(num_layers, self.num_stages)


@dataclass(frozen=True)
class LevelPayload:
    """One tree level in flight between stages."""

    uids: tuple[int, ...]
    tokens: tuple[int, ...]
    positions: tuple[int, ...]
    ancestors: tuple[frozenset, ...]  # ancestor uids including self
    embeddings: np.ndarray | None = None  # None: embed from tokens at stage 1
    kv_cached: bool = False  # rows already present in every stage cache

    def __len__(self) -> int:
        return len(self.uids)

    def nodes(self) -> list[tuple[int, int, int, frozenset]]:
        return list(zip(self.uids, self.tokens, self.positions, self.ancestors))


class StageState:
    def __init__(self, stage_id: int, layer_range: tuple[int, int], num_layers: int, hidden: int):
        self.stage_id = stage_id
        self.layer_range = layer_range
        self.kv = KvCache(num_layers, hidden)
        self.resident: LevelPayload | None = None
        self.out: np.ndarray | None = None


@dataclass
class StepOutcome:
    verified_token: int | None
    hit: bool
    flush_depth: int
    emitted: bool
    stalled: bool
    timings: dict  # stage_id -> {"compute": ms, "prune": ms, "transmit": ms}
    step_ms: float


@dataclass
class RunMetrics:
    tbt_mean_ms: float
    tbt_p50: float
    tbt_p99: float
    steps_per_token: float
    hit_rate: float
    flush_count: int
    throughput_tps: float
    tokens: int
    decode_steps: int
    stalls: int

    def to_json(self) -> dict:
        return asdict(self)


TRACE_COLUMNS = ["step", "stage", "phase", "start_ms", "end_ms", "resident_nodes", "hit", "flush"]


def write_trace_csv(rows: list[dict], path_or_file) -> None:
    own = isinstance(path_or_file, (str, bytes))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if own:
            fh.close()


class PipelineRunner:
    """Step-by-step driver of the speculative pipeline for one request."""

    def __init__(
        self,
        model: ToyModel,
        pcfg: PipelineConfig,
        beam: BeamConfig,
        draft: DraftProvider | None = None,
        collect_trace: bool = True,
    ):
        self.model = model
        self.pcfg = pcfg
        self.beam = beam
        self.draft = draft
        splits = pcfg.resolve_splits(model.cfg.layers)
        self.stages = [
            StageState(i + 1, splits[i], model.cfg.layers, model.cfg.hidden)
            for i in range(pcfg.num_stages)
        ]
        self.tree: SpecTree | None = None
        self.verified: list[int] = []
        self.emitted: list[int] = []
        self.node_pos: dict[int, int] = {}
        self.verified_uids: set[int] = set()

        self.step_no = 0
        self.clock_ms = 0.0
        self.decode_start_ms = 0.0
        self.emission_steps: list[int] = []
        self.emission_clocks: list[float] = []
        self.hits = 0
        self.misses = 0
        self.stall_steps = 0
        self.collect_trace = collect_trace
        self.trace_rows: list[dict] = []
        # node conservation ledger
        self.nodes_injected = 0
        self.nodes_exited = 0
        self.nodes_pruned_in_flight = 0
        self._pool = (
            ThreadPoolExecutor(max_workers=pcfg.num_stages)
            if pcfg.execution == "workers"
            else None
        )

    # --- helpers ---------------------------------------------------------

    @property
    def root_uid(self) -> int:
        return self.tree.uids[0]

    def in_flight_nodes(self) -> int:
        return sum(len(s.resident) for s in self.stages if s.resident is not None)

    def all_stages_occupied(self) -> bool:
        return all(s.resident is not None for s in self.stages)

    def speculative_uid_audit(self) -> set[int]:
        """All speculative uids held anywhere (residents and caches)."""
        held: set[int] = set()
        for s in self.stages:
            if s.resident is not None:
                held.update(s.resident.uids)
            held.update(s.kv.speculative_uids())
        return held - self.verified_uids

    def _payload_for_level(self, level: int, kv_cached: bool = False) -> LevelPayload:
        start, end = self.tree.level_bounds(level)
        idx = range(start, end)
        return LevelPayload(
            uids=tuple(self.tree.uids[i] for i in idx),
            tokens=tuple(int(self.tree.tokens[i]) for i in idx),
            positions=tuple(self.node_pos[self.tree.uids[i]] for i in idx),
            ancestors=tuple(
                frozenset(self.tree.uids[j] for j in np.flatnonzero(self.tree.mask[i]))
                for i in idx
            ),
            embeddings=None,
            kv_cached=kv_cached,
        )

    # --- prefill ---------------------------------------------------------

    def prefill(self, prompt: list[int]) -> None:
        """Run the prompt through every stage, then seed the root level."""
        if not prompt:
            raise TreeStructureError("prompt must be non-empty")
        for token in prompt:
            if not 0 <= token < self.model.cfg.vocab:
                raise TreeStructureError(f"prompt token {token} outside vocabulary")
        start = self.clock_ms
        for pos, token in enumerate(prompt):
            x = self.model.embed(token, pos)
            for stage in self.stages:
                rows = list(range(len(stage.kv)))
                x = self.model.forward_position(
                    x, stage.kv, rows, layer_range=stage.layer_range,
                    append=True, uid=-1, position=pos, prefix=True,
                )
        # prompt traverses the pipeline once; charge one step per stage
        for stage in self.stages:
            cost = step_cost(self.pcfg.cost_model, len(prompt))
            self._trace(0, stage.stage_id, "compute", self.clock_ms, self.clock_ms + cost, len(prompt), False, False)
            self.clock_ms += cost
        self.verified = list(prompt)
        self.tree = tree_mod.new_root(prompt[-1], self.model.cfg.vocab)
        self.node_pos[self.root_uid] = len(prompt) - 1
        self.verified_uids.add(self.root_uid)
        # the root is already cached everywhere; its level re-enters the
        # pipeline in recompute mode so its final embedding reaches stage m
        self.stages[0].resident = self._payload_for_level(0, kv_cached=True)
        self.nodes_injected += 1
        self.decode_start_ms = self.clock_ms

    # --- one decode step -------------------------------------------------

    def step(self, children: list[tuple[int, int, float]] | None) -> StepOutcome:
        """Advance one pipeline step; ``children`` is the proposed new level
        (or None when the token source stalled)."""
        if self.tree is None:
            raise InvariantViolation("prefill must run before stepping")
        self.step_no += 1
        stalled = not children
        fed_levels_before = self.tree.num_levels
        if not stalled:
            self.tree = tree_mod.layer_append(self.tree, children)
            start, end = self.tree.level_bounds(self.tree.num_levels - 1)
            for i in range(start, end):
                parent = self.tree.parent_of(i)
                self.node_pos[self.tree.uids[i]] = self.node_pos[self.tree.uids[parent]] + 1
        if stalled:
            self.stall_steps += 1

        # 1. node-wise computation
        def compute(stage: StageState) -> None:
            if stage.resident is None:
                stage.out = None
                return
            stage.out = forward_tree(
                self.model,
                stage.kv,
                stage.resident.nodes(),
                embeddings=stage.resident.embeddings,
                layer_range=stage.layer_range,
                append=not stage.resident.kv_cached,
            )

        if self._pool is not None:
            list(self._pool.map(compute, self.stages))  # barrier: map waits
        else:
            for stage in self.stages:
                compute(stage)

        compute_ms = {
            s.stage_id: (step_cost(self.pcfg.cost_model, len(s.resident)) if s.resident else 0.0)
            for s in self.stages
        }

        # 2. verification + pruning propagation
        last = self.stages[-1]
        exiting_nodes = len(last.resident) if last.resident is not None else 0
        verified_token: int | None = None
        hit = False
        flush_depth = 0
        keep_uids: set[int] | None = None
        pruned = False

        if last.resident is not None:
            if last.resident.uids != (self.root_uid,):
                raise InvariantViolation(
                    "last stage must hold exactly the root level when verifying"
                )
            verified_token = self.model.greedy_token(last.out[0])
            self.verified.append(verified_token)
            self.emitted.append(verified_token)
            pruned = True

            child_idx = None
            if self.tree.num_levels >= 2:
                lo, hi = self.tree.level_bounds(1)
                for i in range(lo, hi):
                    if int(self.tree.tokens[i]) == verified_token:
                        child_idx = i
                        break

            if child_idx is not None:
                hit = True
                self.hits += 1
                chain_uids = {
                    self.tree.uids[j] for j in tree_mod.mask_row(self.tree, child_idx).indices()
                }
                new_tree, _ = tree_mod.to_subtree_prune(self.tree, child_idx)
                keep_uids = set(new_tree.uids)
                self.verified_uids |= chain_uids
                for stage in self.stages:
                    stage.kv.promote(chain_uids)
                    stage.kv.prune(keep_uids)
                self.tree = new_tree
            else:
                # miss: discard the tree, clear all speculative state
                self.misses += 1
                flush_depth = self.pcfg.num_stages
                self.verified_uids.add(self.root_uid)
                for stage in self.stages:
                    stage.kv.promote({self.root_uid})
                    stage.kv.drop_speculative()
                    if stage is not last and stage.resident is not None:
                        self.nodes_pruned_in_flight += len(stage.resident)
                    stage.resident = None
                    stage.out = None
                self.tree = tree_mod.new_root(verified_token, self.model.cfg.vocab)
                self.node_pos[self.root_uid] = len(self.verified) - 1
                self.verified_uids.add(self.root_uid)

        # account for the exiting root level
        self.nodes_exited += exiting_nodes

        # 3. inter-stage transmission
        outgoing: list[LevelPayload | None] = []
        for stage in self.stages:
            if stage.resident is None or stage.out is None:
                outgoing.append(None)
                continue
            if keep_uids is None:
                idx = list(range(len(stage.resident)))
            else:
                idx = [i for i, u in enumerate(stage.resident.uids) if u in keep_uids]
                removed = len(stage.resident) - len(idx)
                if stage is not last:
                    self.nodes_pruned_in_flight += removed
                if removed and not idx and stage is not last:
                    flush_depth += 1
            if not idx:
                outgoing.append(None)
                continue
            outgoing.append(
                LevelPayload(
                    uids=tuple(stage.resident.uids[i] for i in idx),
                    tokens=tuple(stage.resident.tokens[i] for i in idx),
                    positions=tuple(stage.resident.positions[i] for i in idx),
                    ancestors=tuple(stage.resident.ancestors[i] for i in idx),
                    embeddings=stage.out[idx],
                    kv_cached=stage.resident.kv_cached,
                )
            )

        # the new level for stage 1: what survived of the fed layer, or the
        # verified token itself as a degenerate chain (Alg. "pipeline stall")
        new_level: LevelPayload | None = None
        if verified_token is None:
            if not stalled:
                new_level = self._payload_for_level(self.tree.num_levels - 1)
        elif hit:
            fed_survived = (not stalled) and self.tree.num_levels == fed_levels_before
            if fed_survived:
                new_level = self._payload_for_level(self.tree.num_levels - 1)
            else:
                bottom = tree_mod.bottom_level(self.tree)[0]
                self.tree = tree_mod.layer_append(
                    self.tree, [(bottom, verified_token, 1.0)]
                )
                uid = self.tree.uids[-1]
                parent_uid = self.tree.uids[bottom]
                self.node_pos[uid] = self.node_pos[parent_uid] + 1
                new_level = self._payload_for_level(self.tree.num_levels - 1)
        else:
            # flush: the fresh root must traverse the pipeline
            new_level = self._payload_for_level(0, kv_cached=False)

        transmit_ms = {}
        for stage, payload in zip(self.stages, outgoing):
            if stage is last:
                size = len(new_level) if new_level is not None else 0
            else:
                size = len(payload) if payload is not None else 0
            transmit_ms[stage.stage_id] = self.pcfg.cost_model.transmit_ms(size)

        for i in range(len(self.stages) - 1, 0, -1):
            self.stages[i].resident = outgoing[i - 1]
        self.stages[0].resident = new_level
        if new_level is not None:
            self.nodes_injected += len(new_level)
        for stage in self.stages:
            stage.out = None

        # timing
        prune_ms = {
            s.stage_id: (self.pcfg.cost_model.prune_ms if pruned else 0.0) for s in self.stages
        }
        stage_totals = {}
        for s in self.stages:
            c, p, t = compute_ms[s.stage_id], prune_ms[s.stage_id], transmit_ms[s.stage_id]
            stage_totals[s.stage_id] = c + (max(p, t) if self.pcfg.async_overlap else p + t)
        step_ms = max(stage_totals.values())
        draft_ms = self.pcfg.cost_model.draft_ms
        step_ms += max(0.0, draft_ms - step_ms)  # draft time is covered unless it dominates

        if self.collect_trace:
            for s in self.stages:
                base = self.clock_ms
                c, p, t = compute_ms[s.stage_id], prune_ms[s.stage_id], transmit_ms[s.stage_id]
                resident = len(s.resident) if s.resident is not None else 0
                if c == 0.0 and p == 0.0 and t == 0.0:
                    self._trace(self.step_no, s.stage_id, "idle", base, base + step_ms, resident, hit, flush_depth > 0)
                    continue
                if c:
                    self._trace(self.step_no, s.stage_id, "compute", base, base + c, resident, hit, flush_depth > 0)
                if p:
                    self._trace(self.step_no, s.stage_id, "prune", base + c, base + c + p, resident, hit, flush_depth > 0)
                if t:
                    t0 = base + c if self.pcfg.async_overlap else base + c + p
                    self._trace(self.step_no, s.stage_id, "transmit", t0, t0 + t, resident, hit, flush_depth > 0)
        self.clock_ms += step_ms

        if verified_token is not None:
            self.emission_steps.append(self.step_no)
            self.emission_clocks.append(self.clock_ms)

        self._check_conservation()
        return StepOutcome(
            verified_token=verified_token,
            hit=hit,
            flush_depth=flush_depth,
            emitted=verified_token is not None,
            stalled=stalled,
            timings={
                s.stage_id: {
                    "compute": compute_ms[s.stage_id],
                    "prune": prune_ms[s.stage_id],
                    "transmit": transmit_ms[s.stage_id],
                }
                for s in self.stages
            },
            step_ms=step_ms,
        )

    def decode_step(self) -> StepOutcome:
        """Ask the token source for a level, then step.

        A transient source failure becomes a stall; trace exhaustion
        propagates so the run loop can stop cleanly.
        """
        if self.draft is None:
            raise ConfigError("runner has no draft provider")
        children = None
        try:
            children = expand_fixed_width(
                self.tree, self.beam, self.draft, tuple(self.verified), step=self.step_no + 1
            )
        except DraftExhausted:
            raise
        except SourceUnavailable:
            children = None
        return self.step(children)

    def refill(self) -> int:
        """Step until every stage holds a resident; returns steps taken."""
        taken = 0
        limit = 2 * self.pcfg.num_stages + 2
        while not self.all_stages_occupied():
            if taken >= limit:
                raise InvariantViolation("refill did not converge")
            self.decode_step()
            taken += 1
        return taken

    # --- bookkeeping -----------------------------------------------------

    def _check_conservation(self) -> None:
        in_flight = self.in_flight_nodes()
        if self.nodes_injected != self.nodes_exited + self.nodes_pruned_in_flight + in_flight:
            raise InvariantViolation(
                f"node ledger broken: injected={self.nodes_injected} "
                f"exited={self.nodes_exited} pruned={self.nodes_pruned_in_flight} "
                f"in_flight={in_flight}"
            )

    def _trace(self, step, stage, phase, start, end, resident, hit, flush) -> None:
        if not self.collect_trace:
            return
        self.trace_rows.append(
            {
                "step": step,
                "stage": stage,
                "phase": phase,
                "start_ms": round(start, 6),
                "end_ms": round(end, 6),
                "resident_nodes": resident,
                "hit": int(hit),
                "flush": int(flush),
            }
        )

    def metrics(self) -> RunMetrics:
        tokens = len(self.emitted)
        clocks = self.emission_clocks
        tbts = np.diff([self.decode_start_ms] + clocks) if clocks else np.array([])
        steps = self.emission_steps
        if len(steps) >= 2:
            spt = float(np.mean(np.diff(steps)))
        elif len(steps) == 1:
            spt = float(steps[0])
        else:
            spt = 0.0
        verifications = self.hits + self.misses
        decode_ms = self.clock_ms - self.decode_start_ms
        return RunMetrics(
            tbt_mean_ms=float(tbts.mean()) if tbts.size else 0.0,
            tbt_p50=float(np.percentile(tbts, 50)) if tbts.size else 0.0,
            tbt_p99=float(np.percentile(tbts, 99)) if tbts.size else 0.0,
            steps_per_token=spt,
            hit_rate=self.hits / verifications if verifications else 0.0,
            flush_count=self.misses,
            throughput_tps=tokens / (decode_ms / 1000.0) if decode_ms > 0 else 0.0,
            tokens=tokens,
            decode_steps=self.step_no,
            stalls=self.stall_steps,
        )

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()


@dataclass
class RunResult:
    tokens: list[int]
    metrics: RunMetrics
    trace: list[dict]


def run(
    model: ToyModel,
    pcfg: PipelineConfig,
    beam: BeamConfig,
    draft: DraftProvider,
    prompt: list[int],
    max_tokens: int,
    collect_trace: bool = True,
) -> RunResult:
    """Decode ``max_tokens`` greedy tokens; lossless w.r.t. the sequential oracle."""
    if pcfg.mode == "vanilla_pp":
        return run_vanilla(model, pcfg, prompt, max_tokens, collect_trace=collect_trace)
    bind = getattr(draft, "bind_reference", None)
    if bind is not None:
        reference = sequential_decode(model, prompt, max_tokens)
        bind(tuple(prompt) + tuple(reference))
    runner = PipelineRunner(model, pcfg, beam, draft, collect_trace=collect_trace)
    try:
        runner.prefill(prompt)
        while len(runner.emitted) < max_tokens:
            try:
                runner.decode_step()
            except DraftExhausted:
                break  # clean early stop with partial metrics
        return RunResult(list(runner.emitted), runner.metrics(), runner.trace_rows)
    finally:
        runner.close()


def run_vanilla(
    model: ToyModel,
    pcfg: PipelineConfig,
    prompt: list[int],
    max_tokens: int,
    collect_trace: bool = True,
) -> RunResult:
    """Reference mode: plain pipeline parallelism, one token in flight."""
    runner = PipelineRunner(model, pcfg, BeamConfig(w=1, k=2), draft=None, collect_trace=collect_trace)
    runner.prefill(prompt)
    runner.stages[0].resident = None  # vanilla mode drives the stages itself
    cost = pcfg.cost_model
    pos = len(prompt) - 1
    # the last prompt token's final embedding: recompute it through the stages
    x = model.embed(prompt[-1], pos)
    for stage in runner.stages:
        rows = [i for i in range(len(stage.kv)) if stage.kv.positions[i] != pos]
        x = model.forward_position(
            x, stage.kv, rows, layer_range=stage.layer_range, append=False, position=pos
        )
        runner.step_no += 1
        c = step_cost(cost, 1)
        runner._trace(runner.step_no, stage.stage_id, "compute", runner.clock_ms, runner.clock_ms + c, 1, False, False)
        runner.clock_ms += c
    token = model.greedy_token(x)
    emitted: list[int] = []
    while len(emitted) < max_tokens:
        emitted.append(token)
        runner.emission_steps.append(runner.step_no)
        runner.emission_clocks.append(runner.clock_ms)
        if len(emitted) == max_tokens:
            break
        pos += 1
        x = model.embed(token, pos)
        for stage in runner.stages:
            rows = list(range(len(stage.kv)))
            x = model.forward_position(
                x, stage.kv, rows, layer_range=stage.layer_range,
                append=True, uid=-1, position=pos, prefix=True,
            )
            runner.step_no += 1
            c = step_cost(cost, 1) + cost.transmit_ms(1)
            runner._trace(runner.step_no, stage.stage_id, "compute", runner.clock_ms, runner.clock_ms + c, 1, False, False)
            runner.clock_ms += c
        token = model.greedy_token(x)
    runner.emitted = emitted
    return RunResult(emitted, runner.metrics(), runner.trace_rows)
