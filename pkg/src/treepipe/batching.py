"""Multi-request scheduling over the speculative pipeline.

Concurrent requests are decoded together: each tick every active request
advances one pipeline step, and per-stage work is costed on the combined
(ragged) level the stage would process.  Requests stay fully isolated:
every request owns its tree, KV caches and draft stream, and the
combined attention mask is block-diagonal by construction (and checked).

Admission is FIFO with at most ``max_batch`` requests in flight; a fixed
total tree width is split evenly across active requests, with the
remainder going to the oldest, so speculation degrades gracefully under
load instead of overflowing the compute quantum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, InvariantViolation, TraceParseError
from .model import ToyModel, sequential_decode
from .perf import CostModel, step_cost
from .pipeline import PipelineConfig, PipelineRunner
from .token_source import BeamConfig, SyntheticDraft, SyntheticDraftConfig


@dataclass(frozen=True)
class Request:
    request_id: int
    arrival_tick: int
    prompt: tuple[int, ...]
    max_new_tokens: int

    def __post_init__(self):
        if self.arrival_tick < 0 or self.max_new_tokens < 1 or not self.prompt:
            raise ConfigError("request needs arrival >= 0, a prompt and >= 1 new tokens")


def load_workload(path: str, vocab_size: int, seed: int = 0) -> list[Request]:
    """Read a workload: one JSON object per line.

    ``prompt_tokens`` may be an explicit token list or a count, in which
    case tokens are drawn deterministically from (seed, line number).
    """
    requests = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(str(exc), lineno) from exc
            try:
                raw = rec["prompt_tokens"]
                if isinstance(raw, int):
                    rng = np.random.default_rng([seed, lineno])
                    prompt = tuple(int(t) for t in rng.integers(0, vocab_size, size=raw))
                else:
                    prompt = tuple(int(t) for t in raw)
                requests.append(
                    Request(
                        request_id=len(requests),
                        arrival_tick=int(rec["arrival_step"]),
                        prompt=prompt,
                        max_new_tokens=int(rec["max_new_tokens"]),
                    )
                )
            except (KeyError, TypeError, ValueError, ConfigError) as exc:
                raise TraceParseError(f"bad workload record: {exc}", lineno) from exc
    return requests


@dataclass(frozen=True)
class RaggedBatch:
    """Concatenated per-request node sets with a combined attention mask."""

    offsets: tuple[int, ...]  # len = requests + 1; offsets[-1] == total nodes
    request_ids: tuple[int, ...]  # per node
    uids: tuple[int, ...]  # per node
    mask: np.ndarray  # bool (n, n): node i may attend to node j

    @property
    def size(self) -> int:
        return int(self.offsets[-1])


def pack_stage(slots: list["RequestSlot"], stage_index: int) -> RaggedBatch:
    """Combine one stage's resident levels across requests.

    Within a request, node i may attend to node j when j is an in-level
    ancestor-or-self of i; across requests nothing is shared, which makes
    the combined mask block-diagonal in the request offsets.
    """
    offsets = [0]
    request_ids: list[int] = []
    uids: list[int] = []
    ancestors: list[frozenset] = []
    for slot in slots:
        resident = slot.runner.stages[stage_index].resident
        count = len(resident) if resident is not None else 0
        offsets.append(offsets[-1] + count)
        if resident is not None:
            request_ids.extend([slot.request.request_id] * count)
            uids.extend(resident.uids)
            ancestors.extend(resident.ancestors)
    n = offsets[-1]
    mask = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            if request_ids[i] == request_ids[j] and (i == j or uids[j] in ancestors[i]):
                mask[i, j] = True
    return RaggedBatch(tuple(offsets), tuple(request_ids), tuple(uids), mask)


def check_isolation(batch: RaggedBatch) -> None:
    """Raise unless the combined mask is block-diagonal in the offsets."""
    for a, b in zip(batch.offsets, batch.offsets[1:]):
        block = batch.mask[a:b]
        if np.any(block[:, :a]) or np.any(block[:, b:]):
            raise InvariantViolation("attention crosses a request boundary")
    ids = np.asarray(batch.request_ids)
    if np.any(batch.mask[ids[:, None] != ids[None, :]]):
        raise InvariantViolation("attention links nodes of different requests")


@dataclass(frozen=True)
class BatchConfig:
    max_batch: int = 4
    total_width: int = 8
    k: int = 4
    draft: SyntheticDraftConfig = field(default_factory=SyntheticDraftConfig)
    check_isolation_every_tick: bool = True

    def __post_init__(self):
        if self.max_batch < 1 or self.total_width < 1 or self.k < 2:
            raise ConfigError("need max_batch >= 1, total_width >= 1, k >= 2")


def split_width(total: int, active: int) -> list[int]:
    """Even split of the width budget; remainder goes to the oldest slots."""
    if active < 1:
        return []
    base, rem = divmod(total, active)
    return [max(1, base + (1 if i < rem else 0)) for i in range(active)]


@dataclass
class RequestSlot:
    request: Request
    runner: PipelineRunner
    admitted_tick: int
    finished_tick: int | None = None
    first_token_tick: int | None = None

    @property
    def done(self) -> bool:
        return len(self.runner.emitted) >= self.request.max_new_tokens


@dataclass
class BatchMetrics:
    throughput_tps: float
    tokens: int
    ticks: int
    clock_ms: float
    completed: int
    mean_wait_ticks: float
    per_request: list[dict]

    def to_json(self) -> dict:
        return asdict(self)


class BatchScheduler:
    """Tick-driven multi-request decoding loop."""

    def __init__(self, model: ToyModel, pcfg: PipelineConfig, bcfg: BatchConfig):
        if pcfg.mode != "specpipe":
            raise ConfigError("batched serving requires the speculative mode")
        self.model = model
        self.pcfg = pcfg
        self.bcfg = bcfg
        self.queue: list[Request] = []
        self.active: list[RequestSlot] = []
        self.finished: list[RequestSlot] = []
        self.tick_no = 0
        self.clock_ms = 0.0

    def submit(self, request: Request) -> None:
        self.queue.append(request)

    def _admit(self) -> None:
        # FIFO admission; a fresh request spends its first tick on prefill
        # and joins the decode cohort afterwards (prefill priority).
        while self.queue and len(self.active) < self.bcfg.max_batch:
            if self.queue[0].arrival_tick > self.tick_no:
                break
            request = self.queue.pop(0)
            draft = SyntheticDraft(
                SyntheticDraftConfig(
                    top1_hit=self.bcfg.draft.top1_hit,
                    rank_decay=self.bcfg.draft.rank_decay,
                    miss_prob=self.bcfg.draft.miss_prob,
                    seed=self.bcfg.draft.seed + request.request_id,
                ),
                self.model.cfg.vocab,
            )
            reference = sequential_decode(
                self.model, list(request.prompt), request.max_new_tokens
            )
            draft.bind_reference(request.prompt + tuple(reference))
            runner = PipelineRunner(
                self.model,
                self.pcfg,
                BeamConfig(w=1, k=self.bcfg.k),
                draft,
                collect_trace=False,
            )
            runner.prefill(list(request.prompt))
            self.clock_ms += step_cost(self.pcfg.cost_model, len(request.prompt))
            self.active.append(RequestSlot(request, runner, admitted_tick=self.tick_no))

    def tick(self) -> int:
        """Advance every active request one pipeline step; returns tokens emitted."""
        self._admit()
        if not self.active:
            self.tick_no += 1
            return 0
        widths = split_width(self.bcfg.total_width, len(self.active))
        if self.bcfg.check_isolation_every_tick:
            for stage_index in range(self.pcfg.num_stages):
                check_isolation(pack_stage(self.active, stage_index))
        # per-stage cost of the combined ragged level, before stepping
        stage_sizes = [
            sum(
                len(s.runner.stages[i].resident)
                for s in self.active
                if s.runner.stages[i].resident is not None
            )
            for i in range(self.pcfg.num_stages)
        ]
        tick_ms = max(
            step_cost(self.pcfg.cost_model, max(1, size)) for size in stage_sizes
        ) + self.pcfg.cost_model.transmit_ms(max(1, sum(stage_sizes)))

        emitted = 0
        for slot, width in zip(self.active, widths):
            slot.runner.beam = BeamConfig(w=width, k=min(self.bcfg.k, max(2, width + 1)))
            outcome = slot.runner.decode_step()
            if outcome.emitted:
                emitted += 1
                if slot.first_token_tick is None:
                    slot.first_token_tick = self.tick_no
        self.clock_ms += tick_ms
        for slot in list(self.active):
            if slot.done:
                slot.finished_tick = self.tick_no
                self.active.remove(slot)
                self.finished.append(slot)
        self.tick_no += 1
        return emitted

    def run(self, max_ticks: int = 100_000) -> BatchMetrics:
        self.queue.sort(key=lambda r: (r.arrival_tick, r.request_id))
        while (self.queue or self.active) and self.tick_no < max_ticks:
            self.tick()
        if self.queue or self.active:
            raise InvariantViolation(f"workload did not drain within {max_ticks} ticks")
        return self.metrics()

    def metrics(self) -> BatchMetrics:
        tokens = sum(len(s.runner.emitted) for s in self.finished)
        waits = [s.admitted_tick - s.request.arrival_tick for s in self.finished]
        return BatchMetrics(
            throughput_tps=tokens / (self.clock_ms / 1000.0) if self.clock_ms > 0 else 0.0,
            tokens=tokens,
            ticks=self.tick_no,
            clock_ms=self.clock_ms,
            completed=len(self.finished),
            mean_wait_ticks=float(np.mean(waits)) if waits else 0.0,
            per_request=[
                {
                    "request_id": s.request.request_id,
                    "arrival_tick": s.request.arrival_tick,
                    "admitted_tick": s.admitted_tick,
                    "first_token_tick": s.first_token_tick,
                    "finished_tick": s.finished_tick,
                    "tokens": len(s.runner.emitted),
                }
                for s in self.finished
            ],
        )


def serve(
    model: ToyModel,
    pcfg: PipelineConfig,
    bcfg: BatchConfig,
    requests: list[Request],
    max_ticks: int = 100_000,
) -> tuple[BatchMetrics, list[RequestSlot]]:
    scheduler = BatchScheduler(model, pcfg, bcfg)
    for request in requests:
        scheduler.submit(request)
    metrics = scheduler.run(max_ticks=max_ticks)
    return metrics, scheduler.finished
