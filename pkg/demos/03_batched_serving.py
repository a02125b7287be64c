"""Serve a small multi-request workload with ragged batching.

Each request keeps its own tree and caches; a fixed total speculation
width is split across whoever is active. Every output still equals the
request's solo greedy decode.
"""

import numpy as np

import treepipe as tp
from treepipe.batching import BatchConfig, Request, serve

model = tp.init_model(tp.ToyModelConfig(vocab=64, hidden=16, layers=4, seed=7))
rng = np.random.default_rng(12)
requests = [
    Request(
        request_id=i,
        arrival_tick=i,
        prompt=tuple(int(t) for t in rng.integers(0, 64, size=2 + i % 3)),
        max_new_tokens=8,
    )
    for i in range(6)
]

for batch_size in (1, 2, 4):
    metrics, slots = serve(
        model,
        tp.PipelineConfig(num_stages=2),
        BatchConfig(max_batch=batch_size, total_width=8, k=4),
        requests,
    )
    lossless = all(
        slot.runner.emitted
        == tp.sequential_decode(model, list(slot.request.prompt), slot.request.max_new_tokens)
        for slot in slots
    )
    print(
        f"B={batch_size}: {metrics.tokens} tokens in {metrics.ticks} ticks"
        f" ({metrics.clock_ms:.0f} ms) -> {metrics.throughput_tps:.1f} tok/s,"
        f" lossless={lossless}"
    )
