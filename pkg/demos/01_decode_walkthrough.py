"""Walk through one speculative pipelined decode, step by step.

Shows the speculative tree growing and shrinking, hits rerooting it,
misses flushing it, and the final output matching the plain greedy
decode exactly.
"""

import treepipe as tp
from treepipe.pipeline import PipelineRunner

model = tp.init_model(tp.ToyModelConfig(vocab=64, hidden=16, layers=4, seed=7))
prompt = [3, 41, 8]
max_tokens = 16

reference = tp.sequential_decode(model, prompt, max_tokens)
print("greedy oracle:", reference)

draft = tp.SyntheticDraft(
    tp.SyntheticDraftConfig(top1_hit=0.7, rank_decay=0.5, miss_prob=0.1, seed=1),
    model.cfg.vocab,
)
draft.bind_reference(tuple(prompt) + tuple(reference))

runner = PipelineRunner(
    model, tp.PipelineConfig(num_stages=4), tp.BeamConfig(w=3, k=3), draft
)
runner.prefill(prompt)
print(f"\nprefilled {len(prompt)} tokens into 4 stages; decoding:\n")

while len(runner.emitted) < max_tokens:
    outcome = runner.decode_step()
    event = "  "
    if outcome.emitted:
        event = f"emit {outcome.verified_token:3d} " + ("hit" if outcome.hit else "MISS -> flush")
    print(
        f"step {runner.step_no:3d}  tree={runner.tree.size:3d} nodes"
        f"/{runner.tree.num_levels} levels  in-flight={runner.in_flight_nodes():2d}  {event}"
    )

print("\npipeline output:", runner.emitted)
print("lossless:", runner.emitted == reference)
m = runner.metrics()
print(f"steps/token={m.steps_per_token:.2f}  hit_rate={m.hit_rate:.2f}  flushes={m.flush_count}")
