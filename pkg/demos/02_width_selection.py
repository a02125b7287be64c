"""Why the best tree width sits at the edge of a cost quantum.

Step cost is a staircase: flat up to the batching quantum (64 nodes),
then it leaps. Accuracy keeps creeping up with width but plateaus.
Expected time between tokens combines both, so the minimum lands on the
widest width inside the first quantum.
"""

import treepipe as tp

cost = tp.CostModel(base_ms=40, slope_ms_per_quantum=8, quantum=64)
widths = (1, 2, 4, 8, 16, 32, 64, 128, 256)
probs = (0.55, 0.68, 0.80, 0.88, 0.93, 0.96, 0.99, 0.992, 0.993)
curve = tp.AccuracyCurve(widths, probs)
m = 4  # pipeline stages

print(f"{'w':>4}  {'step ms':>8}  {'P(hit)':>7}  {'E[TBT] ms':>10}")
for w in widths:
    t = tp.step_cost(cost, w)
    e = tp.expected_tbt_uniform(t, curve(w), m)
    print(f"{w:>4}  {t:>8.1f}  {curve(w):>7.3f}  {e:>10.2f}")

best = tp.select_width(cost, curve, m, widths)
print(f"\nselected width: {best}")

print("\nMonte-Carlo check of the cadence formula (p=0.95, m=4):")
stats = tp.simulate_cadence(0.95, 4, tokens=100_000, seed=0)
print(f"measured steps/token {stats.steps_per_token:.3f}  vs analytic {1 + 0.05 * 4:.3f}")
