"""End-to-end acceptance suite.

Each test covers one numbered criterion and prints a single PASS line on
success (pytest reports the failure otherwise).  Tolerances are stated
inline; losslessness and steady-state cadence checks are exact.
"""

import json

import numpy as np
import pytest

import treepipe as tp
from treepipe.batching import BatchConfig, Request, serve
from treepipe.model import KvCache, forward_tree
from treepipe.pipeline import PipelineRunner
from treepipe.token_source import expand_fixed_width


def report(n, name):
    print(f"ACCEPTANCE {n} ({name}): PASS")


def make_draft(miss_prob, top1, seed, vocab):
    return tp.SyntheticDraft(
        tp.SyntheticDraftConfig(
            top1_hit=min(top1, 1.0 - miss_prob), rank_decay=0.5,
            miss_prob=miss_prob, seed=seed,
        ),
        vocab,
    )


def test_1_losslessness():
    """>=200 (model seed, prompt, draft config) triples, miss_prob in
    {0, 0.05, 0.5, 1}; pipeline output must equal the sequential oracle
    token for token.  Zero tolerance."""
    rng = np.random.default_rng(2024)
    miss_probs = [0.0, 0.05, 0.5, 1.0]
    triples = 0
    for model_seed in range(20):
        model = tp.init_model(
            tp.ToyModelConfig(vocab=64, hidden=32, layers=8, seed=model_seed)
        )
        for j in range(10):
            prompt = [int(t) for t in rng.integers(0, 64, size=int(rng.integers(1, 5)))]
            miss = miss_probs[(model_seed + j) % 4]
            draft = make_draft(miss, 0.7, int(rng.integers(1 << 30)), 64)
            stages = int(rng.choice([2, 4]))
            reference = tp.sequential_decode(model, prompt, 128)
            draft.bind_reference(tuple(prompt) + tuple(reference))
            runner = PipelineRunner(
                model, tp.PipelineConfig(num_stages=stages),
                tp.BeamConfig(w=2, k=2), draft, collect_trace=False,
            )
            runner.prefill(prompt)
            while len(runner.emitted) < 128:
                runner.decode_step()
            assert runner.emitted == reference, (
                f"divergence at model_seed={model_seed} prompt={prompt} miss={miss}"
            )
            triples += 1
    assert triples == 200
    report(1, "losslessness over 200 random triples")


def random_tree(rng, vocab, max_nodes):
    tree = tp.new_root(int(rng.integers(vocab)), vocab)
    while tree.size < max_nodes:
        lo, hi = tree.level_bounds(tree.num_levels - 1)
        children = []
        for parent in range(lo, hi):
            for prob in sorted(rng.random(int(rng.integers(0, 4))), reverse=True):
                children.append((parent, int(rng.integers(vocab)), float(prob)))
        children = children[: max_nodes - tree.size]
        if not children or rng.random() < 0.1:
            break
        tree = tp.layer_append(tree, children)
    return tree


def test_2_tree_mask_correctness():
    """>=1000 random trees (n <= 200): every leaf's tree-forward output
    equals a from-scratch causal forward along its root path (<= 1e-9),
    and the mask equals a parent-pointer reconstruction exactly."""
    cfg = tp.ToyModelConfig(vocab=16, hidden=8, layers=2, seed=1)
    model = tp.init_model(cfg)
    rng = np.random.default_rng(7)
    prompt = [3, 11]
    checked_leaves = 0
    for case in range(1000):
        max_nodes = int(rng.choice([8, 16, 32, 64, 200], p=[0.35, 0.3, 0.2, 0.1, 0.05]))
        tree = random_tree(rng, cfg.vocab, max_nodes)

        # mask oracle: parent pointers only
        n = tree.size
        expected = np.zeros((n, n), dtype=bool)
        for i in range(n):
            j = i
            expected[i, i] = True
            while (p := tree.parent_of(j)) is not None:
                expected[i, p] = True
                j = p
        assert np.array_equal(tree.mask, expected)

        if case % 25 != 0:
            continue  # forward check on a systematic subsample, leaves intact

        # forward the whole tree over a shared cache
        cache = KvCache(cfg.layers, cfg.hidden)
        for pos, token in enumerate(prompt):
            model.forward_position(
                model.embed(token, pos), cache, list(range(len(cache))),
                uid=-1, position=pos, prefix=True,
            )
        base = len(prompt)
        nodes = [
            (
                100 + i,
                int(tree.tokens[i]),
                base + tree.depth_of(i),
                frozenset(100 + int(j) for j in np.flatnonzero(tree.mask[i])[:-1]),
            )
            for i in range(n)
        ]
        outputs = forward_tree(model, cache, nodes)

        # per-leaf causal oracle: fresh cache, root path as a plain sequence
        is_parent = tree.mask[:, :].sum(axis=0) > 1
        leaves = [i for i in range(n) if not is_parent[i]]
        for leaf in leaves:
            path = [int(j) for j in np.flatnonzero(tree.mask[leaf])]
            solo = KvCache(cfg.layers, cfg.hidden)
            x = None
            for pos, token in enumerate(prompt + [int(tree.tokens[j]) for j in path]):
                x = model.forward_position(
                    model.embed(token, pos), solo, list(range(len(solo))),
                    uid=-1, position=pos, prefix=True,
                )
            assert np.max(np.abs(outputs[leaf] - x)) <= 1e-9
            checked_leaves += 1
    assert checked_leaves > 50
    report(2, "tree-mask forward vs per-path oracle, 1000 trees")


def test_3_kv_prune_correctness():
    """Random reroot prunes with the ancestors-or-descendants keep rule:
    surviving K/V rows equal a from-scratch recompute (<= 1e-9) and the
    verified prefix is never dropped (hard assertion)."""
    cfg = tp.ToyModelConfig(vocab=16, hidden=8, layers=2, seed=2)
    model = tp.init_model(cfg)
    rng = np.random.default_rng(11)
    prompt = [5, 1, 9]
    for case in range(40):
        tree = random_tree(rng, cfg.vocab, 40)
        cache = KvCache(cfg.layers, cfg.hidden)
        for pos, token in enumerate(prompt):
            model.forward_position(
                model.embed(token, pos), cache, list(range(len(cache))),
                uid=-1, position=pos, prefix=True,
            )
        base = len(prompt)

        def node_tuple(t, i, offset=0):
            return (
                t.uids[i],
                int(t.tokens[i]),
                base + offset + t.depth_of(i),
                frozenset(t.uids[int(j)] for j in np.flatnonzero(t.mask[i])[:-1]),
            )

        forward_tree(model, cache, [node_tuple(tree, i) for i in range(tree.size)])
        prefix_rows = [i for i, p in enumerate(cache.prefix_flags) if p]
        assert prefix_rows == list(range(len(prompt)))

        # chained reroot prunes; verified chains accumulate like the
        # pipeline's prefix promotion, keeping ancestor closure intact
        current = tree
        chains: set[int] = set()
        for _ in range(int(rng.integers(1, 3))):
            if current.size == 1:
                break
            target = int(rng.integers(1, current.size))
            chains |= {current.uids[int(j)] for j in tp.mask_row(current, target).indices()}
            current, _ = tp.to_subtree_prune(current, target)
            keep = set(current.uids) | chains  # row-or-column rule
            tp.kv_prune(cache, keep)

        # prefix must have survived every prune
        assert [i for i, p in enumerate(cache.prefix_flags) if p] == list(range(len(prompt)))

        # from-scratch recompute of exactly the kept speculative rows
        fresh = KvCache(cfg.layers, cfg.hidden)
        for pos, token in enumerate(prompt):
            model.forward_position(
                model.embed(token, pos), fresh, list(range(len(fresh))),
                uid=-1, position=pos, prefix=True,
            )
        kept_uids = [u for u in cache.uids if u != -1]
        index_of = {u: i for i, u in enumerate(tree.uids)}
        for uid in kept_uids:
            i = index_of[uid]
            node = (uid, int(tree.tokens[i]), base + tree.depth_of(i),
                    frozenset(tree.uids[int(j)] for j in np.flatnonzero(tree.mask[i])[:-1]))
            forward_tree(model, fresh, [node])
        for layer in range(cfg.layers):
            got_k = cache.keys[layer][len(prompt):]
            want_rows = [fresh.uids.index(u) for u in kept_uids]
            want_k = fresh.keys[layer][want_rows]
            assert got_k.shape == want_k.shape
            assert np.max(np.abs(got_k - want_k), initial=0.0) <= 1e-9
    report(3, "KV prune keeps row-or-column rows, recompute-exact")


def test_4_renewal_cadence_formula():
    """Mean steps per token over 10^4 tokens matches 1 + (1-p)*m within
    +-5% for p in {0.8, 0.9, 0.95, 0.99}, m in {4, 8, 16}."""
    for p in (0.8, 0.9, 0.95, 0.99):
        for m in (4, 8, 16):
            stats = tp.simulate_cadence(p, m, tokens=10_000, seed=1234 + m)
            expected = 1 + (1 - p) * m
            assert stats.steps_per_token == pytest.approx(expected, rel=0.05), (p, m)
    report(4, "steps/token == 1 + (1-p)m within 5%, 12 combos")


def test_5_throughput_brackets():
    """Perfect draft: exactly one step per token after the m-step fill.
    Hopeless draft: exactly m steps per token, the vanilla-PP cadence."""
    model = tp.init_model(tp.ToyModelConfig(vocab=48, hidden=16, layers=8, seed=4))
    for m in (2, 4, 8):
        pcfg = tp.PipelineConfig(num_stages=m)
        perfect = tp.SyntheticDraft(
            tp.SyntheticDraftConfig(top1_hit=1.0, miss_prob=0.0), 48
        )
        res = tp.run(model, pcfg, tp.BeamConfig(w=2, k=2), perfect, [1, 2], 32,
                     collect_trace=False)
        assert res.metrics.steps_per_token == 1.0, m
        hopeless = tp.SyntheticDraft(
            tp.SyntheticDraftConfig(top1_hit=0.0, rank_decay=0.0, miss_prob=1.0), 48
        )
        res = tp.run(model, pcfg, tp.BeamConfig(w=2, k=2), hopeless, [1, 2], 32,
                     collect_trace=False)
        assert res.metrics.steps_per_token == float(m), m
        van = tp.run_vanilla(model, pcfg, [1, 2], 32, collect_trace=False)
        assert van.metrics.steps_per_token == float(m), m
    report(5, "steps/token: perfect=1.0, hopeless=m, vanilla=m (exact)")


class FixedDraft:
    def __init__(self, table):
        self.table = table

    def propose(self, context, k, *, step=0, frontier_node=0):
        return self.table[frontier_node][:k]


def test_6_fixed_width_optimality():
    """expand_fixed_width equals exhaustive cumulative-probability sort
    over all frontier x k candidates, 1000 random instances, exact."""
    vocab = 64
    rng = np.random.default_rng(21)
    for _ in range(1000):
        tree = tp.new_root(0, vocab)
        for _ in range(int(rng.integers(1, 3))):
            lo, hi = tree.level_bounds(tree.num_levels - 1)
            children = []
            for parent in range(lo, hi):
                for prob in sorted(rng.random(int(rng.integers(1, 3))), reverse=True):
                    children.append((parent, int(rng.integers(vocab)), float(prob)))
            tree = tp.layer_append(tree, children[:6])
        k = int(rng.integers(2, 6))
        w = int(rng.integers(1, 9))
        lo, hi = tree.level_bounds(tree.num_levels - 1)
        table = {
            node: [
                (int(t), float(p))
                for t, p in zip(
                    rng.choice(vocab, size=k, replace=False), np.sort(rng.random(k))[::-1]
                )
            ]
            for node in range(lo, hi)
        }
        got = expand_fixed_width(tree, tp.BeamConfig(w=w, k=k), FixedDraft(table), (0,))
        pool = [
            (tp.cumulative_prob(tree, node) * p, node, t, p)
            for node in range(lo, hi)
            for t, p in table[node]
        ]
        pool.sort(key=lambda c: (-c[0], c[1], c[2]))
        expected = sorted(
            [(nd, t, p) for _, nd, t, p in pool[:w]], key=lambda c: (c[0], -c[2], c[1])
        )
        assert got == expected
    report(6, "fixed-width expansion == exhaustive top-w, 1000 instances")


def test_7_width_selection():
    """With accuracy plateauing near w=64 and quantum-64 cost leaps, the
    selected width is 64; fitted sweep curves are monotone in w."""
    cost = tp.CostModel(base_ms=40, slope_ms_per_quantum=8, quantum=64)
    widths = (1, 2, 4, 8, 16, 32, 64, 128)
    curve = tp.AccuracyCurve(widths, (0.55, 0.68, 0.80, 0.88, 0.93, 0.96, 0.99, 0.992))
    assert tp.select_width(cost, curve, 4, widths) == 64

    # a real mini-sweep at fixed k=4: isotonic fit must be monotone
    model = tp.init_model(tp.ToyModelConfig(vocab=48, hidden=8, layers=4, seed=6))
    prompt = [1, 5]
    reference = tp.sequential_decode(model, prompt, 24)
    samples = {}
    for w in (1, 2, 4):
        hits = total = 0
        for r in range(3):
            draft = make_draft(0.05, 0.6, 500 + 10 * w + r, 48)
            draft.bind_reference(tuple(prompt) + tuple(reference))
            runner = PipelineRunner(
                model, tp.PipelineConfig(num_stages=2), tp.BeamConfig(w=w, k=4),
                draft, collect_trace=False,
            )
            runner.prefill(prompt)
            while len(runner.emitted) < 24:
                runner.decode_step()
            hits += runner.hits
            total += runner.hits + runner.misses
        samples[w] = (hits, total)
    fitted = tp.fit_accuracy_curve(samples)
    assert all(b >= a for a, b in zip(fitted.probs, fitted.probs[1:]))
    report(7, "select_width -> 64 on plateau; sweep fit monotone")


def test_8_batching_isolation():
    """B in {1, 2, 4, 8}: every request's batched output equals its solo
    oracle decode; p99 >= p50 in every report."""
    model = tp.init_model(tp.ToyModelConfig(vocab=48, hidden=8, layers=4, seed=8))
    rng = np.random.default_rng(31)
    requests = [
        Request(
            request_id=i,
            arrival_tick=int(rng.integers(0, 4)),
            prompt=tuple(int(t) for t in rng.integers(0, 48, size=2 + i % 3)),
            max_new_tokens=6 + i % 4,
        )
        for i in range(8)
    ]
    for b in (1, 2, 4, 8):
        _, slots = serve(
            model,
            tp.PipelineConfig(num_stages=2),
            BatchConfig(max_batch=b, total_width=8, k=4),
            requests,
        )
        assert len(slots) == len(requests)
        for slot in slots:
            reference = tp.sequential_decode(
                model, list(slot.request.prompt), slot.request.max_new_tokens
            )
            assert slot.runner.emitted == reference, (b, slot.request.request_id)
            met = slot.runner.metrics()
            assert met.tbt_p99 >= met.tbt_p50
    report(8, "batched outputs == solo oracle for B in {1,2,4,8}; p99>=p50")


def test_9_determinism():
    """Identical configs give byte-identical tokens, metrics (timestamps
    excluded by construction) and traces, in both execution modes."""
    model = tp.init_model(tp.ToyModelConfig(vocab=48, hidden=8, layers=4, seed=9))

    def one(execution):
        draft = make_draft(0.1, 0.7, 77, 48)
        res = tp.run(
            model, tp.PipelineConfig(num_stages=3, execution=execution),
            tp.BeamConfig(w=3, k=3), draft, [2, 4], 32,
        )
        return json.dumps(
            {"tokens": res.tokens, "metrics": res.metrics.to_json(), "trace": res.trace}
        ).encode()

    single_a = one("single")
    single_b = one("single")
    workers = one("workers")
    assert single_a == single_b == workers
    report(9, "byte-identical reruns, single and worker execution")
