"""Command-line front end.

Subcommands: ``decode`` (single request, optionally checked against the
sequential oracle), ``sweep`` (width calibration and selection),
``serve`` (multi-request workload), ``replay`` (re-run a recorded draft
trace) and ``validate`` (check configs and serialized artifacts).

Exit codes: 0 success, 1 invariant or losslessness violation, 2 usage or
configuration error.  Metric artifacts embed the fully resolved config so
a run can be reproduced from its output alone.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys

from . import tree as tree_mod
from .batching import BatchConfig, Request, load_workload, serve
from .errors import ConfigError, TraceParseError, TreePipeError
from .model import (
    ToyModelConfig,
    init_model,
    load_checkpoint,
    save_checkpoint,
    sequential_decode,
)
from .perf import (
    CostModel,
    expected_tbt_uniform,
    fit_accuracy_curve,
    select_width,
    step_cost,
)
from .pipeline import PipelineConfig, PipelineRunner, run, write_trace_csv
from .token_source import (
    BeamConfig,
    RecordingDraft,
    ReplayDraft,
    SyntheticDraft,
    SyntheticDraftConfig,
)

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_USAGE = 2

DEFAULT_CONFIG = {
    "model": {"vocab": 64, "hidden": 16, "layers": 4, "seed": 0},
    "pipeline": {"num_stages": 2, "async_overlap": True, "execution": "single"},
    "cost": {},  # CostModel defaults
    "beam": {"w": 4, "k": 4},
    "draft": {"top1_hit": 0.62, "rank_decay": 0.6, "miss_prob": 0.01, "seed": 0},
    "prompt": [1, 2, 3],
    "max_new_tokens": 32,
    "batch": {"max_batch": 4, "total_width": 8, "k": 4},
}


def load_config(path: str | None, seed: int | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        for key, value in user.items():
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r}")
            if isinstance(cfg[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"config key {key!r} must be an object")
                for sub in value:
                    if cfg[key] and sub not in cfg[key] and key != "cost":
                        raise ConfigError(f"unknown config key {key}.{sub}")
                cfg[key].update(value)
            else:
                cfg[key] = value
    if seed is not None:
        cfg["draft"]["seed"] = seed
    return cfg


def build(cfg: dict, mode: str = "specpipe"):
    try:
        model = init_model(ToyModelConfig(**cfg["model"]))
        cost = CostModel(**cfg["cost"])
        pcfg = PipelineConfig(mode=mode, cost_model=cost, **cfg["pipeline"])
        beam = BeamConfig(**cfg["beam"])
        draft_cfg = SyntheticDraftConfig(**cfg["draft"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return model, pcfg, beam, draft_cfg


def _cli_mode(mode: str) -> str:
    return {"specpipe": "specpipe", "vanilla-pp": "vanilla_pp"}[mode]


def _write_json(path: str | None, payload: dict) -> None:
    text = json.dumps(payload, indent=2)
    if path is None or path == "-":
        print(text)
    else:
        with open(path, "w") as fh:
            fh.write(text + "\n")


def cmd_decode(args) -> int:
    cfg = load_config(args.config, args.seed)
    model, pcfg, beam, draft_cfg = build(cfg, mode=_cli_mode(args.mode))
    draft = SyntheticDraft(draft_cfg, model.cfg.vocab)
    recorder = RecordingDraft(draft) if args.record_draft else None
    prompt = [int(t) for t in cfg["prompt"]]
    result = run(model, pcfg, beam, recorder or draft, prompt, int(cfg["max_new_tokens"]))
    if args.record_draft:
        recorder.save(args.record_draft)
    if args.trace_out:
        write_trace_csv(result.trace, args.trace_out)
    payload = {"config": cfg, "mode": args.mode, "metrics": result.metrics.to_json(),
               "tokens": result.tokens}
    _write_json(args.metrics_out, payload)
    if args.check_oracle:
        reference = sequential_decode(model, prompt, int(cfg["max_new_tokens"]))
        if result.tokens != reference[: len(result.tokens)]:
            print("oracle check FAILED: output diverges from greedy decode", file=sys.stderr)
            return EXIT_INVARIANT
        print("oracle check passed", file=sys.stderr)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.seed)
    model, pcfg, _, draft_cfg = build(cfg)
    widths = sorted({int(w) for w in args.widths.split(",")})
    if not widths or any(w < 1 for w in widths):
        raise ConfigError("widths must be positive integers")
    prompt = [int(t) for t in cfg["prompt"]]
    reference = sequential_decode(model, prompt, args.tokens)
    samples = {}
    measured = {}
    for w in widths:
        hits = total = 0
        spts = []
        for r in range(args.runs):
            d = SyntheticDraft(
                SyntheticDraftConfig(
                    top1_hit=draft_cfg.top1_hit,
                    rank_decay=draft_cfg.rank_decay,
                    miss_prob=draft_cfg.miss_prob,
                    seed=draft_cfg.seed + 1000 * w + r,
                ),
                model.cfg.vocab,
            )
            d.bind_reference(tuple(prompt) + tuple(reference))
            beam = BeamConfig(w=w, k=min(max(2, w), int(cfg["beam"]["k"])))
            runner = PipelineRunner(model, pcfg, beam, d, collect_trace=False)
            runner.prefill(prompt)
            while len(runner.emitted) < args.tokens:
                runner.decode_step()
            hits += runner.hits
            total += runner.hits + runner.misses
            spts.append(runner.metrics().steps_per_token)
        samples[w] = (hits, total)
        measured[w] = {"steps_per_token": sum(spts) / len(spts)}
    curve = fit_accuracy_curve(samples)
    m = pcfg.num_stages
    chosen = select_width(pcfg.cost_model, curve, m, widths)
    payload = {
        "config": cfg,
        "widths": widths,
        "accuracy_curve": curve.to_json(),
        "expected_tbt_ms": {
            str(w): expected_tbt_uniform(step_cost(pcfg.cost_model, w), curve(w), m)
            for w in widths
        },
        "measured": {str(w): measured[w] for w in widths},
        "selected_width": chosen,
    }
    _write_json(args.metrics_out, payload)
    return EXIT_OK


def cmd_serve(args) -> int:
    cfg = load_config(args.config, args.seed)
    model, pcfg, _, draft_cfg = build(cfg)
    bcfg = BatchConfig(draft=draft_cfg, **cfg["batch"])
    requests = load_workload(args.workload, model.cfg.vocab, seed=draft_cfg.seed)
    if not requests:
        raise ConfigError("workload is empty")
    metrics, slots = serve(model, pcfg, bcfg, requests)
    if args.check_oracle:
        for slot in slots:
            reference = sequential_decode(
                model, list(slot.request.prompt), slot.request.max_new_tokens
            )
            if slot.runner.emitted != reference:
                print(
                    f"oracle check FAILED for request {slot.request.request_id}",
                    file=sys.stderr,
                )
                return EXIT_INVARIANT
        print("oracle check passed for all requests", file=sys.stderr)
    _write_json(args.metrics_out, {"config": cfg, "metrics": metrics.to_json()})
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = load_config(args.config, args.seed)
    model, pcfg, beam, _ = build(cfg, mode=_cli_mode(args.mode))
    draft = ReplayDraft.from_file(args.trace)
    prompt = [int(t) for t in cfg["prompt"]]
    result = run(model, pcfg, beam, draft, prompt, int(cfg["max_new_tokens"]))
    if args.trace_out:
        write_trace_csv(result.trace, args.trace_out)
    payload = {"config": cfg, "metrics": result.metrics.to_json(), "tokens": result.tokens}
    _write_json(args.metrics_out, payload)
    if args.check_oracle:
        reference = sequential_decode(model, prompt, int(cfg["max_new_tokens"]))
        if result.tokens != reference[: len(result.tokens)]:
            print("oracle check FAILED: output diverges from greedy decode", file=sys.stderr)
            return EXIT_INVARIANT
        print("oracle check passed", file=sys.stderr)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config, args.seed)
    build(cfg)  # raises ConfigError on anything unusable
    checked = ["config"]
    if args.tree:
        with open(args.tree, "rb") as fh:
            tree = tree_mod.decode(fh.read())  # decode() validates invariants
        if tree_mod.decode(tree_mod.encode(tree)).size != tree.size:
            raise TreePipeError("tree round-trip changed the structure")
        checked.append(f"tree({tree.size} nodes)")
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        checked.append(f"checkpoint({model.cfg.param_count} params)")
    if args.draft_trace:
        from .token_source import load_trace

        records = load_trace(args.draft_trace)
        checked.append(f"draft-trace({len(records)} records)")
    print("valid:", ", ".join(checked))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treepipe", description="tree-speculative pipelined decoding testbed"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=True, oracle=True):
        p.add_argument("--config", help="JSON config file (defaults are used otherwise)")
        p.add_argument("--seed", type=int, help="override the draft seed")
        p.add_argument("--metrics-out", help="write metrics JSON here (default: stdout)")
        if mode:
            p.add_argument(
                "--mode", choices=["specpipe", "vanilla-pp"], default="specpipe"
            )
        if oracle:
            p.add_argument(
                "--check-oracle",
                action="store_true",
                help="compare output to the sequential greedy decode",
            )

    p = sub.add_parser("decode", help="decode one request")
    common(p)
    p.add_argument("--trace-out", help="write per-step stage timeline CSV here")
    p.add_argument("--record-draft", help="record draft proposals to this JSONL file")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("sweep", help="calibrate hit rate vs width and pick a width")
    common(p, mode=False, oracle=False)
    p.add_argument("--widths", default="1,2,4,8", help="comma-separated widths")
    p.add_argument("--runs", type=int, default=4, help="runs per width")
    p.add_argument("--tokens", type=int, default=32, help="tokens per run")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("serve", help="run a multi-request workload")
    common(p, mode=False)
    p.add_argument("--workload", required=True, help="JSONL workload file")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="re-run a recorded draft trace")
    common(p)
    p.add_argument("--trace", required=True, help="draft trace JSONL to replay")
    p.add_argument("--trace-out", help="write per-step stage timeline CSV here")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("validate", help="validate configs and artifacts")
    common(p, mode=False, oracle=False)
    p.add_argument("--tree", help="binary tree encoding to validate")
    p.add_argument("--checkpoint", help="model checkpoint to validate")
    p.add_argument("--draft-trace", help="draft trace JSONL to validate")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TraceParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TreePipeError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
