"""Command-line pipeline: synth -> analyze -> search -> fuse -> estimate ->
pareto -> diagnose -> train-toy, with JSON/CSV artifacts at every stage.

All randomness funnels through explicit --seed flags, so reruns on unchanged
inputs produce byte-identical artifact trees. Exit codes: 0 success, 2 bad
input or validation failure, 3 I/O failure, 4 internal invariant violation.
An optional --run-dir records a stage manifest (inputs and outputs with
content hashes) and refuses to run a stage whose declared inputs no longer
hash-match what an earlier stage produced.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import costmodel, similarity, surgery, tradeoff
from .search import search as run_search, threshold_sweep, write_sweep_csv
from .config import (
    DEFAULT_WORKLOAD,
    ModelShape,
    SearchThresholds,
    THOR_U,
    load_config,
    plan_from_json,
    plan_to_json,
    validate_thresholds,
)
from .errors import (
    D2mError,
    DivergenceDetected,
    InvalidConfig,
    IoFailure,
    NonFiniteActivation,
    NonFiniteGradient,
    VerificationFailure,
)
from .nanomodel import (
    build_toy_container,
    dense_forward,
    make_copy_stream,
    sinusoid_positions,
    POSITION_SCALE,
    train_log_from_csv,
    train_toy,
)
from .diagnostics import LayerLoadProfile, write_per_layer_csv, write_summary_csv, wta_metrics
from .traceio import read_trace, read_weights, synth_trace, write_trace, write_weights

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INVARIANT = 4


class StaleArtifact(D2mError):
    """A declared input no longer matches the hash a prior stage recorded."""


class MissingInput(D2mError):
    """A declared input file does not exist."""


# --- stage manifest ---------------------------------------------------------------


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class PipelineRun:
    """Manifest bookkeeping for one run directory."""

    def __init__(self, run_dir: Path):
        self.run_dir = run_dir
        self.path = run_dir / "manifest.json"

    def _load(self) -> dict:
        if self.path.exists():
            return json.loads(self.path.read_text(encoding="utf-8"))
        return {"stages": {}}

    def _rel(self, path: str | Path) -> str:
        return os.path.relpath(Path(path).resolve(), self.run_dir.resolve())

    def check_inputs(self, inputs: list[str | Path]) -> None:
        """Inputs must exist; any produced by an earlier stage must hash-match."""
        recorded: dict[str, str] = {}
        for stage in self._load()["stages"].values():
            recorded.update(stage.get("outputs", {}))
        for path in inputs:
            rel = self._rel(path)
            if rel in recorded and recorded[rel] != _sha256(Path(path)):
                raise StaleArtifact(
                    f"input {path} no longer matches the hash recorded by an earlier stage"
                )

    def record(self, stage: str, inputs: list[str | Path], outputs: list[str | Path]) -> None:
        data = self._load()
        data["stages"][stage] = {
            "inputs": {self._rel(p): _sha256(Path(p)) for p in inputs},
            "outputs": {self._rel(p): _sha256(Path(p)) for p in outputs},
        }
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")


def _require_inputs(args, paths: list[str | Path]) -> None:
    for path in paths:
        if not Path(path).exists():
            raise MissingInput(f"input does not exist: {path}")
    if getattr(args, "run_dir", None):
        PipelineRun(Path(args.run_dir)).check_inputs(paths)


def _record(args, stage: str, inputs: list[str | Path], outputs: list[str | Path]) -> None:
    if getattr(args, "run_dir", None):
        PipelineRun(Path(args.run_dir)).record(stage, inputs, outputs)


# --- subcommands ---------------------------------------------------------------------


def _parse_redundant(specs: list[str]) -> list[tuple[int, int, float]]:
    entries = []
    for spec in specs:
        parts = spec.split(":")
        if len(parts) != 3:
            raise InvalidConfig(f"--redundant expects base:offset:noise, got {spec!r}")
        entries.append((int(parts[0]), int(parts[1]), float(parts[2])))
    return entries


def cmd_synth(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shape = ModelShape(
        num_layers=args.layers, hidden_dim=args.hidden, mlp_dim=args.mlp_dim,
        num_heads=args.heads, num_kv_heads=args.kv_heads, head_dim=args.head_dim,
        vocab_size=args.vocab, tied_embedding=not args.untied,
    )
    redundant = _parse_redundant(args.redundant)
    duplicates = [(base, offset) for base, offset, _ in redundant]
    model = build_toy_container(shape, seed=args.seed, weight_scale=args.weight_scale,
                                duplicate_from=duplicates)
    model_path = out_dir / "model.d2mw"
    write_weights(model, model_path)

    if args.trace_mode == "synthetic":
        trace = synth_trace(shape.num_layers, args.seq_len, shape.hidden_dim,
                            redundant, seed=args.seed)
    else:
        tokens = make_copy_stream(shape.vocab_size, args.seq_len, 1, args.seed)[0]
        x = model.tensors["embed"][tokens] + sinusoid_positions(
            args.seq_len, shape.hidden_dim, scale=POSITION_SCALE)
        _, trace = dense_forward(model, x)
    trace_path = out_dir / "trace.d2mt"
    write_trace(trace, trace_path)

    config_path = out_dir / "config.json"
    config_doc = {
        "model": {
            "num_layers": shape.num_layers, "hidden_dim": shape.hidden_dim,
            "mlp_dim": shape.mlp_dim, "num_heads": shape.num_heads,
            "num_kv_heads": shape.num_kv_heads, "head_dim": shape.head_dim,
            "vocab_size": shape.vocab_size, "tied_embedding": shape.tied_embedding,
            "moe": None,
        },
        "hardware": {"peak_flops": THOR_U.peak_flops, "mem_bandwidth": THOR_U.mem_bandwidth,
                     "weight_bytes": THOR_U.weight_bytes, "kv_bytes": THOR_U.kv_bytes},
        "workload": {"batch": DEFAULT_WORKLOAD.batch, "prompt_len": DEFAULT_WORKLOAD.prompt_len,
                     "gen_len": DEFAULT_WORKLOAD.gen_len},
    }
    config_path.write_text(json.dumps(config_doc, indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    _record(args, "synth", [], [model_path, trace_path, config_path])
    print(f"wrote {model_path}, {trace_path}, {config_path}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    _require_inputs(args, [args.trace])
    trace = read_trace(args.trace)
    matrices = similarity.build_matrices(trace, jobs=args.jobs)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = similarity.export_heatmap(matrices, out_dir)
    cache_path = out_dir / "matrices.d2ms"
    similarity.write_matrices(matrices, cache_path)
    outputs = [*paths.values(), cache_path]
    _record(args, "analyze", [args.trace], outputs)
    print(f"wrote {', '.join(str(p) for p in outputs)}")
    return EXIT_OK


def _parse_grid(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise InvalidConfig(f"bad grid {text!r}: {exc}") from exc
    if not values:
        raise InvalidConfig(f"grid {text!r} is empty")
    return values


def cmd_search(args) -> int:
    _require_inputs(args, [args.matrices])
    matrices = similarity.read_matrices(args.matrices)
    block_sizes = tuple(int(v) for v in args.block_sizes.split(","))

    if args.sweep:
        if not args.delta_grid or not args.epsilon_grid or not args.sweep_out:
            raise InvalidConfig("--sweep requires --delta-grid, --epsilon-grid, --sweep-out")
        cells = threshold_sweep(
            matrices, _parse_grid(args.delta_grid), _parse_grid(args.epsilon_grid),
            score_penalty=args.score_penalty, block_sizes=block_sizes, jobs=args.jobs)
        write_sweep_csv(cells, args.sweep_out)
        _record(args, "search", [args.matrices], [args.sweep_out])
        print(f"wrote {args.sweep_out} ({len(cells)} cells)")
        return EXIT_OK

    if args.delta is None or args.epsilon is None or not args.plan_out:
        raise InvalidConfig("plan mode requires --delta, --epsilon, --plan-out")
    thresholds = validate_thresholds(SearchThresholds(
        cos_threshold=args.delta, norm_tolerance=args.epsilon,
        score_penalty=args.score_penalty, block_sizes=block_sizes))
    plan = run_search(matrices, thresholds)
    Path(args.plan_out).write_text(plan_to_json(plan), encoding="utf-8")
    _record(args, "search", [args.matrices], [args.plan_out])
    print(f"wrote {args.plan_out} (prune {sorted(plan.prune_layers)})")
    return EXIT_OK


def cmd_fuse(args) -> int:
    _require_inputs(args, [args.model, args.plan])
    model = read_weights(args.model)
    plan = plan_from_json(Path(args.plan).read_text(encoding="utf-8"))
    fused, provenance = surgery.fuse(model, plan, base_copies=args.base_copies,
                                     supp_copies=args.supp_copies, top_k=args.top_k,
                                     router_init_seed=args.seed)
    surgery.verify_fusion(model, fused, plan, provenance)
    write_weights(fused, args.out)
    Path(args.provenance_out).write_text(surgery.provenance_to_json(provenance),
                                         encoding="utf-8")
    _record(args, "fuse", [args.model, args.plan], [args.out, args.provenance_out])
    print(f"wrote {args.out}, {args.provenance_out}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    _require_inputs(args, [args.config])
    config = load_config(args.config)
    shape = config.model
    breakdown = costmodel.total_latency(shape, config.hardware, config.workload)
    params_total, size_bytes = costmodel.static_memory(
        shape, bytes_per_param=config.hardware.weight_bytes)
    doc = {
        "config_id": args.config_id or Path(args.config).stem,
        "L": shape.num_layers,
        "N": shape.moe.num_experts if shape.moe else 1,
        "k": shape.moe.top_k if shape.moe else 1,
        "prefill_s": breakdown.prefill_s,
        "decode_s": breakdown.decode_s,
        "total_s": breakdown.total_s,
        "params_total": params_total,
        "params_active": costmodel.active_params(shape),
        "bytes": size_bytes,
    }
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")
    _record(args, "estimate", [args.config], [args.out])
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_pareto(args) -> int:
    _require_inputs(args, [args.candidates])
    candidates = tradeoff.read_candidates_csv(args.candidates)
    if args.calibrate:
        exponent = tradeoff.calibrate_w(args.calibrate[0], args.calibrate[1])
    elif args.w is not None:
        exponent = args.w
    else:
        raise InvalidConfig("provide either --w or --calibrate FACTOR GAIN")
    evaluated, best = tradeoff.evaluate_candidates(candidates, args.base_latency, exponent)
    note = f"base_latency_ms={args.base_latency:g} w={exponent:.6f} argmax={best.config_id}"
    tradeoff.write_candidates_csv(evaluated, args.rewards_out, header_comment=note)

    frontier_points = set(tradeoff.pareto_frontier(
        [(c.latency_ms, c.score) for c in evaluated]))
    frontier = sorted((c for c in evaluated if (c.latency_ms, c.score) in frontier_points),
                      key=lambda c: (c.latency_ms, c.config_id))
    tradeoff.write_candidates_csv(frontier, args.frontier_out, header_comment=note)
    _record(args, "pareto", [args.candidates], [args.rewards_out, args.frontier_out])
    print(f"wrote {args.rewards_out}, {args.frontier_out}; argmax {best.config_id} "
          f"(reward {best.reward:.2f})")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    _require_inputs(args, [args.log])
    log = train_log_from_csv(args.log)
    row = log.steps[args.row]
    # the log stores load fractions, not raw assignments, so build the
    # profile directly instead of re-counting
    winner = int(np.argmax(row.loads)) + 1
    profiles = [LayerLoadProfile(layer=1, loads=row.loads, winner=winner)]
    summary = wta_metrics(profiles, len(row.loads))
    write_summary_csv(summary, args.out)
    outputs = [args.out]
    if args.per_layer_out:
        write_per_layer_csv(profiles, args.per_layer_out)
        outputs.append(args.per_layer_out)
    _record(args, "diagnose", [args.log], outputs)
    print(f"wrote {', '.join(str(p) for p in outputs)}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    _require_inputs(args, [args.model])
    model = read_weights(args.model)
    data = make_copy_stream(model.shape.vocab_size, args.seq_len, args.sequences, args.seed)
    log, trained = train_toy(model, data, steps=args.steps, lr=args.lr,
                             alpha=args.alpha, seed=args.seed)
    log.to_csv(args.log_out)
    write_weights(trained, args.model_out)
    _record(args, "train-toy", [args.model], [args.log_out, args.model_out])
    final = log.steps[-1]
    print(f"wrote {args.log_out}, {args.model_out}; final task loss {final.task_loss:.4f}, "
          f"balance {final.lb_loss:.4f}")
    return EXIT_OK


# --- parser & dispatch -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="d2m",
        description="Dense-to-MoE surgery toolkit: analyze layer redundancy, fuse "
                    "redundant layers into MoE experts, and rank candidate depths.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_dir(p):
        p.add_argument("--run-dir", default=None,
                       help="directory whose manifest.json tracks stage inputs/outputs")

    p = sub.add_parser("synth", help="generate a toy model, trace, and config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--mlp-dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--kv-heads", type=int, default=2)
    p.add_argument("--head-dim", type=int, default=8)
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--untied", action="store_true")
    p.add_argument("--seq-len", type=int, default=96)
    p.add_argument("--weight-scale", type=float, default=0.02)
    p.add_argument("--redundant", action="append", default=[], metavar="BASE:OFFSET:NOISE",
                   help="duplicate layer BASE onto BASE+OFFSET with Gaussian noise")
    p.add_argument("--trace-mode", choices=("synthetic", "forward"), default="synthetic")
    add_run_dir(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("analyze", help="similarity matrices and heatmap CSVs from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    add_run_dir(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("search", help="block search (plan) or threshold sweep (CSV)")
    p.add_argument("--matrices", required=True)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--score-penalty", "--lambda", dest="score_penalty", type=float, default=1.0)
    p.add_argument("--block-sizes", default="1,2,3")
    p.add_argument("--plan-out", default=None)
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--delta-grid", default=None)
    p.add_argument("--epsilon-grid", default=None)
    p.add_argument("--sweep-out", default=None)
    p.add_argument("--jobs", type=int, default=1)
    add_run_dir(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("fuse", help="apply a fusion plan to a dense model")
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--base-copies", type=int, required=True)
    p.add_argument("--supp-copies", type=int, required=True)
    p.add_argument("--top-k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--provenance-out", required=True)
    add_run_dir(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("estimate", help="latency, memory, and parameter counts")
    p.add_argument("--config", required=True)
    p.add_argument("--config-id", default=None)
    p.add_argument("--out", required=True)
    add_run_dir(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("pareto", help="rewards and Pareto frontier over candidates")
    p.add_argument("--candidates", required=True)
    p.add_argument("--base-latency", type=float, required=True)
    p.add_argument("--w", type=float, default=None)
    p.add_argument("--calibrate", type=float, nargs=2, metavar=("FACTOR", "GAIN"),
                   default=None)
    p.add_argument("--rewards-out", required=True)
    p.add_argument("--frontier-out", required=True)
    add_run_dir(p)
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("diagnose", help="winner-takes-all summary from a training log")
    p.add_argument("--log", required=True)
    p.add_argument("--row", type=int, default=-1,
                   help="log row to diagnose (default: final step)")
    p.add_argument("--out", required=True)
    p.add_argument("--per-layer-out", default=None)
    add_run_dir(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("train-toy", help="SGD on a fused toy model's router and experts")
    p.add_argument("--model", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=5.0)
    p.add_argument("--alpha", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--sequences", type=int, default=4)
    p.add_argument("--log-out", required=True)
    p.add_argument("--model-out", required=True)
    add_run_dir(p)
    p.set_defaults(func=cmd_train_toy)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (VerificationFailure, NonFiniteActivation, NonFiniteGradient,
            DivergenceDetected, StaleArtifact) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except IoFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except D2mError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
