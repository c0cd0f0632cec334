"""Command-line entry point: ``ccbudget <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import dataclass
from importlib.resources import files
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .gaussian_select import fit_gaussian
from .harness import (
    ExperimentPlan,
    Selector,
    choose_subset,
    eval_savings,
    evaluate_full,
    ranking_csv,
    recall_report,
    run_efficient_protocol,
    selection_report,
)
from .patch_engine import SourceTree, apply_patch, parse_update_blocks, rejection_records, validate_syntax, write_jsonl
from .seeding import derive_seed, rng_for
from .sim.bbr import LEVEL_NAMES, PARAM_NAMES, PARAM_LEVELS, BbrParams, parameter_grid
from .sim.fluid import MeasureConfig, NetworkCondition
from .sim.grid import DatasetSpec, QUEUE_MULTIPLIERS, build_condition_grid, load_manifest, write_manifest
from .sim.trace import TraceError, load_trace, synthetic_trace_set
from .synthetic import PlantedSpec, planted_conditions, planted_model
from .utility import UtilityConfig, UtilityMatrix

log = logging.getLogger("ccbudget")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def bundled_source_dir() -> Path:
    return Path(str(files("ccbudget") / "data" / "bbr"))


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    version: str
    inputs: dict[str, str]

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"


def _input_hashes(paths: Sequence[str | Path | None]) -> dict[str, str]:
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        if p.is_file():
            out[str(p)] = sha256_file(p)
        elif p.is_dir():
            h = hashlib.sha256()
            for f in sorted(q for q in p.rglob("*") if q.is_file()):
                h.update(f.relative_to(p).as_posix().encode() + b"\0" + f.read_bytes())
            out[str(p)] = h.hexdigest()
    return out


def write_manifest_file(out: Path, args: argparse.Namespace, argv: Sequence[str], inputs: Sequence[Any]) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    manifest = RunManifest(args.command, list(argv), config, getattr(args, "seed", None), __version__, _input_hashes(inputs))
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _measure_config(args: argparse.Namespace) -> MeasureConfig:
    return MeasureConfig(bulk_ms=args.bulk_ms, rr_ms=args.rr_ms, bulk_runs=args.bulk_runs)


# --- patch ---------------------------------------------------------------------


def cmd_patch(args: argparse.Namespace, argv: Sequence[str]) -> int:
    source_dir = Path(args.source_dir) if args.source_dir else bundled_source_dir()
    tree = SourceTree.load(source_dir)
    response = Path(args.response)
    if not response.is_file():
        raise UsageError(f"response file {response} not found")
    parsed = parse_update_blocks(response.read_text(encoding="utf-8"))
    outcome = apply_patch(tree, parsed.blocks)
    violations = validate_syntax(outcome.tree)
    out = _out_dir(args)
    (out / "tree").mkdir(exist_ok=True)
    outcome.tree.render(out / "tree")
    write_jsonl(out / "rejections.jsonl", rejection_records(response.name, parsed, outcome))
    report = {
        "blocks": len(parsed.blocks),
        "parse_errors": [{"index": e.index, "line": e.line, "message": e.message} for e in parsed.errors],
        "applied": [{"block": a.block, "file": a.file, "byte_span": list(a.byte_span)} for a in outcome.applied],
        "rejected": [{"block": r.block, "reason": r.reason, "detail": r.detail} for r in outcome.rejected],
        "violations": [v.to_dict() for v in violations],
    }
    ok = not parsed.errors and outcome.all_applied and not violations
    report["ok"] = ok
    (out / "report.json").write_text(_dump(report), encoding="utf-8")
    write_manifest_file(out, args, argv, [source_dir, response])
    print(json.dumps({"ok": ok, "blocks": len(parsed.blocks), "rejected": len(outcome.rejected) + len(parsed.errors)}))
    return EXIT_OK if ok else EXIT_USAGE


# --- select ---------------------------------------------------------------------


def cmd_select(args: argparse.Namespace, argv: Sequence[str]) -> int:
    pilot_path = Path(args.pilot_csv)
    if not pilot_path.is_file():
        raise UsageError(f"pilot CSV {pilot_path} not found")
    pilot = UtilityMatrix.read_csv(pilot_path)
    M = len(pilot.conditions)
    if not 1 <= args.k <= M:
        raise UsageError(f"--k must be between 1 and the number of conditions ({M})")
    conditions: list[Any] = list(pilot.conditions)
    if args.selector == Selector.BWVAR.value:
        if not args.conditions:
            raise UsageError("--selector bwvar needs --conditions (a condition manifest)")
        by_id = {c.id: c for c in load_manifest(args.conditions)}
        missing = [c for c in pilot.conditions if c not in by_id]
        if missing:
            raise UsageError(f"conditions missing from manifest: {missing[:5]}")
        conditions = [by_id[c] for c in pilot.conditions]
    model = fit_gaussian(pilot.complete_rows())
    order = choose_subset(model, conditions, args.k, Selector(args.selector), derive_seed(args.seed, "selector"))
    report = selection_report(model, order, Selector(args.selector), list(pilot.conditions))
    out = _out_dir(args)
    (out / "selection.json").write_text(_dump(report), encoding="utf-8")
    (out / "model.json").write_text(model.to_json() + "\n", encoding="utf-8")
    write_manifest_file(out, args, argv, [pilot_path, args.conditions])
    print(json.dumps({"selector": args.selector, "order": report["order"]}))
    return EXIT_OK


# --- experiment --------------------------------------------------------------------


def _simulator_setup(args: argparse.Namespace):
    from .sim.backends import SimulatorBackend

    rng = rng_for(args.seed, "experiment-traces")
    traces = synthetic_trace_set(rng, max(1, args.m // 2), duration_ms=args.trace_ms)
    conditions = build_condition_grid([DatasetSpec("Synthetic", traces)], rtt_ms=args.rtt_ms)[: args.m]
    prng = rng_for(args.seed, "experiment-candidates")
    candidates = []
    for _ in range(args.n):
        values = {name: float(prng.uniform(min(PARAM_LEVELS[name]), max(PARAM_LEVELS[name]))) for name in PARAM_NAMES}
        values["initial_window_packets"] = float(round(values["initial_window_packets"]))
        candidates.append(BbrParams(**values))
    return SimulatorBackend(_measure_config(args), seed=args.seed), candidates, conditions


def cmd_experiment(args: argparse.Namespace, argv: Sequence[str]) -> int:
    selectors = [s.value for s in Selector] if args.selector == "all" else [args.selector]
    ucfg = UtilityConfig(args.lam)
    if args.backend == "synthetic":
        from .sim.backends import GaussianOracleBackend

        planted = planted_model(rng_for(args.seed, "planted"), PlantedSpec(M=args.m, blocks=min(24, max(1, args.m // 4)), high_variance=min(2, args.m)))
        conditions = planted_conditions(planted, rng_for(args.seed, "planted-conditions"))
        backend = GaussianOracleBackend(planted.model, seed=args.seed, lam=args.lam)
        candidates = [f"a{i:05d}" for i in range(args.n)]
    else:
        backend, candidates, conditions = _simulator_setup(args)
    M, N = len(conditions), len(candidates)
    try:
        plan_template = ExperimentPlan(L=args.l, K=args.k, R=args.r, top_n=args.top_n, seed=args.seed)
        plan_template.check(N, M)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    baselines = {c.id: backend.baseline(c) for c in conditions}
    truth = evaluate_full(backend, candidates, conditions, baselines, ucfg, args.jobs)
    out = _out_dir(args)
    summary = {"M": M, "N": N, "savings": eval_savings(M, N, args.l, args.k, args.r), "recall": {}}
    truth.write_csv(out / "ground_truth.csv")
    for sel in selectors:
        plan = ExperimentPlan(L=args.l, K=args.k, R=args.r, top_n=args.top_n, seed=args.seed, selector=sel)
        result = run_efficient_protocol(backend, candidates, conditions, plan, baselines, ucfg, args.jobs)
        report = recall_report(result, truth, M, N, R_max=args.r_max or args.r)
        (out / f"recall_{sel}.json").write_text(report.to_json(), encoding="utf-8")
        (out / f"ranking_{sel}.csv").write_text(ranking_csv(result.ranking), encoding="utf-8")
        (out / f"selection_{sel}.json").write_text(
            _dump(selection_report(result.model, result.subset, Selector(sel), [c.id for c in conditions])), encoding="utf-8"
        )
        summary["recall"][sel] = report.recall_at_r[args.r]
    (out / "summary.json").write_text(_dump(summary), encoding="utf-8")
    write_manifest_file(out, args, argv, [])
    print(f"savings {summary['savings']:.3f}")
    for sel in selectors:
        print(f"recall@{args.r} {sel} {summary['recall'][sel]:.3f}")
    return EXIT_OK


# --- simulate ------------------------------------------------------------------------


def _load_params(path: str | None) -> BbrParams:
    if not path:
        return BbrParams()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"params file {p} not found")
    return BbrParams.from_dict(json.loads(p.read_text(encoding="utf-8")))


def cmd_simulate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    from .sim.fluid import measure

    trace_path = Path(args.trace)
    if not trace_path.is_file():
        raise UsageError(f"trace file {trace_path} not found")
    trace = load_trace(trace_path)
    params = _load_params(args.params_file)
    queue = int(round(args.queue_mult * trace.bdp_bytes(args.rtt_ms)))
    cond = NetworkCondition(trace, args.rtt_ms, queue, "Synthetic", f"{trace.name}/q{args.queue_mult:g}", str(trace_path))
    m = measure(cond, params, args.seed, _measure_config(args))
    out = _out_dir(args)
    result = {"measurement": m.to_dict(), "params": params.to_dict(), "condition": cond.to_manifest()}
    (out / "measurement.json").write_text(_dump(result), encoding="utf-8")
    write_manifest([cond], out / "conditions.json")
    write_manifest_file(out, args, argv, [trace_path, args.params_file])
    print(json.dumps(m.to_dict()))
    return EXIT_OK


# --- grid ----------------------------------------------------------------------------


def _grid_conditions(args: argparse.Namespace) -> list[NetworkCondition]:
    if args.conditions:
        return load_manifest(args.conditions)
    rng = rng_for(args.seed, "grid-traces")
    traces = synthetic_trace_set(rng, args.synthetic_traces, duration_ms=args.trace_ms)
    return build_condition_grid([DatasetSpec("Synthetic", traces)], rtt_ms=args.rtt_ms)


@dataclass
class GridSweep:
    grid: list[tuple[tuple[int, ...], BbrParams]]
    matrix: UtilityMatrix
    averages: list[float]  # NaN where a configuration failed somewhere
    order: list[int]  # best first; failed configurations last


def sweep_grid(backend: Any, levels: dict[str, tuple[float, ...]], conditions: Sequence[Any], ucfg: UtilityConfig, jobs: int = 1) -> GridSweep:
    grid = parameter_grid(levels)
    matrix = evaluate_full(backend, [p for _, p in grid], conditions, None, ucfg, jobs)
    averages = [matrix.row_average(i) if matrix.mask[i].all() else float("nan") for i in range(len(grid))]
    order = sorted(range(len(grid)), key=lambda i: (math.isnan(averages[i]), -np.nan_to_num(averages[i]), i))
    return GridSweep(grid, matrix, averages, order)


def grid_csv(sweep: GridSweep, levels: dict[str, tuple[float, ...]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "config", *[f"{n}_level" for n in PARAM_NAMES], *PARAM_NAMES, "avg_utility"])
    for rank, i in enumerate(sweep.order, start=1):
        combo, params = sweep.grid[i]
        level_names = [LEVEL_NAMES[c] if len(levels[n]) == 3 else str(c) for n, c in zip(PARAM_NAMES, combo)]
        w.writerow([rank, i, *level_names, *[repr(getattr(params, n)) for n in PARAM_NAMES], repr(sweep.averages[i])])
    return buf.getvalue()


def cmd_grid(args: argparse.Namespace, argv: Sequence[str]) -> int:
    from .sim.backends import SimulatorBackend

    levels = dict(PARAM_LEVELS)
    if args.params_file:
        p = Path(args.params_file)
        if not p.is_file():
            raise UsageError(f"params file {p} not found")
        override = json.loads(p.read_text(encoding="utf-8"))
        unknown = set(override) - set(PARAM_NAMES)
        if unknown:
            raise UsageError(f"unknown parameters in params file: {sorted(unknown)}")
        levels.update({k: tuple(float(x) for x in v) for k, v in override.items()})
    conditions = _grid_conditions(args)
    backend = SimulatorBackend(_measure_config(args), seed=args.seed)
    sweep = sweep_grid(backend, levels, conditions, UtilityConfig(args.lam), args.jobs)
    out = _out_dir(args)
    (out / "grid.csv").write_text(grid_csv(sweep, levels), encoding="utf-8")
    sweep.matrix.write_csv(out / "utilities.csv")
    if all(c.trace_path for c in conditions):
        write_manifest(conditions, out / "conditions.json")
    top = sweep.order[0]
    best_avg = sweep.averages[top]
    best = {
        "configs": len(sweep.grid),
        "conditions": len(conditions),
        "best": {"config": top, "params": sweep.grid[top][1].to_dict(), "avg_utility": best_avg},
    }
    (out / "best.json").write_text(_dump(best), encoding="utf-8")
    write_manifest_file(out, args, argv, [args.conditions, args.params_file])
    print(json.dumps({"configs": len(sweep.grid), "best_avg_utility": best_avg}))
    return EXIT_OK


# --- pipeline ------------------------------------------------------------------------


def cmd_pipeline(args: argparse.Namespace, argv: Sequence[str]) -> int:
    from .pipeline import HttpGenerator, IterationConfig, MockGenerator, run_pipeline
    from .sim.backends import GaussianOracleBackend, LineageOracleBackend, SimulatorBackend

    source_dir = Path(args.source_dir) if args.source_dir else bundled_source_dir()
    source = SourceTree.load(source_dir)
    if args.llm_endpoint:
        generator = HttpGenerator(endpoint=args.llm_endpoint)
        generator.probe()
    else:
        generator = MockGenerator(seed=args.seed)
    try:
        cfg = IterationConfig(
            population=args.population,
            variants_per_parent=args.variants,
            survivors=args.survivors,
            K_eval=args.k,
            pilot=args.pilot,
            include_parents=args.include_parents,
            refit=args.refit,
            full_confirmation=args.full_confirmation,
            enforce_no_new_functions=args.no_new_functions,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.backend == "synthetic":
        planted = planted_model(rng_for(args.seed, "pipeline-planted"), PlantedSpec(M=args.m, blocks=min(24, max(1, args.m // 4)), high_variance=min(2, args.m)))
        backend: Any = LineageOracleBackend(planted.model, seed=args.seed, lam=args.lam)
        conditions: list[Any] = list(backend.conditions)
    else:
        rng = rng_for(args.seed, "pipeline-traces")
        traces = synthetic_trace_set(rng, max(1, args.m // 2), duration_ms=args.trace_ms)
        conditions = build_condition_grid([DatasetSpec("Synthetic", traces)], rtt_ms=args.rtt_ms)[: args.m]
        backend = SimulatorBackend(_measure_config(args), seed=args.seed)
    run_dir = Path(args.out) / args.name
    result = run_pipeline(
        args.iterations, cfg, generator, backend, conditions, source, seed=args.seed, run_dir=run_dir,
        resume=args.resume, ucfg=UtilityConfig(args.lam), jobs=args.jobs,
    )
    summary = {"best_utility": result.best_utility, "iterations": result.iterations, "resumed_from": result.resumed_from}
    (run_dir / "summary.json").write_text(_dump(summary), encoding="utf-8")
    write_manifest_file(run_dir, args, argv, [source_dir])
    print(json.dumps({"best_utility": result.best_utility, "resumed_from": result.resumed_from}))
    return EXIT_OK


# --- rerun ---------------------------------------------------------------------------


def cmd_rerun(args: argparse.Namespace, argv: Sequence[str]) -> int:
    path = Path(args.manifest)
    if not path.is_file():
        raise UsageError(f"manifest {path} not found")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    replay = list(manifest["argv"])
    if args.out:
        replay = _replace_flag(replay, "--out", args.out)
    return main(replay)


def _replace_flag(argv: list[str], flag: str, value: str) -> list[str]:
    out, i = [], 0
    while i < len(argv):
        if argv[i] == flag and i + 1 < len(argv):
            i += 2
            continue
        if argv[i].startswith(flag + "="):
            i += 1
            continue
        out.append(argv[i])
        i += 1
    # --out belongs to the subcommand, so it goes after the command name
    return [out[0], flag, value, *out[1:]] if out else out


# --- parser --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=out_default)
    p.add_argument("--jobs", type=int, default=1, help="worker threads for evaluation")


def _sim_knobs(p: argparse.ArgumentParser, bulk_ms: int = 10_000, rr_ms: int = 30_000, bulk_runs: int = 3) -> None:
    p.add_argument("--rtt-ms", dest="rtt_ms", type=float, default=100.0)
    p.add_argument("--lambda", dest="lam", type=float, default=10.0)
    p.add_argument("--bulk-ms", type=int, default=bulk_ms)
    p.add_argument("--rr-ms", type=int, default=rr_ms)
    p.add_argument("--bulk-runs", type=int, default=bulk_runs)
    p.add_argument("--trace-ms", type=int, default=10_000, help="length of synthetic traces")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccbudget", description="Budgeted evaluation of congestion-control candidates.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("patch", help="apply an update-block response to a source tree")
    p.add_argument("--source-dir", default=None, help="defaults to the bundled BBR fixture")
    p.add_argument("--response", required=True)
    _common(p, "out/patch")
    p.set_defaults(func=cmd_patch)

    p = sub.add_parser("select", help="choose K conditions from a pilot utility CSV")
    p.add_argument("--pilot-csv", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--selector", choices=[s.value for s in Selector], default="greedy")
    p.add_argument("--conditions", default=None, help="condition manifest (needed for bwvar)")
    _common(p, "out/select")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("experiment", help="recall experiment of the subset protocol")
    p.add_argument("--backend", choices=["synthetic", "simulator"], default="synthetic")
    p.add_argument("--m", type=int, default=408)
    p.add_argument("--n", type=int, default=726)
    p.add_argument("--l", type=int, default=100)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--r", type=int, default=20)
    p.add_argument("--r-max", type=int, default=None)
    p.add_argument("--top-n", type=int, default=10)
    p.add_argument("--selector", choices=["all", *[s.value for s in Selector]], default="all")
    _sim_knobs(p, bulk_ms=2000, rr_ms=3000, bulk_runs=1)
    _common(p, "out/experiment")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("simulate", help="measure one parameter set on one trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--queue-mult", type=float, choices=QUEUE_MULTIPLIERS, default=1.0)
    p.add_argument("--params-file", default=None, help="JSON object of BBR parameters")
    _sim_knobs(p)
    _common(p, "out/simulate")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("grid", help="sweep every combination of the parameter levels")
    p.add_argument("--conditions", default=None, help="condition manifest; default is a synthetic set")
    p.add_argument("--synthetic-traces", type=int, default=1)
    p.add_argument("--params-file", default=None, help="JSON {param: [levels]} overriding level columns")
    _sim_knobs(p, bulk_ms=2000, rr_ms=2000, bulk_runs=1)
    _common(p, "out/grid")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("pipeline", help="iterative generate/patch/evaluate/select loop")
    p.add_argument("--name", default="run")
    p.add_argument("--iterations", type=int, default=2)
    p.add_argument("--population", type=int, default=60)
    p.add_argument("--variants", type=int, default=5)
    p.add_argument("--survivors", type=int, default=5)
    p.add_argument("--pilot", type=int, default=20)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--m", type=int, default=40)
    p.add_argument("--backend", choices=["synthetic", "simulator"], default="synthetic")
    p.add_argument("--source-dir", default=None)
    p.add_argument("--llm-endpoint", default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--include-parents", action="store_true")
    p.add_argument("--refit", action="store_true")
    p.add_argument("--full-confirmation", action="store_true")
    p.add_argument("--no-new-functions", action="store_true")
    _sim_knobs(p, bulk_ms=2000, rr_ms=2000, bulk_runs=1)
    _common(p, "runs")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("rerun", help="repeat a command from its manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="write to a different directory")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .pipeline import GeneratorError

    try:
        return args.func(args, argv)
    except (UsageError, FileNotFoundError, TraceError, GeneratorError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
