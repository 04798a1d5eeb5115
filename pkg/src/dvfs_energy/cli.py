"""Command-line entry point: calibrate, sweep, analyze, policy, simulate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .analysis import (
    PARETO_LOSS_BUDGET,
    CrossoverAxis,
    ParetoPoint,
    classify_architectures,
    curves_csv,
    detect_cap_inertness,
    detect_clock_clamp,
    dominance_verdict,
    find_crossover,
    frontier_csv,
    optimal_clock_map,
    plot_manifest,
    request_energy_curve,
    to_jsonable,
    _csv_text,
)
from .backend import WorkloadRequest, make_backend
from .calibration import fit_profiles, load_targets
from .config import ToolConfig, calibrate_power, data_path, load_model, load_spec
from .device import save_power_params
from .errors import DvfsEnergyError
from .orchestrator import (
    RecordSink,
    SweepGrid,
    aggregate_all,
    canonical_json,
    config_hash,
    execute,
    load_grid,
    plan,
    read_records,
)
from .policy import apply as apply_policy
from .policy import export_policy, import_policy, synthesize
from .telemetry import Phase, measure_window
from .workload import PhasePoint, load_profiles, save_profiles

log = logging.getLogger("dvfs_energy")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FLAGGED = 3

REPORTS = ("pareto", "dominance", "heatmap", "total-energy", "inertness", "clamp", "classify", "crossover")


class UsageError(Exception):
    pass


def artifact_meta(cfg: ToolConfig) -> dict:
    # the output location is not part of what was computed
    content = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    return {"tool": "dvfs-energy", "version": __version__, "seed": cfg.seed, "config_hash": config_hash(content)}


def meta_preamble(meta: dict) -> list[str]:
    return [" ".join(f"{k}={v}" for k, v in meta.items())]


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- calibrate -----------------------------------------------------------------

def cmd_calibrate(args, cfg: ToolConfig) -> int:
    spec = load_spec(cfg)
    targets_path = args.targets or cfg.resolve("targets", "calibration_targets.csv")
    targets = load_targets(targets_path)
    if not targets:
        raise UsageError(f"no calibration targets in {targets_path}")
    priors = load_profiles(args.priors or cfg.resolve("priors", "profile_priors.json"))
    power = calibrate_power(args.fixtures or cfg.resolve("fixtures", "power_fixtures.csv"), spec, priors)
    result = fit_profiles(targets, priors, spec, power, strict=not args.allow_conflicts)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = artifact_meta(cfg)
    save_profiles(result.profiles, out / "calibrated_profiles.json", meta={**meta, "targets": Path(targets_path).name})
    save_power_params(power, out / "power_params.json")
    rows = result.report_rows()
    header = list(rows[0])
    (out / "calibration_residuals.csv").write_text(
        _csv_text(header, ([r[k] for k in header] for r in rows), meta_preamble(meta)))
    bad = [r for r in rows if not r["within_tolerance"]]
    print(f"calibrated {len(result.profiles)} profiles against {len(rows)} targets; "
          f"{len(rows) - len(bad)} within tolerance -> {out}")
    return EXIT_FLAGGED if bad else EXIT_OK


# -- sweep ---------------------------------------------------------------------

def build_backend(cfg: ToolConfig):
    spec, profiles, power = load_model(cfg)
    params = dict(cfg.backend_params)
    if cfg.backend == "sim":
        params.setdefault("noise", cfg.noise)
    return make_backend(cfg.backend, spec, profiles, power, **params)


def cmd_sweep(args, cfg: ToolConfig) -> int:
    grid = load_grid(args.grid) if args.grid else SweepGrid()
    if args.reps is not None:
        grid = SweepGrid.from_dict({**grid.to_dict(), "repetitions": args.reps})
    out = Path(cfg.out)
    sink = RecordSink(out / "records.jsonl")
    if sink.path.exists() and sink.path.stat().st_size and not args.resume:
        raise UsageError(f"{sink.path} already holds records; pass --resume to continue that sweep")
    backend = build_backend(cfg)
    configs = plan(grid)
    meta = {**artifact_meta(cfg), "grid": grid.to_dict(), "backend": cfg.backend, "n_configs": len(configs)}
    write_json(out / "sweep_meta.json", meta)
    summary = execute(configs, backend, sink, grid.repetitions, grid.warmup, cfg.seed)
    failures = out / "failures.jsonl"
    if summary.failed:
        with failures.open("a") as fh:
            for cid, err in summary.failed.items():
                fh.write(canonical_json({"config_id": cid, "error": err, "seed": cfg.seed}) + "\n")
    print(f"{len(configs)} configs: {len(summary.executed)} run, {len(summary.skipped)} already complete, "
          f"{len(summary.failed)} failed -> {sink.path}")
    return EXIT_OK if summary.ok else EXIT_FLAGGED


# -- analyze -------------------------------------------------------------------

def load_aggregates(records_dir: Path):
    records = read_records(records_dir)
    if not records:
        raise UsageError(f"no records under {records_dir}")
    meta_path = Path(records_dir) / "sweep_meta.json"
    reps = None
    if meta_path.exists():
        reps = json.loads(meta_path.read_text())["grid"]["repetitions"]
    return aggregate_all(records, reps)


def _cells(aggs, phase="decode"):
    cells: dict = {}
    for a in aggs:
        if a.phase == phase:
            cells.setdefault(a.cell, []).append(a)
    return cells


def _pareto_points(group):
    lock = [ParetoPoint(a.tok_per_s, a.tok_per_j, f"lock {a.level:.0f} MHz") for a in group if a.lever == "lock"]
    cap = [ParetoPoint(a.tok_per_s, a.tok_per_j, f"cap {a.level:.0f} W") for a in group if a.lever == "cap"]
    free = [ParetoPoint(a.tok_per_s, a.tok_per_j, "free-run") for a in group if a.lever == "free"]
    return lock, cap, free


def report_pareto(aggs, args, meta, out: Path) -> bool:
    parts = []
    for cell, group in sorted(_cells(aggs, args.phase).items()):
        lock, cap, free = _pareto_points(group)
        body = frontier_csv(lock + cap + free).splitlines()[1:]
        parts.extend(",".join(map(str, cell)) + "," + line for line in body)
    header = "arch,phase,batch,context,label,tok_s,tok_per_j,on_frontier"
    out.write_text("\n".join([f"# {meta_preamble(meta)[0]}", header, *parts]) + "\n")
    write_json(out.with_suffix(".manifest.json"), plot_manifest(
        out.name, "tok_s", "tok_per_j", ["lock", "cap", "free-run"], "scatter", meta))
    return False


def report_dominance(aggs, args, meta, out: Path) -> bool:
    rows = []
    for cell, group in sorted(_cells(aggs, args.phase).items()):
        lock, cap, _ = _pareto_points(group)
        if lock and cap:
            v = dominance_verdict(lock, cap)
            rows.append({"cell": list(cell), **to_jsonable(v)})
    write_json(out, {"meta": meta, "cells": rows})
    return False


def report_heatmap(aggs, args, meta, out: Path) -> bool:
    cmap = optimal_clock_map(aggs, args.budget)
    rows = []
    for (arch, phase, batch, ctx), ch in sorted(cmap.items()):
        ref = ch.reference_clock
        rows.append((arch, phase, batch, ctx, ch.min_energy_clock, ch.budget_clock,
                     f"{ch.mj_per_tok[ch.min_energy_clock]:.6g}", f"{ch.mj_per_tok[ch.budget_clock]:.6g}",
                     f"{ch.mj_per_tok[ref]:.6g}", f"{ch.saving(ch.budget_clock):.4f}",
                     f"{ch.loss(ch.budget_clock):.4f}"))
    out.write_text(_csv_text(
        ("arch", "phase", "batch", "context", "min_energy_clock_mhz", "budget_clock_mhz",
         "min_energy_mj_per_tok", "budget_mj_per_tok", "reference_mj_per_tok", "budget_saving", "budget_loss"),
        rows, meta_preamble({**meta, "loss_budget": args.budget})))
    write_json(out.with_suffix(".manifest.json"), plot_manifest(
        out.name, "batch", "context", ["min_energy_clock_mhz", "budget_clock_mhz", "min_energy_mj_per_tok"],
        "heatmap", meta))
    return False


def report_total_energy(aggs, args, meta, out: Path) -> bool:
    lens = list(range(0, args.max_output + 1, args.output_step))
    maps = {"pareto_budget": optimal_clock_map(aggs, PARETO_LOSS_BUDGET), "min_energy": optimal_clock_map(aggs)}
    archs = sorted({a.arch for a in aggs})
    text = []
    for variant, cmap in maps.items():
        kind = "budget" if variant == "pareto_budget" else "min_energy"
        curves = [request_energy_curve(cmap, a, args.batch, args.context, lens, kind) for a in archs]
        body = curves_csv(curves, variant).splitlines()
        text.extend(body if not text else body[1:])
    out.write_text("\n".join([f"# {meta_preamble(meta)[0]}", *text]) + "\n")
    write_json(out.with_suffix(".manifest.json"), plot_manifest(
        out.name, "output_tokens", "joules_per_sequence", archs, "line", {**meta, "variants": list(maps)}))
    return False


def report_inertness(aggs, args, meta, out: Path) -> bool:
    spec = load_spec(args.cfg)
    res = []
    for cell, group in sorted(_cells(aggs, args.phase).items()):
        rows = {a.level: (a.actual_clock_mhz, a.power_w) for a in group if a.lever == "cap"}
        if len(rows) >= 2:
            v = detect_cap_inertness(rows, spec.supported_locks)
            res.append({"cell": list(cell), **to_jsonable(v)})
    write_json(out, {"meta": meta, "cells": res})
    return False


def report_clamp(aggs, args, meta, out: Path) -> bool:
    res = []
    for cell, group in sorted(_cells(aggs, args.phase).items()):
        locks = [a for a in group if a.lever == "lock"]
        if not locks:
            continue
        pairs = {a.level: a.actual_clock_mhz for a in locks}
        meas = {a.level: (a.tok_per_s, a.power_w) for a in locks}
        res.append({"cell": list(cell), **to_jsonable(detect_clock_clamp(pairs, meas))})
    write_json(out, {"meta": meta, "cells": res})
    return False


def report_classify(aggs, args, meta, out: Path) -> bool:
    cmap = optimal_clock_map(aggs, args.budget)
    classes = classify_architectures(cmap, args.context_for_class)
    write_json(out, {"meta": {**meta, "loss_budget": args.budget}, "classes": to_jsonable(classes)})
    return any(c.kind.value == "unclassified" for c in classes.values())


def report_crossover(aggs, args, meta, out: Path) -> bool:
    a_name, b_name = args.pair.split(",")
    res = []
    by_cell = {}
    for a in aggs:
        if a.phase == "decode" and a.lever == "lock":
            by_cell.setdefault((a.arch, a.batch, a.level), {})[a.context] = a.mj_per_tok
    lock = args.lock
    batches = sorted({k[1] for k in by_cell})
    for b in batches:
        ca, cb = by_cell.get((a_name, b, lock)), by_cell.get((b_name, b, lock))
        if not ca or not cb:
            continue
        xs = sorted(ca)
        rep = find_crossover(xs, [ca[x] for x in xs], [cb.get(x, np.nan) for x in xs],
                             CrossoverAxis.CONTEXT, (a_name, b_name), b, sorted(cb))
        res.append(to_jsonable(rep))
    write_json(out, {"meta": {**meta, "lock_mhz": lock}, "crossovers": res})
    return False


REPORT_FUNCS = {
    "pareto": report_pareto,
    "dominance": report_dominance,
    "heatmap": report_heatmap,
    "total-energy": report_total_energy,
    "inertness": report_inertness,
    "clamp": report_clamp,
    "classify": report_classify,
    "crossover": report_crossover,
}


def cmd_analyze(args, cfg: ToolConfig) -> int:
    aggs = load_aggregates(Path(args.records))
    out = Path(args.out_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    args.cfg = cfg
    flagged = REPORT_FUNCS[args.report](aggs, args, artifact_meta(cfg), out)
    noisy = [a.config_id for a in aggs if a.flagged]
    if noisy:
        log.warning("%d aggregates exceed the 3%% stddev/median threshold", len(noisy))
    print(f"{args.report} report -> {out}")
    return EXIT_FLAGGED if (flagged or noisy) else EXIT_OK


# -- policy --------------------------------------------------------------------

def cmd_policy_synth(args, cfg: ToolConfig) -> int:
    aggs = load_aggregates(Path(args.records))
    spec = load_spec(cfg)
    cmap = optimal_clock_map(aggs, args.budget)
    classes = classify_architectures(cmap, args.context_for_class)
    policy = synthesize(classes, cmap, args.budget, spec.base_clock, meta=artifact_meta(cfg))
    out = Path(args.out_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_policy(policy, out)
    for arch, why in policy.omitted.items():
        print(f"omitted {arch}: {why}")
    print(f"{len(policy.entries)} entries -> {out}")
    return EXIT_FLAGGED if policy.omitted else EXIT_OK


def cmd_policy_apply(args, cfg: ToolConfig) -> int:
    policy = import_policy(args.file)
    backend = build_backend(cfg)
    applied = apply_policy(policy, backend, args.arch, args.phase, args.batch, args.context)
    s = applied.state
    print(json.dumps({
        "entry": applied.entry.key if applied.entry else "default",
        "requested_lock_mhz": applied.requested_lock_mhz,
        "actual_clock_mhz": s.actual_clock,
        "diverged": applied.diverged,
    }, sort_keys=True))
    return EXIT_OK


# -- simulate ------------------------------------------------------------------

def cmd_simulate(args, cfg: ToolConfig) -> int:
    backend = build_backend(cfg)
    point = PhasePoint(Phase(args.phase), args.batch, args.context, args.output_len)
    req = WorkloadRequest(args.arch, point, lock=args.lock, cap=args.cap)
    res = backend.run(req, seed=cfg.seed)
    m = measure_window(res.trace, res.window)
    s = res.observed_state
    print(json.dumps({
        "arch": args.arch, "phase": args.phase, "batch": args.batch, "context": args.context,
        "requested_lock_mhz": s.requested_lock, "configured_cap_w": s.configured_cap,
        "actual_clock_mhz": s.actual_clock, "cap_engaged": s.cap_engaged, "throttled": s.throttled,
        "tokens": res.tokens_processed, "wall_time_s": res.wall_time, "energy_j": m.energy,
        "energy_method": m.method.value, "counter_validation": m.validation.value,
        "mj_per_tok": 1e3 * m.energy / res.tokens_processed, "median_power_w": res.trace.median_power(),
        **artifact_meta(cfg),
    }, sort_keys=True))
    return EXIT_OK


# -- wiring --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dvfs-energy", description=__doc__)
    p.add_argument("--config", help="tool config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--backend", choices=("sim", "real"))
    p.add_argument("--noise", type=float, help="simulated power/time noise sigma")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="fit power params and architecture profiles")
    c.add_argument("--targets")
    c.add_argument("--priors")
    c.add_argument("--fixtures")
    c.add_argument("--allow-conflicts", action="store_true", help="write results even if targets are missed")
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("sweep", help="run a lock/cap sweep grid")
    s.add_argument("--grid", help="grid JSON (default: full grid)")
    s.add_argument("--reps", type=int)
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="offline reports from sweep records")
    a.add_argument("--records", required=True, help="sweep output directory")
    a.add_argument("--report", required=True, choices=REPORTS)
    a.add_argument("--out", dest="out_file", required=True)
    a.add_argument("--phase", default="decode")
    a.add_argument("--budget", type=float, default=0.01)
    a.add_argument("--batch", type=int, default=32)
    a.add_argument("--context", type=int, default=16384)
    a.add_argument("--context-for-class", type=int, default=None)
    a.add_argument("--pair", default="MLA,GQA-ctrl")
    a.add_argument("--lock", type=float, default=1980.0)
    a.add_argument("--max-output", type=int, default=4096)
    a.add_argument("--output-step", type=int, default=64)
    a.set_defaults(func=cmd_analyze)

    pol = sub.add_parser("policy", help="synthesize or apply a clock policy")
    psub = pol.add_subparsers(dest="policy_command", required=True)
    ps = psub.add_parser("synth")
    ps.add_argument("--records", required=True)
    ps.add_argument("--budget", type=float, default=0.01)
    ps.add_argument("--context-for-class", type=int, default=None)
    ps.add_argument("--out", dest="out_file", required=True)
    ps.set_defaults(func=cmd_policy_synth)
    pa = psub.add_parser("apply")
    pa.add_argument("--file", required=True)
    pa.add_argument("--arch", required=True)
    pa.add_argument("--phase", default="decode")
    pa.add_argument("--batch", type=int, required=True)
    pa.add_argument("--context", type=int, required=True)
    pa.set_defaults(func=cmd_policy_apply)

    m = sub.add_parser("simulate", help="one simulated run")
    m.add_argument("--arch", required=True)
    m.add_argument("--phase", default="decode")
    m.add_argument("--batch", type=int, default=1)
    m.add_argument("--context", type=int, default=1024)
    m.add_argument("--output-len", type=int, default=128)
    lever = m.add_mutually_exclusive_group()
    lever.add_argument("--lock", type=float)
    lever.add_argument("--cap", type=float)
    m.set_defaults(func=cmd_simulate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ToolConfig.load(args.config)
        for key in ("seed", "out", "backend", "noise"):
            if getattr(args, key, None) is not None:
                setattr(cfg, key, getattr(args, key))
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DvfsEnergyError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
