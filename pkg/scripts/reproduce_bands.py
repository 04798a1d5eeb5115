"""Print the headline quantities of the simulated sweep next to their target bands.

    python3 scripts/reproduce_bands.py [--seed 0]
"""
import argparse

import numpy as np

from dvfs_energy.analysis import (
    PARETO_LOSS_BUDGET,
    CrossoverAxis,
    classify_architectures,
    detect_clock_clamp,
    find_crossover,
    optimal_clock_map,
    request_energy_curve,
)
from dvfs_energy.backend import SimulatedBackend
from dvfs_energy.config import ToolConfig, load_model
from dvfs_energy.orchestrator import RecordSink, SweepGrid, aggregate_all, execute, plan

ARCHS = ("GQA", "GQA-ctrl", "MLA", "GDN", "Mamba2")
CONTEXTS = [1024, 4096, 16384, 65536]


def line(name, value, lo, hi):
    ok = lo <= value <= hi
    print(f"  {'ok  ' if ok else 'MISS'} {name:<42s} {value:10.3f}   [{lo}, {hi}]")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.005)
    p.add_argument("--records", default=None, help="reuse a records.jsonl instead of sweeping in memory")
    args = p.parse_args(argv)

    spec, profiles, power = load_model(ToolConfig())
    grid = SweepGrid(phases=("prefill", "decode"))
    if args.records:
        sink = RecordSink(args.records)
    else:
        import tempfile

        sink = RecordSink(tempfile.mkdtemp() + "/records.jsonl")
        execute(plan(grid), SimulatedBackend(spec, profiles, power, noise=args.noise), sink,
                grid.repetitions, grid.warmup, seed=args.seed)
    aggs = aggregate_all(sink.records(), grid.repetitions)
    cmap = optimal_clock_map(aggs, 0.01)

    print("1590 vs 1980 MHz lock, medians over decode cells (percent)")
    for arch in ARCHS:
        dt, dp = [], []
        cells = {}
        for a in aggs:
            if a.arch == arch and a.phase == "decode" and a.lever == "lock":
                cells.setdefault(a.cell, {})[a.level] = a
        for locks in cells.values():
            r = detect_clock_clamp({k: a.actual_clock_mhz for k, a in locks.items()},
                                   {k: (a.tok_per_s, a.power_w) for k, a in locks.items()})
            dt.append(100 * abs(r.wasted_band.throughput_delta))
            dp.append(100 * r.wasted_band.power_delta)
        line(f"{arch} throughput delta", float(np.median(dt)), 0, 0.5)
        line(f"{arch} power delta", float(np.median(dp)), 5, 15)

    print("780 MHz lock vs reference, decode BS 1 at 1K (percent saving)")
    for arch in ARCHS:
        line(arch, 100 * cmap[(arch, "decode", 1, 1024)].saving(780.0), 20, 35)
    line("GDN power at 780 MHz (W)", cmap[("GDN", "decode", 1, 1024)].power_w[780.0], 105.3, 128.7)

    print("DVFS classes")
    for arch, c in sorted(classify_architectures(cmap).items()):
        print(f"  {arch:<10s} {c.kind.value}")

    print("crossovers")
    curve = lambda arch, bs: [cmap[(arch, "decode", bs, c)].mj_per_tok[1980.0] for c in CONTEXTS]
    for bs in (1, 32):
        r = find_crossover(CONTEXTS, curve("MLA", bs), curve("GQA-ctrl", bs), CrossoverAxis.CONTEXT,
                           ("MLA", "GQA-ctrl"), bs)
        print(f"  MLA vs GQA-ctrl, BS {bs}: {r.threshold}")
    lens = list(range(0, 4097, 16))
    for name, m, variant in (("Pareto-5%", optimal_clock_map(aggs, PARETO_LOSS_BUDGET), "budget"),
                             ("min-energy", cmap, "min_energy")):
        a = request_energy_curve(m, "Mamba2", 32, 16384, lens, variant)
        b = request_energy_curve(m, "GQA", 32, 16384, lens, variant)
        r = find_crossover(lens, a.joules, b.joules, CrossoverAxis.OUTPUT_TOKENS, ("Mamba2", "GQA"), 32)
        print(f"  Mamba2 vs GQA total request energy, BS 32 16K, {name}: {r.threshold}")

    print("scaling at 1980 MHz lock")
    for arch, lo, hi in (("GQA", 2.0, 2.5), ("MLA", 1.3, 1.55), ("Mamba2", 1.05, 1.25)):
        r = cmap[(arch, "decode", 32, 16384)].mj_per_tok[1980.0] / cmap[(arch, "decode", 32, 4096)].mj_per_tok[1980.0]
        line(f"{arch} 4K->16K energy ratio, BS 32", r, lo, hi)
    r = cmap[("GQA", "decode", 1, 1024)].mj_per_tok[1980.0] / cmap[("GQA", "decode", 32, 1024)].mj_per_tok[1980.0]
    line("GQA BS 1->32 reduction at 1K", r, 15, float("inf"))


if __name__ == "__main__":
    main()
