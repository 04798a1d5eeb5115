"""Run the default sweep on the simulated device and write records plus aggregates.

    python3 scripts/run_sweep.py --out out/sweep --phases prefill decode --seed 0
"""
import argparse
import csv
import logging
import time
from pathlib import Path

from dvfs_energy.backend import SimulatedBackend
from dvfs_energy.config import ToolConfig, load_model
from dvfs_energy.orchestrator import RecordSink, SweepGrid, aggregate_all, aggregates_to_rows, execute, plan


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="out/sweep")
    p.add_argument("--phases", nargs="+", default=["prefill", "decode"])
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.005)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    spec, profiles, power = load_model(ToolConfig())
    backend = SimulatedBackend(spec, profiles, power, noise=args.noise)
    grid = SweepGrid(phases=tuple(args.phases), repetitions=args.reps)
    out = Path(args.out)
    sink = RecordSink(out / "records.jsonl")

    t0 = time.perf_counter()
    summary = execute(plan(grid), backend, sink, grid.repetitions, grid.warmup, seed=args.seed)
    print(f"executed {len(summary.executed)}, skipped {len(summary.skipped)}, failed {len(summary.failed)} "
          f"configs in {time.perf_counter() - t0:.1f} s")

    rows = aggregates_to_rows(aggregate_all(sink.records(), grid.repetitions))
    with (out / "aggregates.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"{len(rows)} aggregated configs -> {out / 'aggregates.csv'}")


if __name__ == "__main__":
    main()
