"""Synthesize a clock policy from a sweep and apply every entry on the simulated device.

    python3 scripts/synthesize_policy.py --records out/sweep/records.jsonl --out out/policy.json
"""
import argparse
import logging

from dvfs_energy.analysis import classify_architectures, optimal_clock_map
from dvfs_energy.backend import SimulatedBackend
from dvfs_energy.config import ToolConfig, load_model
from dvfs_energy.orchestrator import aggregate_all, read_records
from dvfs_energy.policy import apply, export_policy, import_policy, synthesize


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--records", required=True)
    p.add_argument("--out", default="out/policy.json")
    p.add_argument("--budget", type=float, default=0.01)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")

    spec, profiles, power = load_model(ToolConfig())
    cmap = optimal_clock_map(aggregate_all(read_records(args.records), 10), args.budget)
    policy = synthesize(classify_architectures(cmap), cmap, args.budget, spec.base_clock)
    export_policy(policy, args.out)
    policy = import_policy(args.out)
    print(f"{len(policy.entries)} entries, omitted {sorted(policy.omitted)} -> {args.out}")

    backend = SimulatedBackend(spec, profiles, power)
    for e in policy.entries:
        applied = apply(policy, backend, e.arch, e.phase, e.batch_band[0], e.context_band[1])
        print(f"  {e.key:<52s} lock {e.lock_mhz:6.0f}  runs {applied.state.actual_clock:6.0f}  "
              f"saving {e.expected_power_saving_pct:5.1f}%  loss {e.expected_throughput_loss_pct:5.2f}%")


if __name__ == "__main__":
    main()
