"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""
import dataclasses
import logging
import time

import numpy as np
import pytest

from dvfs_energy.analysis import (
    PARETO_LOSS_BUDGET,
    CrossoverAxis,
    DvfsKind,
    Inertness,
    ParetoPoint,
    classify_architectures,
    detect_cap_inertness,
    detect_clock_clamp,
    dominance_verdict,
    find_crossover,
    optimal_clock_map,
    pareto_frontier,
    request_energy_curve,
)
from dvfs_energy.backend import SimulatedBackend
from dvfs_energy.orchestrator import RecordSink, SweepGrid, execute, plan
from dvfs_energy.policy import ClockPolicy, PolicyEntry, apply, export_policy, import_policy, synthesize
from dvfs_energy.telemetry import (
    CounterValidation,
    EnergyMeasurement,
    EnergyMethod,
    Phase,
    PhaseWindow,
    PowerTrace,
    cross_validate,
    energy_with_fallback,
    integrate_energy,
)

from test_analysis import LOCKS, brute_frontier, load_cap_table

ARCHS = ("GQA", "GQA-ctrl", "MLA", "GDN", "Mamba2")


@pytest.fixture
def verdict(capsys):
    def report(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        assert ok, detail
    return report


@pytest.fixture(scope="module")
def cmap(full_sweep):
    return optimal_clock_map(full_sweep, 0.01)


def decode_cells(aggs):
    cells = {}
    for a in aggs:
        if a.phase == "decode":
            cells.setdefault(a.cell, []).append(a)
    return cells


# 1 -----------------------------------------------------------------------------

def test_c1_integrator_exactness(verdict):
    t0 = time.perf_counter()
    t = np.arange(0.0, 2.0 + 1e-9, 0.05)
    w = PhaseWindow(Phase.DECODE, 0.0, 2.0)
    const = integrate_energy(PowerTrace.from_arrays(t, np.full(len(t), 100.0)), w)
    lin = integrate_energy(PowerTrace.from_arrays(t, 100 + 50 * t), w)
    errs = [abs(const - 200.0) / 200.0, abs(lin - 300.0) / 300.0]
    rng = np.random.default_rng(0)
    worst_add = worst_scale = 0.0
    for _ in range(1000):
        n = int(rng.integers(3, 60))
        ts = np.concatenate([[0.0], np.cumsum(rng.uniform(0.026, 0.149, n - 1))])
        tr = PowerTrace.from_arrays(ts, rng.uniform(60, 700, n))
        a, b, c = np.sort(rng.uniform(ts[0], ts[-1], 3))
        if not a < b < c:
            continue
        whole = integrate_energy(tr, PhaseWindow("decode", a, c))
        parts = integrate_energy(tr, PhaseWindow("decode", a, b)) + integrate_energy(tr, PhaseWindow("decode", b, c))
        worst_add = max(worst_add, abs(parts - whole) / whole)
        k = float(rng.uniform(0.1, 1.9))
        worst_scale = max(worst_scale, abs(integrate_energy(tr.scaled(k), PhaseWindow("decode", a, c)) - k * whole) / (k * whole))
    elapsed = time.perf_counter() - t0
    ok = max(errs) < 1e-12 and worst_add < 1e-12 and worst_scale < 1e-12 and elapsed < 1.0
    verdict(1, ok, f"const/linear rel err {max(errs):.1e}, additivity {worst_add:.1e}, "
                   f"scaling {worst_scale:.1e} over 1000 traces in {elapsed:.2f} s")


# 2 -----------------------------------------------------------------------------

def test_c2_fallback_and_counter_rules(verdict):
    t = np.arange(0.0, 2.0 + 1e-9, 0.05)
    tr = PowerTrace.from_arrays(t, np.full(len(t), 100.0))
    checks = {}
    m = energy_with_fallback(tr, PhaseWindow("prefill", 0.5, 0.55, snapshot_power=150.0))
    checks["50 ms -> snapshot x latency = 7.5 J"] = m.method is EnergyMethod.SNAPSHOT_FALLBACK and m.energy == pytest.approx(7.5)
    m = energy_with_fallback(tr, PhaseWindow("prefill", 0.5, 0.6, snapshot_power=150.0))
    checks["100 ms -> trapezoid"] = m.method is EnergyMethod.TRAPEZOID and m.energy == pytest.approx(10.0)
    m = energy_with_fallback(tr, PhaseWindow("prefill", 0.5, 0.7, snapshot_power=150.0))
    checks["200 ms -> trapezoid"] = m.method is EnergyMethod.TRAPEZOID and m.energy == pytest.approx(20.0)
    base = EnergyMeasurement(100.0, EnergyMethod.TRAPEZOID)
    v = lambda d, c: cross_validate(base, PhaseWindow("decode", 0.0, d, counter_energy=c))
    checks["1 s, 1.5% gap agrees"] = v(1.0, 101.5).validation is CounterValidation.AGREES
    checks["1 s, 10% gap flagged"] = v(1.0, 110.0).validation is CounterValidation.DISAGREES
    checks["200 ms, 3% gap flagged"] = v(0.2, 103.0).validation is CounterValidation.DISAGREES
    checks["150 ms, 10% gap not checked"] = v(0.15, 110.0).validation is CounterValidation.UNAVAILABLE
    checks["counter never overrides"] = v(1.0, 110.0).energy == 100.0
    failed = [k for k, ok in checks.items() if not ok]
    verdict(2, not failed, f"{len(checks) - len(failed)}/{len(checks)} rule checks hold" + (f"; failed {failed}" if failed else ""))


# 3 -----------------------------------------------------------------------------

def test_c3_cap_table_inertness(verdict):
    table = load_cap_table()
    res = {a: detect_cap_inertness(table[a], LOCKS) for a in ("GQA", "GDN", "MLA")}
    anomalies = [(a, x) for a, v in res.items() for x in v.anomalies]
    ok = (all(v.verdict is Inertness.INERT for v in res.values())
          and len(anomalies) == 1
          and anomalies[0][0] == "GQA"
          and (anomalies[0][1].cap, anomalies[0][1].clock, anomalies[0][1].power) == (420.0, 1590.0, 200.0)
          and anomalies[0][1].tag == "throttling_artefact")
    verdict(3, ok, f"verdicts {[(a, v.verdict.value) for a, v in res.items()]}, anomalies "
                   f"{[(a, x.cap, x.clock, x.power, x.tag) for a, x in anomalies]}")


# 4 -----------------------------------------------------------------------------

def test_c4_clamp_detection(verdict):
    pairs = {1980: 1830, 1830: 1830, 1590: 1590, 1185: 1185, 780: 780, 390: 390}
    r = detect_clock_clamp(pairs)
    exact = [h for h in r.honoured if h < r.ceiling]
    ok = r.clamp_detected and r.ceiling == 1830 and exact == [390.0, 780.0, 1185.0, 1590.0] and r.clamped == (1980.0,)
    verdict(4, ok, f"ceiling {r.ceiling:.0f} MHz, honoured exactly {exact}, clamped {list(r.clamped)}")


# 5 -----------------------------------------------------------------------------

def test_c5_pareto_oracle(verdict):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(500):
        n = int(rng.integers(0, 51))
        # coarse integer coordinates force plenty of ties and duplicates
        xy = rng.integers(1, 15, size=(n, 2)).astype(float)
        pts = [ParetoPoint(x, y, str(i)) for i, (x, y) in enumerate(xy)]
        if pareto_frontier(pts) != brute_frontier(pts):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    verdict(5, mismatches == 0 and elapsed < 5.0, f"{mismatches} mismatches on 500 sets in {elapsed:.2f} s")


# 6 -----------------------------------------------------------------------------

def test_c6a_clamped_band_wastes_power(verdict, full_sweep, cmap):
    lines, ok = [], True
    for arch in ARCHS:
        tput, pw = [], []
        for cell, group in decode_cells(full_sweep).items():
            if cell[0] != arch:
                continue
            locks = [a for a in group if a.lever == "lock"]
            r = detect_clock_clamp({a.level: a.actual_clock_mhz for a in locks},
                                   {a.level: (a.tok_per_s, a.power_w) for a in locks})
            assert (r.wasted_band.honoured_lock, r.wasted_band.clamped_lock) == (1590.0, 1980.0)
            tput.append(abs(r.wasted_band.throughput_delta))
            pw.append(r.wasted_band.power_delta)
        t_med, p_med = float(np.median(tput)), float(np.median(pw))
        good = t_med < 0.005 and 0.05 <= p_med <= 0.15
        ok &= good
        lines.append(f"{arch} dtput {100 * t_med:.2f}% dpower {100 * p_med:.1f}%")
    verdict("6a", ok, "; ".join(lines) + " (medians over decode cells)")


def test_c6b_780_saving_band(verdict, cmap):
    lines, ok = [], True
    for arch in ARCHS:
        ch = cmap[(arch, "decode", 1, 1024)]
        s = ch.saving(780.0)
        ok &= 0.20 <= s <= 0.35
        lines.append(f"{arch} {100 * s:.1f}%")
    gdn_w = cmap[("GDN", "decode", 1, 1024)].power_w[780.0]
    ok &= abs(gdn_w - 117) <= 0.10 * 117
    verdict("6b", ok, "savings " + ", ".join(lines) + f"; GDN at 780 MHz draws {gdn_w:.1f} W")


def test_c6c_lock_dominates_cap(verdict, full_sweep):
    n = dominated = degenerate = 0
    for cell, group in decode_cells(full_sweep).items():
        lock = [ParetoPoint(a.tok_per_s, a.tok_per_j, f"lock {a.level}") for a in group if a.lever == "lock"]
        cap = [ParetoPoint(a.tok_per_s, a.tok_per_j, f"cap {a.level}") for a in group if a.lever == "cap"]
        v = dominance_verdict(lock, cap)
        n += 1
        dominated += v.dominated
        degenerate += v.degenerate
    verdict("6c", n > 0 and dominated == n and degenerate == n,
            f"{dominated}/{n} decode cells dominated by locks, {degenerate}/{n} cap sets degenerate")


def test_c6d_dvfs_classes(verdict, cmap):
    got = {a: c.kind for a, c in classify_architectures(cmap).items()}
    want = {"GQA": DvfsKind.BATCH_INVARIANT, "GQA-ctrl": DvfsKind.BATCH_INVARIANT, "MLA": DvfsKind.BATCH_SENSITIVE,
            "Mamba2": DvfsKind.BATCH_SENSITIVE, "GDN": DvfsKind.COMPUTE_LIGHT}
    verdict("6d", got == want, ", ".join(f"{a} {k.value}" for a, k in sorted(got.items())))


def _ctx_curve(cmap, arch, batch, contexts):
    return [cmap[(arch, "decode", batch, c)].mj_per_tok[1980.0] for c in contexts]


def test_c6e_mla_gqa_ctrl_crossover(verdict, cmap):
    ctx = [1024, 4096, 16384, 65536]
    r32 = find_crossover(ctx, _ctx_curve(cmap, "MLA", 32, ctx), _ctx_curve(cmap, "GQA-ctrl", 32, ctx),
                         CrossoverAxis.CONTEXT, ("MLA", "GQA-ctrl"), 32)
    r1 = find_crossover(ctx, _ctx_curve(cmap, "MLA", 1, ctx), _ctx_curve(cmap, "GQA-ctrl", 1, ctx),
                        CrossoverAxis.CONTEXT, ("MLA", "GQA-ctrl"), 1)
    ok = r32.threshold is not None and 2048 <= r32.threshold <= 8192 and r1.threshold is None
    verdict("6e", ok, f"BS 32 crossover at {r32.threshold:.0f} tokens, BS 1 crossover {r1.threshold}"
            if r32.threshold else f"BS 32 crossover missing, BS 1 {r1.threshold}")


def test_c6f_total_request_energy_crossover(verdict, full_sweep, cmap):
    lens = list(range(0, 4097, 16))
    out, ok = [], True
    for name, m in (("Pareto-5%", optimal_clock_map(full_sweep, PARETO_LOSS_BUDGET)), ("min-energy", cmap)):
        variant = "budget" if name == "Pareto-5%" else "min_energy"
        a = request_energy_curve(m, "Mamba2", 32, 16384, lens, variant)
        b = request_energy_curve(m, "GQA", 32, 16384, lens, variant)
        r = find_crossover(lens, a.joules, b.joules, CrossoverAxis.OUTPUT_TOKENS, ("Mamba2", "GQA"), 32)
        ok &= r.threshold is not None and 500 <= r.threshold <= 2000
        out.append(f"{name} clocks {a.decode_clock:.0f}/{b.decode_clock:.0f} MHz -> {r.threshold:.0f} tokens"
                   if r.threshold else f"{name}: none")
    verdict("6f", ok, "; ".join(out))


def test_c6g_context_growth(verdict, cmap):
    bands = {"GQA": (2.0, 2.5), "MLA": (1.3, 1.55), "Mamba2": (1.05, 1.25)}
    lines, ok = [], True
    for arch, (lo, hi) in bands.items():
        r = cmap[(arch, "decode", 32, 16384)].mj_per_tok[1980.0] / cmap[(arch, "decode", 32, 4096)].mj_per_tok[1980.0]
        ok &= lo <= r <= hi
        lines.append(f"{arch} {r:.3f}")
    verdict("6g", ok, "4K->16K ratios " + ", ".join(lines))


def test_c6h_batch_amortization(verdict, cmap):
    r = cmap[("GQA", "decode", 1, 1024)].mj_per_tok[1980.0] / cmap[("GQA", "decode", 32, 1024)].mj_per_tok[1980.0]
    verdict("6h", r > 15, f"GQA BS 1->32 energy-per-token reduction {r:.1f}x")


# 7 -----------------------------------------------------------------------------

class _Killed(Exception):
    pass


class _KillingSink(RecordSink):
    def __init__(self, path, after):
        super().__init__(path)
        self.left = after

    def append(self, record):
        if self.left == 0:
            raise _Killed
        self.left -= 1
        super().append(record)


def test_c7_determinism_and_resume(verdict, model, tmp_path):
    spec, profiles, power = model
    grid = SweepGrid(architectures=("GQA", "MLA"), batches=(1, 8), contexts=(1024, 4096), output_len=32)
    configs = plan(grid)
    fixed = lambda: 0.0  # wall-clock timestamps are the only non-reproducible field

    def sweep(path, noise, sink=None):
        sink = sink or RecordSink(path)
        be = SimulatedBackend(spec, profiles, power, noise=noise)
        execute(configs, be, sink, grid.repetitions, grid.warmup, seed=7, clock=fixed)
        return path.read_bytes()

    a = sweep(tmp_path / "a.jsonl", 0.0)
    b = sweep(tmp_path / "b.jsonl", 0.0)
    full = sweep(tmp_path / "full.jsonl", 0.005)
    kill_at = len(configs) * grid.repetitions // 2 + 3  # mid-config
    with pytest.raises(_Killed):
        sweep(tmp_path / "resumed.jsonl", 0.005, _KillingSink(tmp_path / "resumed.jsonl", kill_at))
    partial = len((tmp_path / "resumed.jsonl").read_text().splitlines())
    resumed = sweep(tmp_path / "resumed.jsonl", 0.005)
    ok = a == b and resumed == full and partial == kill_at
    verdict(7, ok, f"sigma=0 sweeps byte-identical: {a == b}; killed after {partial} records and resumed: "
                   f"identical to uninterrupted ({len(full.splitlines())} records): {resumed == full}")


# 8 -----------------------------------------------------------------------------

def test_c8_policy_round_trip(verdict, cmap, model, tmp_path, caplog):
    spec, profiles, power = model
    policy = synthesize(classify_architectures(cmap), cmap, 0.01, spec.base_clock)
    # a hand-written entry above the base clock exercises the clamp path end to end
    extra = PolicyEntry("GQA", "decode", (1, 32), (65537, 131072), 1980.0, 0.0, 0.0, 0.0, ("manual",))
    policy = dataclasses.replace(policy, entries=policy.entries + (extra,))
    export_policy(policy, tmp_path / "policy.json")
    loaded = import_policy(tmp_path / "policy.json")
    backend = SimulatedBackend(spec, profiles, power)
    honoured = clamped = 0
    problems = []
    for e in loaded.entries:
        caplog.clear()
        with caplog.at_level(logging.WARNING, logger="dvfs_energy.policy"):
            applied = apply(loaded, backend, e.arch, e.phase, e.batch_band[0], e.context_band[1])
        actual = applied.state.actual_clock
        if applied.entry != e:
            problems.append(f"{e.key}: lookup returned another entry")
        elif e.lock_mhz < spec.base_clock:
            honoured += actual == e.lock_mhz
            if actual != e.lock_mhz:
                problems.append(f"{e.key}: {actual}")
        else:
            logged = "device runs at" in caplog.text
            if actual != spec.base_clock or (e.lock_mhz > spec.base_clock) != logged:
                problems.append(f"{e.key}: actual {actual}, logged {logged}")
            clamped += 1
    ok = loaded == policy and not problems
    verdict(8, ok, f"round trip identical: {loaded == policy}; {honoured} honoured entries at their lock; "
                   f"{clamped} entries at/above base run at {spec.base_clock:.0f} MHz with divergence logged "
                   f"when above" + (f"; problems {problems[:3]}" if problems else ""))
