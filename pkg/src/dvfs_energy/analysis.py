"""Offline analysis of aggregated sweep data.

Everything here is a pure function of aggregates (or of plain numbers), so
reports can be regenerated from historical records without a backend.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import AxisMismatch, IncompleteCell
from .telemetry import Phase

DOMINANCE_MARGIN = 0.01
DEGENERATE_SPREAD = 0.03
INERT_POWER_TOL = 0.02  # relative power deviation tolerated before a row is an anomaly
DEFAULT_LOSS_BUDGET = 0.01
PARETO_LOSS_BUDGET = 0.05


def energy_per_token(energy_j: float, phase, batch: int, context: int, output_len: int) -> float:
    """Phase energy in mJ per token: prompt x batch for prefill, output x batch for decode."""
    tokens = (context if Phase(phase) is Phase.PREFILL else output_len) * batch
    if tokens == 0:
        raise ZeroDivisionError("energy per token undefined for zero tokens")
    return 1e3 * energy_j / tokens


# -- Pareto --------------------------------------------------------------------

@dataclass(frozen=True)
class ParetoPoint:
    throughput: float  # tok/s
    efficiency: float  # tok/J
    label: str = ""

    def __post_init__(self):
        if not (self.throughput > 0 and self.efficiency > 0):
            raise ValueError("Pareto coordinates must be positive")


def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    return (a.throughput >= b.throughput and a.efficiency >= b.efficiency
            and (a.throughput > b.throughput or a.efficiency > b.efficiency))


def pareto_frontier(points: Iterable[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated points (both coordinates maximised), sorted by throughput.

    Exact duplicates of a frontier point are all kept. O(n log n): sweep
    throughput groups from high to low, keeping points whose efficiency
    beats everything seen at strictly higher throughput.
    """
    pts = sorted(points, key=lambda p: (-p.throughput, -p.efficiency))
    out: list[ParetoPoint] = []
    best_higher = -math.inf
    i = 0
    while i < len(pts):
        j = i
        while j < len(pts) and pts[j].throughput == pts[i].throughput:
            j += 1
        top = pts[i].efficiency
        if top > best_higher:
            out.extend(p for p in pts[i:j] if p.efficiency == top)
            best_higher = top
        i = j
    return sorted(out, key=lambda p: (p.throughput, p.efficiency))


@dataclass(frozen=True)
class DominanceWitness:
    cap_label: str
    lock_label: Optional[str]
    throughput_gain: float  # lock / cap - 1
    efficiency_gain: float


@dataclass(frozen=True)
class DominanceVerdict:
    dominated: bool
    degenerate: bool
    witnesses: tuple
    margin: float


def _margin_dominates(lock: ParetoPoint, cap: ParetoPoint, margin: float) -> bool:
    lo, hi = 1.0 - margin, 1.0 + margin
    weak = lock.throughput >= lo * cap.throughput and lock.efficiency >= lo * cap.efficiency
    strict = lock.throughput >= hi * cap.throughput or lock.efficiency >= hi * cap.efficiency
    return weak and strict


def _spread(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=float)
    return float((v.max() - v.min()) / np.median(v))


def dominance_verdict(
    lock_points: Sequence[ParetoPoint],
    cap_points: Sequence[ParetoPoint],
    margin: float = DOMINANCE_MARGIN,
    degenerate_spread: float = DEGENERATE_SPREAD,
) -> DominanceVerdict:
    """Is every cap point beaten by some lock point beyond the noise margin?

    A lock point witnesses a cap point when it is no worse than the cap point
    by more than ``margin`` in either coordinate and better by at least
    ``margin`` in one. Of the witnesses, the one with the largest smaller
    gain is reported. Cap points whose spread is within
    ``degenerate_spread`` in both coordinates are flagged degenerate.
    """
    if not lock_points or not cap_points:
        raise ValueError("dominance_verdict needs non-empty lock and cap sets")
    witnesses = []
    for c in cap_points:
        best, best_score = None, -math.inf
        for l in lock_points:
            if _margin_dominates(l, c, margin):
                score = min(l.throughput / c.throughput, l.efficiency / c.efficiency)
                if score > best_score:
                    best, best_score = l, score
        witnesses.append(DominanceWitness(
            c.label,
            best.label if best else None,
            best.throughput / c.throughput - 1 if best else 0.0,
            best.efficiency / c.efficiency - 1 if best else 0.0,
        ))
    degenerate = (
        _spread([c.throughput for c in cap_points]) <= degenerate_spread
        and _spread([c.efficiency for c in cap_points]) <= degenerate_spread
    )
    return DominanceVerdict(all(w.lock_label is not None for w in witnesses), degenerate, tuple(witnesses), margin)


# -- cap inertness and clock clamp -----------------------------------------------

class Inertness(str, enum.Enum):
    INERT = "inert"
    ENGAGED = "engaged"
    MIXED = "mixed"


@dataclass(frozen=True)
class CapAnomaly:
    cap: float
    clock: float
    power: float
    clock_deviation: float  # MHz relative to the modal row
    power_deviation: float  # W relative to the modal row
    tag: str  # "throttling_artefact" or "power_deviation" or "clock_deviation"


@dataclass(frozen=True)
class InertnessVerdict:
    verdict: Inertness
    anomalies: tuple
    max_power_over_caps: float
    engaged_caps: tuple = ()


def _lock_steps(a: float, b: float, locks: Sequence[float]) -> int:
    locks = sorted(locks)
    ia = int(np.searchsorted(locks, a + 1e-9, side="right"))
    ib = int(np.searchsorted(locks, b + 1e-9, side="right"))
    return abs(ia - ib)


def detect_cap_inertness(
    rows: dict,
    supported_locks: Sequence[float] = (390.0, 780.0, 1185.0, 1590.0, 1830.0, 1980.0),
    engaged_tol: float = INERT_POWER_TOL,
    power_tol: float = INERT_POWER_TOL,
) -> InertnessVerdict:
    """Classify a cap sweep ``{cap W: (actual clock MHz, actual power W)}``.

    * inert: peak power stays below the lowest cap and the clock spread is at
      most one supported step;
    * engaged: power sits at the cap in at least two rows and the clock does
      not rise as the cap tightens;
    * mixed: anything else.

    Rows departing from the modal (clock, power) are listed as anomalies; a
    lower clock together with lower power is tagged as a throttling artefact.
    """
    if len(rows) < 2:
        raise ValueError("need at least two cap levels")
    caps = sorted(rows)
    clocks = np.array([rows[c][0] for c in caps], dtype=float)
    powers = np.array([rows[c][1] for c in caps], dtype=float)
    max_power = float(powers.max())

    modal_clock = Counter(clocks.tolist()).most_common(1)[0][0]
    modal_power = float(np.median(powers[clocks == modal_clock]))
    anomalies = []
    for cap, f, p in zip(caps, clocks, powers):
        dclock, dpower = f - modal_clock, p - modal_power
        if dclock == 0 and abs(dpower) <= power_tol * modal_power:
            continue
        if dclock < 0 and dpower < 0:
            tag = "throttling_artefact"
        elif dclock == 0:
            tag = "power_deviation"
        else:
            tag = "clock_deviation"
        anomalies.append(CapAnomaly(float(cap), float(f), float(p), float(dclock), float(dpower), tag))

    engaged = tuple(float(c) for c, p in zip(caps, powers) if p >= (1 - engaged_tol) * c)
    spread_ok = _lock_steps(clocks.min(), clocks.max(), supported_locks) <= 1
    if max_power < min(caps) and spread_ok:
        verdict = Inertness.INERT
    elif len(engaged) >= 2 and bool(np.all(np.diff(clocks) >= 0)):
        verdict = Inertness.ENGAGED
    else:
        verdict = Inertness.MIXED
    return InertnessVerdict(verdict, tuple(anomalies), max_power, engaged)


@dataclass(frozen=True)
class WastedBand:
    honoured_lock: float
    clamped_lock: float
    throughput_delta: float  # clamped / honoured - 1
    power_delta: float


@dataclass(frozen=True)
class ClampReport:
    clamp_detected: bool
    ceiling: float  # max actual clock under locks
    honoured: tuple  # requests reached exactly
    clamped: tuple  # requests reduced by firmware
    max_honoured: Optional[float]
    wasted_band: Optional[WastedBand] = None


def detect_clock_clamp(pairs: dict, measurements: Optional[dict] = None) -> ClampReport:
    """Compare requested and actual clocks ``{requested: actual}``.

    ``measurements`` optionally maps requested locks to ``(tok/s, W)``; the
    wasted band then compares the highest clamped request with the highest
    honoured one.
    """
    if not pairs:
        raise ValueError("need at least one (requested, actual) pair")
    honoured = tuple(sorted(float(r) for r, a in pairs.items() if a == r))
    clamped = tuple(sorted(float(r) for r, a in pairs.items() if a < r))
    ceiling = float(max(pairs.values()))
    max_honoured = honoured[-1] if honoured else None
    # a request at the ceiling itself is honoured; the useful band ends below it
    below = [h for h in honoured if h < ceiling]
    band = None
    if measurements and clamped and below:
        lo, hi = below[-1], clamped[-1]
        if lo in measurements and hi in measurements:
            (t_lo, p_lo), (t_hi, p_hi) = measurements[lo], measurements[hi]
            band = WastedBand(lo, hi, t_hi / t_lo - 1.0, p_hi / p_lo - 1.0)
    return ClampReport(bool(clamped), ceiling, honoured, clamped, max_honoured, band)


# -- clock maps and classes ------------------------------------------------------

@dataclass(frozen=True)
class ClockChoice:
    cell: tuple  # (arch, phase, batch, context)
    min_energy_clock: float
    budget_clock: float
    reference_clock: float
    mj_per_tok: dict  # lock -> median mJ/tok
    tok_per_s: dict
    power_w: dict
    config_ids: dict

    def loss(self, lock: float) -> float:
        return 1.0 - self.tok_per_s[lock] / self.tok_per_s[self.reference_clock]

    def saving(self, lock: float) -> float:
        return 1.0 - self.mj_per_tok[lock] / self.mj_per_tok[self.reference_clock]


def optimal_clock_map(aggregates, loss_budget: float = DEFAULT_LOSS_BUDGET, clocks: Optional[Sequence[float]] = None) -> dict:
    """Per cell: energy-minimising lock and lowest lock within the loss budget.

    Uses lock-sweep aggregates only; the reference is the highest lock in
    the sweep. Budget ties resolve to the lower clock.
    """
    locks = [a for a in aggregates if a.lever == "lock"]
    levels = sorted({float(c) for c in clocks} if clocks is not None else {a.level for a in locks})
    cells: dict = {}
    for a in locks:
        cells.setdefault(a.cell, {})[a.level] = a
    out = {}
    for cell, by_lock in sorted(cells.items()):
        missing = [c for c in levels if c not in by_lock]
        if missing:
            raise IncompleteCell(f"cell {cell} is missing clock levels {missing}", missing)
        ref = levels[-1]
        e = {c: by_lock[c].mj_per_tok for c in levels}
        t = {c: by_lock[c].tok_per_s for c in levels}
        min_e = min(levels, key=lambda c: (e[c], c))
        budget = next(c for c in levels if 1.0 - t[c] / t[ref] <= loss_budget)
        out[cell] = ClockChoice(
            cell, min_e, budget, ref, e, t,
            {c: by_lock[c].power_w for c in levels},
            {c: by_lock[c].config_id for c in levels},
        )
    return out


class DvfsKind(str, enum.Enum):
    BATCH_INVARIANT = "batch_invariant"
    BATCH_SENSITIVE = "batch_sensitive"
    COMPUTE_LIGHT = "compute_light"
    UNCLASSIFIED = "unclassified"


@dataclass(frozen=True)
class DvfsClass:
    kind: DvfsKind
    evidence: tuple  # budget clock by ascending batch
    batches: tuple = ()


def classify_dvfs(evidence: Sequence[float], clock_levels: Sequence[float], batches: Sequence[int] = ()) -> DvfsClass:
    """Classify a budget-clock-by-batch row using only indices into ``clock_levels``.

    compute_light: every batch at the lowest level. batch_invariant: at most
    one step of spread and never at the top (reference) level.
    batch_sensitive: the largest batch sits at least two steps above the
    smallest. Checked in that order; anything else is unclassified.
    """
    if len(evidence) < 2:
        raise ValueError("classification needs at least two batch levels")
    levels = sorted(clock_levels)
    idx = [levels.index(c) for c in evidence]
    top = len(levels) - 1
    if all(i == 0 for i in idx):
        kind = DvfsKind.COMPUTE_LIGHT
    elif max(idx) - min(idx) <= 1 and max(idx) < top:
        kind = DvfsKind.BATCH_INVARIANT
    elif idx[-1] - idx[0] >= 2:
        kind = DvfsKind.BATCH_SENSITIVE
    else:
        kind = DvfsKind.UNCLASSIFIED
    return DvfsClass(kind, tuple(evidence), tuple(batches))


def classify_architectures(clock_map: dict, context: Optional[int] = None, phase: str = "decode") -> dict:
    """Class per architecture from the decode map row at ``context`` (default: shortest)."""
    rows: dict = {}
    for (arch, ph, batch, ctx), choice in clock_map.items():
        if ph == phase:
            rows.setdefault(arch, {}).setdefault(ctx, {})[batch] = choice
    out = {}
    for arch, by_ctx in sorted(rows.items()):
        ctx = context if context is not None else min(by_ctx)
        row = by_ctx[ctx]
        batches = sorted(row)
        levels = sorted(next(iter(row.values())).tok_per_s)
        out[arch] = classify_dvfs([row[b].budget_clock for b in batches], levels, batches)
    return out


# -- crossovers and request energy -----------------------------------------------

class CrossoverAxis(str, enum.Enum):
    CONTEXT = "context"
    OUTPUT_TOKENS = "output_tokens"


@dataclass(frozen=True)
class CrossoverReport:
    axis: CrossoverAxis
    threshold: Optional[float]
    pair: tuple
    batch: Optional[int] = None


def find_crossover(
    axis_values: Sequence[float],
    curve_a: Sequence[float],
    curve_b: Sequence[float],
    axis: CrossoverAxis = CrossoverAxis.CONTEXT,
    pair: tuple = ("A", "B"),
    batch: Optional[int] = None,
    axis_b: Optional[Sequence[float]] = None,
) -> CrossoverReport:
    """First sign change of A - B, refined by linear interpolation.

    ``axis_b`` may give B's own sample points; they must equal ``axis_values``.
    """
    x = np.asarray(axis_values, dtype=float)
    if axis_b is not None and not np.array_equal(x, np.asarray(axis_b, dtype=float)):
        raise AxisMismatch("curves are sampled on different axis points")
    a, b = np.asarray(curve_a, dtype=float), np.asarray(curve_b, dtype=float)
    if not (len(x) == len(a) == len(b)):
        raise AxisMismatch("curve lengths differ from the axis")
    if len(x) < 3:
        raise ValueError("need at least three axis samples")
    d = a - b
    threshold = None
    for i in range(len(x) - 1):
        if d[i] == 0 and i > 0:
            threshold = float(x[i])
            break
        if d[i] * d[i + 1] < 0:
            threshold = float(x[i] + (x[i + 1] - x[i]) * d[i] / (d[i] - d[i + 1]))
            break
    return CrossoverReport(CrossoverAxis(axis), threshold, tuple(pair), batch)


@dataclass(frozen=True)
class RequestEnergyCurve:
    arch: str
    context: int
    batch: int
    prefill_clock: float
    decode_clock: float
    output_lens: tuple
    joules: tuple  # per sequence


def total_request_energy(
    prefill_mj_per_tok: float,
    decode_mj_per_tok: float,
    context: int,
    output_len,
) -> np.ndarray:
    """Per-sequence joules: prompt energy plus output_len decode tokens."""
    n = np.asarray(output_len, dtype=float)
    if np.any(n < 0):
        raise ValueError("output_len must be non-negative")
    return 1e-3 * (prefill_mj_per_tok * context + decode_mj_per_tok * n)


def request_energy_curve(
    clock_map: dict,
    arch: str,
    batch: int,
    context: int,
    output_lens: Sequence[int],
    variant: str = "budget",
) -> RequestEnergyCurve:
    """Total-energy curve at the per-phase policy clock from a clock map.

    ``variant`` is "budget" (the map's budget clock) or "min_energy".
    """
    clocks, energies = [], []
    for phase in ("prefill", "decode"):
        try:
            choice = clock_map[(arch, phase, batch, context)]
        except KeyError:
            raise IncompleteCell(f"no {phase} sweep for {arch} at batch {batch}, context {context}",
                                 [(arch, phase, batch, context)]) from None
        c = choice.budget_clock if variant == "budget" else choice.min_energy_clock
        clocks.append(c)
        energies.append(choice.mj_per_tok[c])
    j = total_request_energy(energies[0], energies[1], context, output_lens)
    return RequestEnergyCurve(arch, context, batch, clocks[0], clocks[1],
                              tuple(int(n) for n in output_lens), tuple(float(v) for v in j))


# -- report export -------------------------------------------------------------

def _csv_text(header: Sequence[str], rows: Iterable[Sequence], preamble: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in preamble:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def frontier_csv(points: Sequence[ParetoPoint], preamble: Sequence[str] = ()) -> str:
    front = set(id(p) for p in pareto_frontier(points))
    rows = [(p.label, f"{p.throughput:.6g}", f"{p.efficiency:.6g}", int(id(p) in front)) for p in points]
    return _csv_text(("label", "tok_s", "tok_per_j", "on_frontier"), rows, preamble)


def curves_csv(curves: Sequence[RequestEnergyCurve], variant: str, preamble: Sequence[str] = ()) -> str:
    rows = []
    for c in curves:
        for n, j in zip(c.output_lens, c.joules):
            rows.append((c.arch, c.batch, c.context, variant, c.prefill_clock, c.decode_clock, n, f"{j:.6g}"))
    return _csv_text(("arch", "batch", "context", "variant", "prefill_clock_mhz", "decode_clock_mhz",
                      "output_tokens", "joules_per_sequence"), rows, preamble)


def to_jsonable(obj):
    """Dataclasses, enums and tuples to plain JSON types."""
    if hasattr(obj, "__dataclass_fields__"):
        return {k: to_jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, dict):
        return {(str(k) if not isinstance(k, str) else k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def plot_manifest(data_file: str, x: str, y: str, series: Sequence[str], kind: str, meta: dict) -> dict:
    """Machine-readable description of a data file's axes and series."""
    return {"data": data_file, "kind": kind, "x": x, "y": y, "series": list(series), "meta": meta}
