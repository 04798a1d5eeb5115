"""Static clock policies: synthesis from clock maps, file round-trip, apply.

Bands are closed integer intervals. For every swept architecture and phase
the batch bands cover ``[1, max batch]`` and the context bands cover
``[1, max context]`` without overlap; a runtime value between two grid
points falls into the band of the next larger grid point, whose budget
clock is the conservative one when loss grows with load.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from .analysis import ClockChoice, DvfsClass, DvfsKind
from .errors import DvfsEnergyError, PolicyApplyError

log = logging.getLogger(__name__)

PREFILL_MIN_SAVING = 0.05
POLICY_FORMAT = 1


@dataclass(frozen=True)
class PolicyEntry:
    arch: str
    phase: str
    batch_band: tuple  # (lo, hi) inclusive
    context_band: tuple
    lock_mhz: float
    expected_power_saving_w: float
    expected_power_saving_pct: float
    expected_throughput_loss_pct: float
    provenance: tuple = ()  # config ids

    def matches(self, arch: str, phase: str, batch: int, context: int) -> bool:
        return (self.arch == arch and self.phase == phase
                and self.batch_band[0] <= batch <= self.batch_band[1]
                and self.context_band[0] <= context <= self.context_band[1])

    @property
    def key(self) -> str:
        return (f"{self.arch}/{self.phase} batch {self.batch_band[0]}-{self.batch_band[1]} "
                f"context {self.context_band[0]}-{self.context_band[1]}")


@dataclass(frozen=True)
class ClockPolicy:
    entries: tuple
    default_lock_mhz: float
    budget: float
    omitted: dict = field(default_factory=dict)  # arch -> reason
    meta: dict = field(default_factory=dict)

    def lookup(self, arch: str, phase: str, batch: int, context: int) -> Optional[PolicyEntry]:
        """Matching entry, or None meaning the default lock applies."""
        for e in self.entries:
            if e.matches(arch, phase, batch, context):
                return e
        return None

    def lock_for(self, arch: str, phase: str, batch: int, context: int) -> float:
        e = self.lookup(arch, phase, batch, context)
        return e.lock_mhz if e else self.default_lock_mhz


def _bands(grid_values: list[int]) -> list[tuple]:
    vals = sorted(grid_values)
    lows = [1] + [v + 1 for v in vals[:-1]]
    return list(zip(lows, vals))


def _cell_lock(choice: ClockChoice, kind: Optional[DvfsKind], phase: str, budget: float, base_clock: float) -> float:
    levels = sorted(choice.tok_per_s)
    if phase == "prefill":
        ok = [c for c in levels if choice.loss(c) <= budget]
        best = min(ok, key=lambda c: (choice.mj_per_tok[c], c))
        return best if choice.saving(best) >= PREFILL_MIN_SAVING else choice.reference_clock
    if kind is DvfsKind.COMPUTE_LIGHT:
        return levels[0]
    return choice.budget_clock


def _pick_lock(cells: list[ClockChoice], floor: float, budget: float) -> float:
    """Lowest lock >= floor that keeps every covered cell within budget."""
    levels = sorted(cells[0].tok_per_s)
    for c in levels:
        if c >= floor and all(ch.loss(c) <= budget for ch in cells):
            return c
    return levels[-1]


def _entry(arch, phase, bb, cb, cells: list[ClockChoice], lock: float, base_clock: float) -> PolicyEntry:
    ref = cells[0].reference_clock
    savings_w = [ch.power_w[ref] - ch.power_w[lock] for ch in cells]
    savings_pct = [100.0 * (1 - ch.power_w[lock] / ch.power_w[ref]) for ch in cells]
    loss_pct = [100.0 * ch.loss(lock) for ch in cells]
    prov = sorted({ch.config_ids[lock] for ch in cells} | {ch.config_ids[ref] for ch in cells})
    # requests at or above the base clock run at the base clock; write what the device will do
    return PolicyEntry(
        arch, phase, tuple(bb), tuple(cb), float(min(lock, base_clock)),
        round(min(savings_w), 3), round(min(savings_pct), 3), round(max(loss_pct), 4), tuple(prov),
    )


def synthesize(
    classes: dict,
    clock_map: dict,
    budget: float = 0.01,
    base_clock: float = 1830.0,
    meta: Optional[dict] = None,
) -> ClockPolicy:
    """Build a policy from per-architecture classes and a clock map.

    Decode locks follow the class: compute_light runs at the lowest level,
    batch_invariant gets one lock across all batches of a context band, and
    batch_sensitive is split where the budget clock rises (made monotone in
    batch). Prefill keeps the reference clock unless a lock within budget
    saves at least 5% energy. Adjacent context bands with identical entries
    are merged. Unclassified architectures are omitted with the reason.
    """
    omitted = {}
    entries = []
    by_arch: dict = {}
    for (arch, phase, batch, ctx), ch in clock_map.items():
        by_arch.setdefault(arch, {}).setdefault(phase, {}).setdefault(ctx, {})[batch] = ch
    for arch in sorted(by_arch):
        cls: Optional[DvfsClass] = classes.get(arch)
        if cls is None:
            omitted[arch] = "no DVFS class available"
            continue
        if cls.kind is DvfsKind.UNCLASSIFIED:
            omitted[arch] = f"unclassified; budget clock by batch {list(cls.evidence)}"
            continue
        for phase in sorted(by_arch[arch]):
            rows = by_arch[arch][phase]
            ctx_bands = dict(zip(sorted(rows), _bands(list(rows))))
            per_ctx = []
            for ctx in sorted(rows):
                row = rows[ctx]
                batches = sorted(row)
                batch_bands = dict(zip(batches, _bands(batches)))
                cell_locks = [_cell_lock(row[b], cls.kind, phase, budget, base_clock) for b in batches]
                if phase == "decode" and cls.kind is DvfsKind.BATCH_INVARIANT:
                    groups = [(batches, max(cell_locks))]
                else:
                    # monotone envelope, then runs of equal lock
                    env, runs = [], []
                    for b, l in zip(batches, cell_locks):
                        env.append(max([l] + env[-1:]))
                        if runs and runs[-1][1] == env[-1]:
                            runs[-1][0].append(b)
                        else:
                            runs.append(([b], env[-1]))
                    groups = runs
                ctx_entries = []
                for bs, floor in groups:
                    cells = [row[b] for b in bs]
                    lock = _pick_lock(cells, floor, budget)
                    bb = (batch_bands[bs[0]][0], batch_bands[bs[-1]][1])
                    ctx_entries.append(_entry(arch, phase, bb, ctx_bands[ctx], cells, lock, base_clock))
                per_ctx.append(ctx_entries)
            entries.extend(_merge_contexts(per_ctx))
    return ClockPolicy(tuple(entries), float(base_clock), float(budget), omitted, dict(meta or {}))


def _merge_contexts(per_ctx: list[list[PolicyEntry]]) -> list[PolicyEntry]:
    """Merge consecutive context bands whose batch bands and locks coincide."""
    out: list[list[PolicyEntry]] = []
    for group in per_ctx:
        sig = [(e.batch_band, e.lock_mhz) for e in group]
        if out and [(e.batch_band, e.lock_mhz) for e in out[-1]] == sig:
            merged = []
            for prev, cur in zip(out[-1], group):
                merged.append(replace(
                    prev,
                    context_band=(prev.context_band[0], cur.context_band[1]),
                    expected_power_saving_w=min(prev.expected_power_saving_w, cur.expected_power_saving_w),
                    expected_power_saving_pct=min(prev.expected_power_saving_pct, cur.expected_power_saving_pct),
                    expected_throughput_loss_pct=max(prev.expected_throughput_loss_pct,
                                                     cur.expected_throughput_loss_pct),
                    provenance=tuple(sorted(set(prev.provenance) | set(cur.provenance))),
                ))
            out[-1] = merged
        else:
            out.append(list(group))
    return [e for g in out for e in g]


# -- file round trip -------------------------------------------------------------

def policy_to_dict(policy: ClockPolicy) -> dict:
    return {
        "format": POLICY_FORMAT,
        "units": {
            "batch_band": "sequences, inclusive",
            "context_band": "tokens, inclusive",
            "lock_mhz": "MHz",
            "expected_power_saving_w": "W (worst covered cell)",
            "expected_power_saving_pct": "percent (worst covered cell)",
            "expected_throughput_loss_pct": "percent (worst covered cell)",
            "budget": "fraction of reference throughput",
        },
        "budget": policy.budget,
        "default_lock_mhz": policy.default_lock_mhz,
        "entries": [
            {**asdict(e), "batch_band": list(e.batch_band), "context_band": list(e.context_band),
             "provenance": list(e.provenance)}
            for e in policy.entries
        ],
        "omitted": dict(sorted(policy.omitted.items())),
        "meta": policy.meta,
    }


def policy_from_dict(d: dict) -> ClockPolicy:
    entries = tuple(
        PolicyEntry(
            e["arch"], e["phase"], tuple(e["batch_band"]), tuple(e["context_band"]), float(e["lock_mhz"]),
            float(e["expected_power_saving_w"]), float(e["expected_power_saving_pct"]),
            float(e["expected_throughput_loss_pct"]), tuple(e.get("provenance", ())),
        )
        for e in d["entries"]
    )
    return ClockPolicy(entries, float(d["default_lock_mhz"]), float(d["budget"]),
                       dict(d.get("omitted", {})), dict(d.get("meta", {})))


def dumps_policy(policy: ClockPolicy) -> str:
    return json.dumps(policy_to_dict(policy), indent=2, sort_keys=True) + "\n"


def export_policy(policy: ClockPolicy, path) -> None:
    Path(path).write_text(dumps_policy(policy))


def import_policy(path) -> ClockPolicy:
    return policy_from_dict(json.loads(Path(path).read_text()))


# -- apply ---------------------------------------------------------------------

@dataclass(frozen=True)
class AppliedPolicy:
    entry: Optional[PolicyEntry]  # None when the default lock was used
    requested_lock_mhz: float
    state: object  # DvfsState as read back

    @property
    def diverged(self) -> bool:
        return self.state.actual_clock != self.requested_lock_mhz


def apply(policy: ClockPolicy, backend, arch: str, phase: str, batch: int, context: int) -> AppliedPolicy:
    """Issue a single lock request for the runtime context and report the read-back state."""
    entry = policy.lookup(arch, phase, batch, context)
    lock = entry.lock_mhz if entry else policy.default_lock_mhz
    ident = entry.key if entry else f"default entry ({arch}/{phase} batch {batch} context {context})"
    try:
        state = backend.set_lock(lock)
    except DvfsEnergyError as exc:
        raise PolicyApplyError(f"{ident}: backend refused lock {lock:.0f} MHz: {exc}") from exc
    if state.actual_clock != lock:
        log.warning("%s: requested %.0f MHz, device runs at %.0f MHz", ident, lock, state.actual_clock)
    return AppliedPolicy(entry, lock, state)
