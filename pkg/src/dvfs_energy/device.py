"""Analytical model of a DVFS-governed GPU.

Covers the three behaviours that matter for static energy levers:

* clock locks at or above the base clock are silently clamped to it,
* a power cap is a ceiling that only acts when modelled draw exceeds it,
* board power is an idle floor plus a clock-independent memory-side term
  plus an SM term that scales with clock.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.optimize import nnls

from .errors import UnderdeterminedFit, UnsupportedClock
from .telemetry import Phase


@dataclass(frozen=True)
class DeviceSpec:
    name: str = "H200-SXM"
    tdp: float = 700.0  # W
    hbm_bandwidth: float = 4.8e12  # bytes/s
    peak_compute: float = 989e12  # FLOP/s (BF16 dense) at base clock
    idle_power: float = 75.0  # W
    base_clock: float = 1830.0  # MHz
    boost_clock: float = 1980.0  # MHz
    min_clock: float = 390.0  # MHz
    supported_locks: tuple = (390.0, 780.0, 1185.0, 1590.0, 1830.0, 1980.0)
    ridge_intensity: float = 206.0  # FLOP/byte
    rated_memory_clock: float = 3201.0  # MHz; reported unchanged by memory-clock requests
    power_sanity_factor: float = 2.0  # samples above factor * TDP are rejected

    def __post_init__(self):
        locks = tuple(sorted(float(x) for x in self.supported_locks))
        object.__setattr__(self, "supported_locks", locks)
        if not (self.min_clock < self.base_clock < self.boost_clock <= max(locks)):
            raise ValueError("clock ordering violated: need min < base < boost <= max(lock)")
        ratio = self.peak_compute / self.hbm_bandwidth
        if abs(ratio - self.ridge_intensity) > 0.05 * self.ridge_intensity:
            raise ValueError(
                f"ridge_intensity {self.ridge_intensity} inconsistent with peak/bandwidth {ratio:.1f}"
            )

    def lock_index(self, clock: float) -> int:
        """Index of the highest supported lock <= clock."""
        idx = int(np.searchsorted(self.supported_locks, clock + 1e-9, side="right")) - 1
        return max(idx, 0)

    def step_down(self, clock: float) -> float:
        """Next supported level strictly below ``clock`` (or the lowest level)."""
        below = [c for c in self.supported_locks if c < clock - 1e-9]
        return below[-1] if below else self.supported_locks[0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["supported_locks"] = list(self.supported_locks)
        return d


_SPEC_UNITS = {
    "tdp": "tdp_w",
    "hbm_bandwidth": "hbm_bandwidth_bytes_per_s",
    "peak_compute": "peak_compute_flop_per_s",
    "idle_power": "idle_power_w",
    "base_clock": "base_clock_mhz",
    "boost_clock": "boost_clock_mhz",
    "min_clock": "min_clock_mhz",
    "supported_locks": "supported_locks_mhz",
    "ridge_intensity": "ridge_intensity_flop_per_byte",
    "rated_memory_clock": "rated_memory_clock_mhz",
}


def save_device_spec(spec: DeviceSpec, path) -> None:
    d = {_SPEC_UNITS.get(k, k): v for k, v in spec.to_dict().items()}
    Path(path).write_text(json.dumps(d, indent=2) + "\n")


def load_device_spec(path) -> DeviceSpec:
    raw = json.loads(Path(path).read_text())
    inverse = {v: k for k, v in _SPEC_UNITS.items()}
    kwargs = {inverse.get(k, k): v for k, v in raw.items()}
    if "supported_locks" in kwargs:
        kwargs["supported_locks"] = tuple(kwargs["supported_locks"])
    return DeviceSpec(**kwargs)


@dataclass(frozen=True)
class DvfsState:
    """Device control state as read back from the device.

    ``requested_lock`` and ``configured_cap`` record what was asked for;
    ``actual_clock`` is what the device runs at. A state with neither set is
    free-running under the default board limit.
    """

    actual_clock: float
    requested_lock: Optional[float] = None
    configured_cap: Optional[float] = None
    cap_engaged: bool = False
    throttled: bool = False
    cap_floor_hit: bool = False

    @property
    def free_running(self) -> bool:
        return self.requested_lock is None and self.configured_cap is None

    @property
    def clamped(self) -> bool:
        return self.requested_lock is not None and self.actual_clock < self.requested_lock


def free_running_state(spec: DeviceSpec) -> DvfsState:
    return DvfsState(actual_clock=spec.boost_clock)


def apply_clock_lock(spec: DeviceSpec, request: float) -> DvfsState:
    if request < spec.min_clock or request > spec.boost_clock:
        raise UnsupportedClock(
            f"lock {request} MHz outside [{spec.min_clock}, {spec.boost_clock}] MHz"
        )
    actual = spec.base_clock if request >= spec.base_clock else float(request)
    return DvfsState(actual_clock=actual, requested_lock=float(request))


def apply_power_cap(spec: DeviceSpec, cap: float) -> DvfsState:
    """Configure a cap; the driver holds the base clock until the cap engages."""
    return DvfsState(actual_clock=spec.base_clock, configured_cap=float(cap))


def apply_memory_clock(spec: DeviceSpec, state: DvfsState, request: float) -> tuple[DvfsState, float]:
    """Memory-clock requests are accepted and ignored; returns the read-back clock."""
    return state, spec.rated_memory_clock


@dataclass(frozen=True)
class PowerComponents:
    mem_static: float  # W, clock-independent dynamic power (HBM, data movement)
    sm_dynamic_ref: float  # W, SM dynamic power at the base clock
    clock_exponent: float = 1.0

    def __post_init__(self):
        if self.mem_static < 0 or self.sm_dynamic_ref < 0 or self.clock_exponent < 0:
            raise ValueError("power components must be non-negative")


@dataclass
class PowerModelParams:
    components: dict = field(default_factory=dict)  # (arch, Phase) -> PowerComponents
    residuals: dict = field(default_factory=dict)  # (arch, Phase) -> list[W]

    def get(self, arch: str, phase) -> PowerComponents:
        return self.components[(arch, Phase(phase))]

    def check(self, spec: DeviceSpec) -> None:
        for key, c in self.components.items():
            total = spec.idle_power + c.mem_static + c.sm_dynamic_ref
            if total > 1.2 * spec.tdp:
                raise ValueError(f"{key}: modelled peak {total:.0f} W exceeds 1.2x TDP")

    def to_dict(self) -> dict:
        out = {}
        for (arch, phase), c in sorted(self.components.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
            entry = {
                "mem_static_w": c.mem_static,
                "sm_dynamic_ref_w": c.sm_dynamic_ref,
                "clock_exponent": c.clock_exponent,
            }
            res = self.residuals.get((arch, phase))
            if res is not None:
                entry["fit_residuals_w"] = list(res)
            out.setdefault(arch, {})[phase.value] = entry
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PowerModelParams":
        comps, res = {}, {}
        for arch, phases in d.items():
            for phase, e in phases.items():
                key = (arch, Phase(phase))
                comps[key] = PowerComponents(e["mem_static_w"], e["sm_dynamic_ref_w"], e.get("clock_exponent", 1.0))
                if "fit_residuals_w" in e:
                    res[key] = list(e["fit_residuals_w"])
        return cls(comps, res)


def save_power_params(params: PowerModelParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=2) + "\n")


def load_power_params(path) -> PowerModelParams:
    return PowerModelParams.from_dict(json.loads(Path(path).read_text()))


def simulated_power(
    spec: DeviceSpec,
    params: PowerModelParams,
    arch: str,
    phase,
    clock: float,
    utilization_scale: float = 1.0,
) -> float:
    c = params.get(arch, phase)
    rel = (clock / spec.base_clock) ** c.clock_exponent
    return spec.idle_power + utilization_scale * (c.mem_static + c.sm_dynamic_ref * rel)


def cap_resolution(
    spec: DeviceSpec,
    params: PowerModelParams,
    arch: str,
    phase,
    state: DvfsState,
    load: float = 1.0,
) -> DvfsState:
    """Step the clock down through supported locks until modelled draw fits the cap.

    ``load`` is the utilization scale passed to :func:`simulated_power`.
    """
    cap = state.configured_cap
    if cap is None:
        raise ValueError("cap_resolution needs a configured cap")
    clock = state.actual_clock
    if simulated_power(spec, params, arch, phase, clock, load) <= cap:
        return replace(state, cap_engaged=False, cap_floor_hit=False)
    while clock > spec.supported_locks[0]:
        clock = spec.step_down(clock)
        if simulated_power(spec, params, arch, phase, clock, load) <= cap:
            return replace(state, actual_clock=clock, cap_engaged=True, cap_floor_hit=False)
    return replace(state, actual_clock=clock, cap_engaged=True, cap_floor_hit=True)


def throttle_artefact(spec: DeviceSpec, state: DvfsState, rng_seed, probability: float) -> DvfsState:
    """Firmware throttle: with ``probability`` drop one supported level for the run."""
    if not 0.0 <= probability <= 1.0:
        raise ValueError("probability must lie in [0, 1]")
    if probability == 0.0:
        return state
    draw = np.random.default_rng(rng_seed).random()
    if draw < probability and state.actual_clock > spec.supported_locks[0]:
        return replace(state, actual_clock=spec.step_down(state.actual_clock), throttled=True)
    return state


# -- calibration ---------------------------------------------------------------

@dataclass(frozen=True)
class PowerFixture:
    arch: str
    phase: Phase
    batch: int
    clock: float
    power: float
    source: str = ""


def load_power_fixtures(path) -> list[PowerFixture]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(line for line in fh if not line.startswith("#")):
            out.append(PowerFixture(
                arch=row["arch"],
                phase=Phase(row["phase"]),
                batch=int(row["batch"]),
                clock=float(row["clock_mhz"]),
                power=float(row["power_w"]),
                source=row.get("source_tag", "") or "",
            ))
    return out


def calibrate(
    fixtures: Iterable,
    spec: Optional[DeviceSpec] = None,
    utilization_scale: Optional[Callable[[str, Phase, int], float]] = None,
) -> PowerModelParams:
    """Non-negative least-squares fit of the two power components per (arch, phase).

    ``fixtures`` are ``PowerFixture`` or ``(arch, phase, batch, clock, power)``
    tuples. The idle floor is held at ``spec.idle_power`` and the clock
    exponent at 1.
    """
    spec = spec or DeviceSpec()
    groups: dict = {}
    for f in fixtures:
        if not isinstance(f, PowerFixture):
            f = PowerFixture(f[0], Phase(f[1]), int(f[2]), float(f[3]), float(f[4]))
        groups.setdefault((f.arch, f.phase), []).append(f)

    params = PowerModelParams()
    for key, fx in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
        clocks = {f.clock for f in fx}
        if len(clocks) < 2:
            raise UnderdeterminedFit(f"{key[0]}/{key[1].value}: need >= 2 distinct clocks, got {sorted(clocks)}")
        u = np.array([utilization_scale(f.arch, f.phase, f.batch) if utilization_scale else 1.0 for f in fx])
        x = np.array([f.clock / spec.base_clock for f in fx])
        A = np.column_stack([u, u * x])
        y = np.array([f.power - spec.idle_power for f in fx])
        coef, _ = nnls(A, y)
        params.components[key] = PowerComponents(float(coef[0]), float(coef[1]), 1.0)
        params.residuals[key] = [float(r) for r in (A @ coef - y)]
    return params

