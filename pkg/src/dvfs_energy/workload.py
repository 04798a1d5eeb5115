"""Per-architecture phase workload model.

A decode step streams the weights once plus each sequence's KV cache (or
recurrent state), and issues GEMM work padded to the tensor-core tile, a
per-sequence term (latent projections, SSM scan) and an attention term
proportional to cached context. Step time is the roofline maximum of the
compute and memory times plus clock-insensitive overhead (kernel-launch and
data-movement chains that do not speed up with SM clock).

Prefill processes the whole prompt in one pass; recurrent architectures get
a low effective compute efficiency rather than an explicit sequential scan.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional

from .device import DeviceSpec, PowerModelParams, simulated_power
from .errors import UnknownArchitecture
from .telemetry import Phase

ARCHITECTURES = ("GQA", "GQA-ctrl", "MLA", "GDN", "Mamba2")


class Roofline(str, enum.Enum):
    MEMORY_BOUND = "memory_bound"
    COMPUTE_BOUND = "compute_bound"


@dataclass(frozen=True)
class PhasePoint:
    phase: Phase
    batch: int
    context: int
    output_len: int = 128

    def __post_init__(self):
        object.__setattr__(self, "phase", Phase(self.phase))
        if self.batch < 1 or self.context < 1:
            raise ValueError("batch and context must be >= 1")
        if self.output_len < 0:
            raise ValueError("output_len must be >= 0")

    @property
    def tokens(self) -> int:
        """Tokens credited to the phase: prompt x batch, or output x batch."""
        if self.phase is Phase.PREFILL:
            return self.context * self.batch
        return self.output_len * self.batch


@dataclass(frozen=True)
class ArchitectureProfile:
    name: str
    weight_bytes: float  # bytes streamed per decode step
    kv_bytes_per_token: float  # bytes per cached token per sequence, before compression
    kv_compression: float = 1.0
    state_bytes: float = 0.0  # fixed recurrent state per sequence
    decode_flops_per_token: float = 8e9  # weight GEMM work per generated token
    decode_flops_per_sequence: float = 0.0  # per-sequence, context-independent step work
    decode_flops_per_context_token: float = 0.0  # attention work per cached token
    prefill_flops_per_token: float = 8e9
    prefill_flops_per_token_pair: float = 0.0  # causal attention, integrated as L^2 / 2
    bandwidth_efficiency: float = 0.2  # achieved / peak HBM bandwidth
    decode_compute_efficiency: float = 0.25
    prefill_compute_efficiency: float = 0.7
    gemm_tile_rows: int = 64  # decode GEMMs are padded to this many rows
    overhead_seconds_per_step: float = 0.0
    overhead_seconds_per_context_token: float = 0.0  # multiplied by batch * context
    prefill_overhead_seconds: float = 0.0
    batch_power_exponent: float = 0.0  # decode utilization scale = batch ** exponent
    elementwise_fraction: float = 0.0  # descriptive kernel-mix statistics
    tc_utilization: float = 0.0

    def __post_init__(self):
        if self.kv_compression < 1:
            raise ValueError(f"{self.name}: kv_compression must be >= 1")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                raise ValueError(f"{self.name}: {f.name} must be non-negative")


# field name -> unit label used in profile files
PROFILE_UNITS = {
    "weight_bytes": "bytes",
    "kv_bytes_per_token": "bytes/token",
    "kv_compression": "ratio",
    "state_bytes": "bytes",
    "decode_flops_per_token": "FLOP/token",
    "decode_flops_per_sequence": "FLOP/sequence/step",
    "decode_flops_per_context_token": "FLOP/context-token/sequence",
    "prefill_flops_per_token": "FLOP/token",
    "prefill_flops_per_token_pair": "FLOP/token-pair",
    "bandwidth_efficiency": "fraction",
    "decode_compute_efficiency": "fraction",
    "prefill_compute_efficiency": "fraction",
    "gemm_tile_rows": "rows",
    "overhead_seconds_per_step": "s",
    "overhead_seconds_per_context_token": "s/(sequence*context-token)",
    "prefill_overhead_seconds": "s",
    "batch_power_exponent": "exponent",
    "elementwise_fraction": "fraction",
    "tc_utilization": "fraction",
}


def profiles_to_dict(profiles: Iterable[ArchitectureProfile]) -> dict:
    out = {}
    for p in profiles:
        d = asdict(p)
        name = d.pop("name")
        out[name] = {k: {"value": v, "unit": PROFILE_UNITS[k]} for k, v in d.items()}
    return {"profiles": out}


def profiles_from_dict(d: dict) -> dict:
    out = {}
    for name, entry in d["profiles"].items():
        kwargs = {k: (v["value"] if isinstance(v, dict) else v) for k, v in entry.items()}
        out[name] = ArchitectureProfile(name=name, **kwargs)
    return out


def save_profiles(profiles, path, meta: Optional[dict] = None) -> None:
    if isinstance(profiles, dict):
        profiles = profiles.values()
    d = profiles_to_dict(profiles)
    if meta:
        d = {"meta": meta, **d}
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=False) + "\n")


def load_profiles(path) -> dict:
    return profiles_from_dict(json.loads(Path(path).read_text()))


def get_profile(profiles: dict, name: str) -> ArchitectureProfile:
    try:
        return profiles[name]
    except KeyError:
        raise UnknownArchitecture(f"unknown architecture {name!r}; known: {sorted(profiles)}") from None


# -- roofline ------------------------------------------------------------------

def arithmetic_intensity(flops: float, nbytes: float) -> float:
    if nbytes == 0:
        raise ZeroDivisionError("arithmetic intensity undefined for zero bytes")
    return flops / nbytes


def classify_roofline(intensity: float, spec: DeviceSpec) -> Roofline:
    if intensity < 0:
        raise ValueError("intensity must be non-negative")
    return Roofline.MEMORY_BOUND if intensity < spec.ridge_intensity else Roofline.COMPUTE_BOUND


def decode_step_traffic(profile: ArchitectureProfile, point: PhasePoint) -> float:
    if point.phase is not Phase.DECODE:
        raise ValueError("decode_step_traffic needs a decode point")
    b = point.batch
    kv = profile.kv_bytes_per_token * point.context / profile.kv_compression
    return profile.weight_bytes + b * kv + b * profile.state_bytes


def prefill_traffic(profile: ArchitectureProfile, point: PhasePoint) -> float:
    b = point.batch
    kv_written = profile.kv_bytes_per_token * point.context / profile.kv_compression
    return profile.weight_bytes + b * kv_written + b * profile.state_bytes


def _padded(batch: int, tile: int) -> int:
    return tile * math.ceil(batch / tile) if tile > 0 else batch


def phase_flops(profile: ArchitectureProfile, point: PhasePoint, issued: bool = False) -> float:
    """FLOPs for one decode step or one full prefill.

    ``issued=True`` counts the decode GEMM at tile-padded batch, which is
    what the SMs actually execute; the default counts useful work only.
    """
    b, ctx = point.batch, point.context
    if point.phase is Phase.DECODE:
        gemm_rows = _padded(b, profile.gemm_tile_rows) if issued else b
        return (
            gemm_rows * profile.decode_flops_per_token
            + b * profile.decode_flops_per_sequence
            + b * ctx * profile.decode_flops_per_context_token
        )
    return b * ctx * profile.prefill_flops_per_token + b * profile.prefill_flops_per_token_pair * ctx * ctx / 2


def phase_traffic(profile: ArchitectureProfile, point: PhasePoint) -> float:
    if point.phase is Phase.DECODE:
        return decode_step_traffic(profile, point)
    return prefill_traffic(profile, point)


def point_intensity(profile: ArchitectureProfile, point: PhasePoint) -> float:
    return arithmetic_intensity(phase_flops(profile, point), phase_traffic(profile, point))


# -- timing --------------------------------------------------------------------

@dataclass(frozen=True)
class StepBreakdown:
    compute_time: float
    memory_time: float
    overhead_time: float

    @property
    def total(self) -> float:
        return max(self.compute_time, self.memory_time) + self.overhead_time

    @property
    def compute_bound(self) -> bool:
        return self.compute_time > self.memory_time


def step_breakdown(profile: ArchitectureProfile, point: PhasePoint, clock: float, spec: DeviceSpec) -> StepBreakdown:
    if not spec.min_clock - 1e-9 <= clock <= spec.boost_clock + 1e-9:
        raise ValueError(f"clock {clock} MHz outside [{spec.min_clock}, {spec.boost_clock}]")
    rel_clock = clock / spec.base_clock
    if point.phase is Phase.DECODE:
        eff = profile.decode_compute_efficiency
        overhead = (
            profile.overhead_seconds_per_step
            + profile.overhead_seconds_per_context_token * point.batch * point.context
        )
    else:
        eff = profile.prefill_compute_efficiency
        overhead = profile.prefill_overhead_seconds
    flops = phase_flops(profile, point, issued=True)
    compute = flops / (spec.peak_compute * eff * rel_clock) if flops > 0 else 0.0
    memory = phase_traffic(profile, point) / (spec.hbm_bandwidth * profile.bandwidth_efficiency)
    return StepBreakdown(compute, memory, overhead)


def step_time(profile: ArchitectureProfile, point: PhasePoint, clock: float, spec: DeviceSpec) -> float:
    """Seconds per decode step, or for the whole prefill pass."""
    return step_breakdown(profile, point, clock, spec).total


def phase_duration(profile: ArchitectureProfile, point: PhasePoint, clock: float, spec: DeviceSpec) -> float:
    t = step_time(profile, point, clock, spec)
    return t * point.output_len if point.phase is Phase.DECODE else t


def tokens_per_second(profile: ArchitectureProfile, point: PhasePoint, clock: float, spec: DeviceSpec) -> float:
    t = step_time(profile, point, clock, spec)
    per_pass = point.batch if point.phase is Phase.DECODE else point.batch * point.context
    return per_pass / t


def utilization_scale(profile: ArchitectureProfile, point: PhasePoint) -> float:
    if point.phase is Phase.DECODE:
        return float(point.batch) ** profile.batch_power_exponent
    return 1.0


def model_power(profile, point, clock, spec: DeviceSpec, power: PowerModelParams) -> float:
    return simulated_power(spec, power, profile.name, point.phase, clock, utilization_scale(profile, point))


def model_energy_per_token(profile, point, clock, spec: DeviceSpec, power: PowerModelParams) -> float:
    """Noise-free energy per token in mJ at a given actual clock."""
    per_pass = point.batch if point.phase is Phase.DECODE else point.batch * point.context
    return 1e3 * model_power(profile, point, clock, spec, power) * step_time(profile, point, clock, spec) / per_pass


def effective_clock(spec: DeviceSpec, lock: float) -> float:
    """Clock actually reached under a lock request (clamp at the base clock)."""
    return min(float(lock), spec.base_clock)


def memory_pace_clock(
    profile: ArchitectureProfile,
    point: PhasePoint,
    spec: DeviceSpec,
    loss_budget: float = 0.01,
) -> float:
    """Lowest supported lock whose step time stays within the loss budget of the base clock.

    Returns the base clock when no lower lock qualifies.
    """
    if not loss_budget > 0:
        raise ValueError("loss_budget must be positive")
    reference = step_time(profile, point, spec.base_clock, spec)
    limit = (1.0 + loss_budget) * reference
    for lock in spec.supported_locks:
        if lock >= spec.base_clock:
            break
        if step_time(profile, point, lock, spec) <= limit * (1 + 1e-12):
            return lock
    return spec.base_clock
