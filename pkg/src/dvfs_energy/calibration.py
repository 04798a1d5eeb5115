"""Fit architecture profiles to published operating points.

Targets are rows ``(arch, quantity, value, tolerance, source_tag)``. A
quantity is ``metric@key=value;...``; two-architecture metrics use an
``A/B`` arch field. Supported metrics::

    decode_mj_per_tok      bs, ctx, clock
    prefill_mj_per_tok     bs, ctx, clock
    decode_power_w         bs, ctx, clock
    decode_energy_saving   bs, ctx, clock, ref       1 - e(clock) / e(ref)
    decode_throughput_loss bs, ctx, clock, ref       1 - tput(clock) / tput(ref)
    decode_ctx_ratio       bs, ctx=a:b, clock        e(ctx=b) / e(ctx=a)
    decode_bs_ratio        bs=a:b, ctx, clock        e(bs=a) / e(bs=b)
    decode_arch_ratio      bs, ctx, clock            e_A / e_B
    decode_arch_diff       bs, ctx, clock            e_A - e_B
    prefill_arch_ratio     bs, ctx, clock
    prefill_arch_diff      bs, ctx, clock

``clock`` is a lock request (1980 resolves to the clamped base clock) and
defaults to the base clock.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.optimize import least_squares

from .device import DeviceSpec, PowerModelParams
from .errors import CalibrationConflict, UnknownArchitecture
from .telemetry import Phase
from .workload import (
    ArchitectureProfile,
    PhasePoint,
    effective_clock,
    model_energy_per_token,
    model_power,
    tokens_per_second,
)

# profile fields the fit may move; everything else is structural
FIT_FIELDS = (
    "bandwidth_efficiency",
    "kv_bytes_per_token",
    "overhead_seconds_per_step",
    "overhead_seconds_per_context_token",
    "prefill_compute_efficiency",
    "batch_power_exponent",
)
PRIOR_WEIGHT = 0.01


@dataclass(frozen=True)
class CalibrationTarget:
    arch: str
    quantity: str
    value: float
    tolerance: float
    source_tag: str = ""

    @property
    def archs(self) -> tuple[str, ...]:
        return tuple(self.arch.split("/"))

    def parse(self) -> tuple[str, dict]:
        metric, _, rest = self.quantity.partition("@")
        params = {}
        for kv in filter(None, rest.split(";")):
            k, _, v = kv.partition("=")
            params[k.strip()] = v.strip()
        return metric.strip(), params


def load_targets(path) -> list[CalibrationTarget]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(line for line in fh if line.strip() and not line.startswith("#")):
            out.append(CalibrationTarget(
                arch=row["arch"].strip(),
                quantity=row["quantity"].strip(),
                value=float(row["value"]),
                tolerance=float(row["tolerance"]),
                source_tag=(row.get("source_tag") or "").strip(),
            ))
    return out


def _pair(v: str) -> tuple[int, int]:
    a, b = v.split(":")
    return int(a), int(b)


def evaluate_target(target: CalibrationTarget, profiles: dict, spec: DeviceSpec, power: PowerModelParams) -> float:
    metric, p = target.parse()
    archs = target.archs
    for a in archs:
        if a not in profiles:
            raise UnknownArchitecture(f"target {target.quantity!r} names unknown architecture {a!r}")
    clock = effective_clock(spec, float(p.get("clock", spec.base_clock)))
    ref = effective_clock(spec, float(p.get("ref", spec.base_clock)))

    def e(arch, phase, bs, ctx, f=clock):
        return model_energy_per_token(profiles[arch], PhasePoint(phase, bs, ctx), f, spec, power)

    D, P = Phase.DECODE, Phase.PREFILL
    if metric == "decode_ctx_ratio":
        lo, hi = _pair(p["ctx"])
        bs = int(p["bs"])
        return e(archs[0], D, bs, hi) / e(archs[0], D, bs, lo)
    if metric == "decode_bs_ratio":
        lo, hi = _pair(p["bs"])
        ctx = int(p["ctx"])
        return e(archs[0], D, lo, ctx) / e(archs[0], D, hi, ctx)
    bs, ctx = int(p["bs"]), int(p["ctx"])
    if metric == "decode_mj_per_tok":
        return e(archs[0], D, bs, ctx)
    if metric == "prefill_mj_per_tok":
        return e(archs[0], P, bs, ctx)
    if metric == "decode_power_w":
        return model_power(profiles[archs[0]], PhasePoint(D, bs, ctx), clock, spec, power)
    if metric == "decode_energy_saving":
        return 1.0 - e(archs[0], D, bs, ctx) / e(archs[0], D, bs, ctx, ref)
    if metric == "decode_throughput_loss":
        point = PhasePoint(D, bs, ctx)
        prof = profiles[archs[0]]
        return 1.0 - tokens_per_second(prof, point, clock, spec) / tokens_per_second(prof, point, ref, spec)
    phase = D if metric.startswith("decode") else P
    if metric.endswith("_arch_ratio"):
        return e(archs[0], phase, bs, ctx) / e(archs[1], phase, bs, ctx)
    if metric.endswith("_arch_diff"):
        return e(archs[0], phase, bs, ctx) - e(archs[1], phase, bs, ctx)
    raise ValueError(f"unknown calibration metric {metric!r}")


@dataclass(frozen=True)
class TargetResidual:
    target: CalibrationTarget
    model_value: float

    @property
    def error(self) -> float:
        return self.model_value - self.target.value

    @property
    def within_tolerance(self) -> bool:
        return abs(self.error) <= self.target.tolerance * (1 + 1e-9)


@dataclass
class FitResult:
    profiles: dict
    residuals: list

    @property
    def ok(self) -> bool:
        return all(r.within_tolerance for r in self.residuals)

    def report_rows(self) -> list[dict]:
        return [
            {
                "arch": r.target.arch,
                "quantity": r.target.quantity,
                "target": r.target.value,
                "tolerance": r.target.tolerance,
                "model": r.model_value,
                "error": r.error,
                "within_tolerance": r.within_tolerance,
                "source_tag": r.target.source_tag,
            }
            for r in self.residuals
        ]


def residual_report(targets, profiles, spec, power) -> list[TargetResidual]:
    return [TargetResidual(t, evaluate_target(t, profiles, spec, power)) for t in targets]


def _check_coverage(targets: list[CalibrationTarget], archs: Iterable[str]) -> None:
    for a in archs:
        mine = [t for t in targets if a in t.archs]
        energy = [t for t in mine if any(k in t.parse()[0] for k in ("mj", "ratio", "diff", "saving"))]
        if len(energy) < 2:
            raise CalibrationConflict(
                f"{a}: need at least two decode/prefill energy targets, have {len(energy)}",
                [t.quantity for t in mine],
            )


def fit_profiles(
    targets: list[CalibrationTarget],
    priors: dict,
    spec: DeviceSpec,
    power: PowerModelParams,
    strict: bool = True,
) -> FitResult:
    """Relative-error least squares over the fit fields of every targeted profile.

    Starts from ``priors`` (fixed initialization, deterministic optimizer).
    Parameters are fitted in log space so they stay positive; a parameter
    that is zero in the prior stays zero. With ``strict`` a target left
    outside its tolerance raises :class:`CalibrationConflict`.
    """
    if not targets:
        raise CalibrationConflict("no calibration targets given")
    archs = sorted({a for t in targets for a in t.archs})
    for a in archs:
        if a not in priors:
            raise UnknownArchitecture(f"no prior profile for {a!r}")
    _check_coverage(targets, archs)

    slots = [(a, f) for a in archs for f in FIT_FIELDS if getattr(priors[a], f) > 0]
    x0 = np.array([math.log(getattr(priors[a], f)) for a, f in slots])
    scales = np.array([max(abs(t.value), t.tolerance, 1e-12) for t in targets])

    def build(x):
        out = dict(priors)
        updates: dict = {}
        for (a, f), v in zip(slots, x):
            updates.setdefault(a, {})[f] = float(math.exp(v))
        for a, kw in updates.items():
            out[a] = replace(out[a], **kw)
        return out

    def fun(x):
        profs = build(x)
        model = np.array([evaluate_target(t, profs, spec, power) for t in targets])
        tvals = np.array([t.value for t in targets])
        return np.concatenate([(model - tvals) / scales, PRIOR_WEIGHT * (x - x0)])

    sol = least_squares(fun, x0, method="trf", x_scale=1.0, xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=2000)
    fitted = build(sol.x)
    # round-trip through decimal text so re-fits and reloads are byte-identical
    fitted = {a: _rounded(p) for a, p in fitted.items()}
    result = FitResult(fitted, residual_report(targets, fitted, spec, power))
    if strict and not result.ok:
        bad = [r for r in result.residuals if not r.within_tolerance]
        lines = [
            f"{r.target.arch} {r.target.quantity}: model {r.model_value:.4g} vs "
            f"target {r.target.value:.4g} +/- {r.target.tolerance:.3g}"
            for r in bad
        ]
        raise CalibrationConflict("targets cannot be met simultaneously:\n  " + "\n  ".join(lines),
                                  [r.target for r in bad])
    return result


def _rounded(profile: ArchitectureProfile, digits: int = 10) -> ArchitectureProfile:
    kw = {}
    for f in FIT_FIELDS:
        v = getattr(profile, f)
        kw[f] = float(f"{v:.{digits}g}")
    return replace(profile, **kw)
