"""Power traces and per-phase energy integration.

Board power is sampled at a fixed cadence (50 ms by default). Phase energy
is the trapezoidal integral of power over the phase window; windows that
are too short to contain a meaningful number of samples fall back to
``snapshot_power * duration``. Hardware energy counters, when available,
are only used to cross-check the integral and never replace it.
"""
from __future__ import annotations

import csv
import enum
import logging
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import InsufficientSamples, InvalidTrace, MissingSnapshot, WindowOutOfRange

log = logging.getLogger(__name__)

DEFAULT_CADENCE_S = 0.050
FALLBACK_THRESHOLD_S = 0.100
COUNTER_MIN_DURATION_S = 0.200
COUNTER_TOLERANCE = 0.02

# relative slack used when comparing window durations against thresholds;
# end - start rarely reproduces a decimal threshold exactly
_DURATION_RTOL = 1e-9

TRACE_CSV_COLUMNS = ("timestamp_s", "power_w", "sm_clock_mhz", "temp_c")
GAP_MARKER = "# gap"


class Phase(str, enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"


class EnergyMethod(str, enum.Enum):
    TRAPEZOID = "trapezoid"
    SNAPSHOT_FALLBACK = "snapshot_fallback"


class CounterValidation(str, enum.Enum):
    AGREES = "counter_agrees"
    DISAGREES = "counter_disagrees"
    UNAVAILABLE = "counter_unavailable"


@dataclass(frozen=True)
class PowerSample:
    timestamp: float
    power: float
    sm_clock: float = 0.0
    temperature: float = 0.0


@dataclass(frozen=True, eq=False)
class PowerTrace:
    """Immutable board-power timeseries.

    ``gaps`` holds indices ``i`` such that samples ``i-1`` and ``i`` straddle
    a sampler discontinuity (restart, dropout).
    """

    timestamps: np.ndarray
    power: np.ndarray
    sm_clock: np.ndarray
    temperature: np.ndarray
    nominal_cadence: float = DEFAULT_CADENCE_S
    gaps: frozenset = field(default_factory=frozenset)
    max_power: float = 1400.0

    def __post_init__(self):
        for name in ("timestamps", "power", "sm_clock", "temperature"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "gaps", frozenset(int(g) for g in self.gaps))
        n = len(self.timestamps)
        if not (len(self.power) == len(self.sm_clock) == len(self.temperature) == n):
            raise InvalidTrace("trace columns have different lengths")
        if n and (np.any(self.power <= 0) or np.any(self.power > self.max_power)):
            raise InvalidTrace(f"power outside (0, {self.max_power}] W")
        if n > 1:
            dt = np.diff(self.timestamps)
            if np.any(dt <= 0):
                raise InvalidTrace("timestamps must be strictly increasing")
            lo, hi = 0.5 * self.nominal_cadence, 3.0 * self.nominal_cadence
            bad = [i + 1 for i, d in enumerate(dt) if not lo <= d <= hi and (i + 1) not in self.gaps]
            if bad:
                raise InvalidTrace(
                    f"sample spacing outside [{lo:.4g}, {hi:.4g}] s at indices {bad[:5]}"
                )

    @classmethod
    def from_samples(cls, samples: Iterable[PowerSample], **kwargs) -> "PowerTrace":
        samples = list(samples)
        return cls(
            timestamps=np.array([s.timestamp for s in samples], dtype=float),
            power=np.array([s.power for s in samples], dtype=float),
            sm_clock=np.array([s.sm_clock for s in samples], dtype=float),
            temperature=np.array([s.temperature for s in samples], dtype=float),
            **kwargs,
        )

    @classmethod
    def from_arrays(cls, timestamps, power, sm_clock=None, temperature=None, **kwargs):
        timestamps = np.asarray(timestamps, dtype=float)
        zeros = np.zeros_like(timestamps)
        return cls(
            timestamps=timestamps,
            power=np.asarray(power, dtype=float),
            sm_clock=zeros if sm_clock is None else np.asarray(sm_clock, dtype=float),
            temperature=zeros if temperature is None else np.asarray(temperature, dtype=float),
            **kwargs,
        )

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def samples(self) -> list[PowerSample]:
        return [
            PowerSample(float(t), float(p), float(c), float(k))
            for t, p, c, k in zip(self.timestamps, self.power, self.sm_clock, self.temperature)
        ]

    @property
    def span(self) -> tuple[float, float]:
        return float(self.timestamps[0]), float(self.timestamps[-1])

    def scaled(self, k: float) -> "PowerTrace":
        return replace(self, power=self.power * k, max_power=self.max_power * max(k, 1.0))

    def median_power(self) -> float:
        return float(np.median(self.power))

    def median_temperature(self) -> float:
        return float(np.median(self.temperature))


@dataclass(frozen=True)
class PhaseWindow:
    phase: Phase
    start: float
    end: float
    snapshot_power: Optional[float] = None
    counter_energy: Optional[float] = None

    def __post_init__(self):
        if not self.end > self.start:
            raise ValueError(f"phase window end ({self.end}) must exceed start ({self.start})")
        object.__setattr__(self, "phase", Phase(self.phase))

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class EnergyMeasurement:
    energy: float
    method: EnergyMethod
    validation: CounterValidation = CounterValidation.UNAVAILABLE
    relative_gap: Optional[float] = None
    duration: Optional[float] = None
    crossed_gap: bool = False

    def __post_init__(self):
        if self.energy < 0:
            raise ValueError("energy must be non-negative")


def _window_points(trace: PowerTrace, start: float, end: float):
    if len(trace) < 2:
        raise InsufficientSamples(f"need at least 2 samples, trace has {len(trace)}")
    t, p = trace.timestamps, trace.power
    eps = 1e-12 * max(1.0, abs(t[-1]))
    if start < t[0] - eps or end > t[-1] + eps:
        raise WindowOutOfRange(
            f"window [{start:.6g}, {end:.6g}] s not covered by trace [{t[0]:.6g}, {t[-1]:.6g}] s"
        )
    start, end = max(start, t[0]), min(end, t[-1])
    inside = (t > start) & (t < end)
    ts = np.concatenate(([start], t[inside], [end]))
    ps = np.concatenate(([np.interp(start, t, p)], p[inside], [np.interp(end, t, p)]))
    return ts, ps


def integrate_energy(trace: PowerTrace, window: PhaseWindow) -> float:
    """Trapezoidal integral of power over the window, in joules.

    Window edges are linearly interpolated between the enclosing samples.
    """
    ts, ps = _window_points(trace, window.start, window.end)
    return float(np.trapezoid(ps, ts))


def window_crosses_gap(trace: PowerTrace, window: PhaseWindow) -> bool:
    t = trace.timestamps
    for g in trace.gaps:
        if 0 < g < len(t) and t[g - 1] < window.end and t[g] > window.start:
            return True
    return False


def energy_with_fallback(
    trace: PowerTrace,
    window: PhaseWindow,
    fallback_threshold: float = FALLBACK_THRESHOLD_S,
) -> EnergyMeasurement:
    duration = window.duration
    if duration < fallback_threshold * (1.0 - _DURATION_RTOL):
        if window.snapshot_power is None:
            raise MissingSnapshot(
                f"{duration * 1e3:.1f} ms window is below the {fallback_threshold * 1e3:.0f} ms "
                "fallback threshold and has no snapshot power"
            )
        return EnergyMeasurement(
            energy=window.snapshot_power * duration,
            method=EnergyMethod.SNAPSHOT_FALLBACK,
            duration=duration,
        )
    crossed = window_crosses_gap(trace, window)
    if crossed:
        log.warning("phase window [%.3f, %.3f] s integrates across a sampler gap", window.start, window.end)
    return EnergyMeasurement(
        energy=integrate_energy(trace, window),
        method=EnergyMethod.TRAPEZOID,
        duration=duration,
        crossed_gap=crossed,
    )


def cross_validate(
    measurement: EnergyMeasurement,
    window: PhaseWindow,
    min_duration: float = COUNTER_MIN_DURATION_S,
    tolerance: float = COUNTER_TOLERANCE,
) -> EnergyMeasurement:
    """Compare the integrated energy with the hardware counter delta.

    Advisory only: the reported energy is never replaced by the counter.
    """
    counter = window.counter_energy
    if counter is None or window.duration < min_duration * (1.0 - _DURATION_RTOL):
        return replace(measurement, validation=CounterValidation.UNAVAILABLE, relative_gap=None)
    ref = measurement.energy
    gap = abs(counter - ref) / ref if ref > 0 else float("inf")
    if gap <= tolerance:
        status = CounterValidation.AGREES
    else:
        status = CounterValidation.DISAGREES
        log.warning(
            "energy counter disagrees with trapezoid: %.4g J vs %.4g J (gap %.2f%%)",
            counter, ref, 100 * gap,
        )
    return replace(measurement, validation=status, relative_gap=gap)


def measure_window(trace: PowerTrace, window: PhaseWindow, **kwargs) -> EnergyMeasurement:
    """Fallback-aware integration followed by counter cross-validation."""
    fallback = kwargs.pop("fallback_threshold", FALLBACK_THRESHOLD_S)
    return cross_validate(energy_with_fallback(trace, window, fallback), window, **kwargs)


# -- persistence ---------------------------------------------------------------

def write_trace_csv(trace: PowerTrace, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# nominal_cadence_s={trace.nominal_cadence!r}\n")
        writer = csv.writer(fh)
        writer.writerow(TRACE_CSV_COLUMNS)
        for i, s in enumerate(trace.samples):
            if i in trace.gaps:
                fh.write(GAP_MARKER + "\n")
            writer.writerow([repr(s.timestamp), repr(s.power), repr(s.sm_clock), repr(s.temperature)])


def read_trace_csv(path, nominal_cadence: Optional[float] = None) -> PowerTrace:
    rows, gaps = [], set()
    cadence = DEFAULT_CADENCE_S
    header_seen = False
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line == GAP_MARKER:
                    gaps.add(len(rows))
                elif "nominal_cadence_s=" in line:
                    cadence = float(line.split("=", 1)[1])
                continue
            if not header_seen:
                if tuple(c.strip() for c in line.split(",")) != TRACE_CSV_COLUMNS:
                    raise InvalidTrace(f"unexpected trace header: {line!r}")
                header_seen = True
                continue
            rows.append([float(x) for x in line.split(",")])
    arr = np.array(rows, dtype=float).reshape(-1, 4)
    return PowerTrace(
        timestamps=arr[:, 0],
        power=arr[:, 1],
        sm_clock=arr[:, 2],
        temperature=arr[:, 3],
        nominal_cadence=nominal_cadence or cadence,
        gaps=frozenset(gaps),
    )


# -- live sampling -------------------------------------------------------------

class PollingSampler:
    """Background sampler that polls ``read_fn`` at a fixed cadence.

    ``read_fn`` returns ``(power_w, sm_clock_mhz, temp_c)``. The sampler is
    the single writer of its buffer; ``stop()`` hands back an immutable trace.
    """

    def __init__(
        self,
        read_fn: Callable[[], Sequence[float]],
        cadence: float = DEFAULT_CADENCE_S,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.read_fn = read_fn
        self.cadence = cadence
        self.clock = clock
        self._buf: list[PowerSample] = []
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self.epoch = 0.0

    def start(self) -> float:
        self.epoch = self.clock()
        self._stop.clear()
        self._buf = []
        self._sample()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self.epoch

    def _sample(self):
        power, clock_mhz, temp = self.read_fn()
        self._buf.append(PowerSample(self.clock() - self.epoch, float(power), float(clock_mhz), float(temp)))

    def _run(self):
        while not self._stop.wait(self.cadence):
            self._sample()

    def now(self) -> float:
        return self.clock() - self.epoch

    def stop(self) -> PowerTrace:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self._sample()
        samples: list[PowerSample] = []
        for s in self._buf:
            if samples and s.timestamp - samples[-1].timestamp < 0.5 * self.cadence:
                samples[-1] = s
            else:
                samples.append(s)
        # a stalled poll loop shows up as a spacing violation; mark it as a gap
        gaps = {
            i for i in range(1, len(samples))
            if samples[i].timestamp - samples[i - 1].timestamp > 3 * self.cadence
        }
        return PowerTrace.from_samples(samples, nominal_cadence=self.cadence, gaps=frozenset(gaps))
