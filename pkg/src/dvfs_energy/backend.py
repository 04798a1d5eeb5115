"""Control-and-measure backends.

Both backends expose the same surface: set a lock or a cap, run one phase of
a serving workload, and hand back a power trace plus the device state *as
read back*, so requested and actual clocks can diverge visibly.
"""
from __future__ import annotations

import json
import logging
import shutil
import subprocess
import threading
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .device import (
    DeviceSpec,
    DvfsState,
    PowerModelParams,
    apply_clock_lock,
    apply_memory_clock,
    apply_power_cap,
    cap_resolution,
    free_running_state,
    throttle_artefact,
)
from .errors import BackendError, BackendUnavailable, CapabilityError, UnsupportedClock
from .telemetry import DEFAULT_CADENCE_S, PhaseWindow, PollingSampler, PowerTrace
from .workload import PhasePoint, get_profile, model_power, phase_duration, utilization_scale

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackendCapabilities:
    can_lock_clock: bool
    can_set_cap: bool
    can_read_counter: bool
    supported_locks: tuple
    cap_range: tuple  # (min W, max W)


@dataclass(frozen=True)
class WorkloadRequest:
    """One phase run under at most one energy lever."""

    architecture: str
    point: PhasePoint
    lock: Optional[float] = None
    cap: Optional[float] = None

    def __post_init__(self):
        if self.lock is not None and self.cap is not None:
            raise ValueError("a request sets a clock lock or a power cap, not both")

    @property
    def lever(self) -> str:
        if self.lock is not None:
            return "lock"
        if self.cap is not None:
            return "cap"
        return "free"


@dataclass(frozen=True, eq=False)
class WorkloadResult:
    tokens_processed: int
    wall_time: float
    trace: PowerTrace
    window: PhaseWindow
    observed_state: DvfsState
    counter_energy: Optional[float] = None
    metadata: dict = field(default_factory=dict)


class SimulatedBackend:
    """Desk-scale backend driven by the analytical device and workload models.

    Per-run randomness (power noise, sampler jitter, throttle draws,
    temperature) comes only from the ``seed`` passed to :meth:`run`, so a run
    is reproducible independent of what ran before it.
    """

    backend_id = "sim"

    def __init__(
        self,
        spec: DeviceSpec,
        profiles: dict,
        power: PowerModelParams,
        noise: float = 0.005,
        time_noise: Optional[float] = None,
        throttle_probability: float = 0.0,
        cadence: float = DEFAULT_CADENCE_S,
        jitter: float = 0.005,
        counter_resolution: float = 1e-3,
        temperature_band: tuple = (42.0, 45.0),
        cap_range: Optional[tuple] = None,
    ):
        self.spec = spec
        self.profiles = profiles
        self.power = power
        self.noise = noise
        self.time_noise = noise if time_noise is None else time_noise
        self.throttle_probability = throttle_probability
        self.cadence = cadence
        self.jitter = jitter
        self.counter_resolution = counter_resolution
        self.temperature_band = temperature_band
        self._cap_range = cap_range or (200.0, spec.tdp)
        self._state = free_running_state(spec)
        self._busy = threading.Lock()

    # -- control -------------------------------------------------------------
    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(
            can_lock_clock=True,
            can_set_cap=True,
            can_read_counter=True,
            supported_locks=self.spec.supported_locks,
            cap_range=self._cap_range,
        )

    def read_state(self) -> DvfsState:
        return self._state

    def set_lock(self, mhz: float) -> DvfsState:
        try:
            self._state = apply_clock_lock(self.spec, mhz)
        except UnsupportedClock as exc:
            raise CapabilityError(str(exc)) from exc
        return self._state

    def set_cap(self, watts: float) -> DvfsState:
        lo, hi = self._cap_range
        if not lo <= watts <= hi:
            raise CapabilityError(f"cap {watts} W outside supported range [{lo}, {hi}] W")
        self._state = apply_power_cap(self.spec, watts)
        return self._state

    def set_memory_clock(self, mhz: float) -> float:
        """Accepted and ignored by the device; returns the read-back memory clock."""
        self._state, readback = apply_memory_clock(self.spec, self._state, mhz)
        return readback

    def reset(self) -> DvfsState:
        self._state = free_running_state(self.spec)
        return self._state

    # -- execution -----------------------------------------------------------
    def run(self, request: WorkloadRequest, seed: int = 0) -> WorkloadResult:
        if not self._busy.acquire(blocking=False):
            raise BackendError("backend already has a run in flight")
        try:
            return self._run(request, seed)
        finally:
            self._busy.release()

    def _run(self, request: WorkloadRequest, seed: int) -> WorkloadResult:
        profile = get_profile(self.profiles, request.architecture)
        point = request.point
        arch, phase = request.architecture, point.phase
        load = utilization_scale(profile, point)

        if request.lock is not None:
            state = self.set_lock(request.lock)
        elif request.cap is not None:
            state = self.set_cap(request.cap)
            state = cap_resolution(self.spec, self.power, arch, phase, state, load)
        else:
            state = self.reset()

        seeds = np.random.SeedSequence(seed).spawn(2)
        state = throttle_artefact(self.spec, state, seeds[0], self.throttle_probability)
        self._state = state
        rng = np.random.default_rng(seeds[1])

        clock = state.actual_clock
        duration = phase_duration(profile, point, clock, self.spec)
        if self.time_noise > 0:
            duration *= max(1.0 + self.time_noise * rng.standard_normal(), 0.5)
        watts = model_power(profile, point, clock, self.spec, self.power)
        temp = float(rng.uniform(*self.temperature_band))

        trace = self._synthesize_trace(rng, duration, watts, clock, temp)
        inside = trace.timestamps <= duration
        snapshot = float(trace.power[inside][-1])
        counter = round(watts * duration / self.counter_resolution) * self.counter_resolution
        window = PhaseWindow(phase, 0.0, duration, snapshot_power=snapshot, counter_energy=counter)
        return WorkloadResult(
            tokens_processed=point.tokens,
            wall_time=duration,
            trace=trace,
            window=window,
            observed_state=state,
            counter_energy=counter,
            metadata={"backend": self.backend_id, "seed": seed, "load_scale": load},
        )

    def _synthesize_trace(self, rng, duration, watts, clock, temp) -> PowerTrace:
        # the sampler free-runs across the phase: one sample at or before the
        # start, jittered 50 ms ticks, and one at or after the end
        c, j = self.cadence, min(self.jitter, 0.2 * self.cadence)
        t0 = -float(rng.uniform(0.0, c))
        n = int(np.ceil((duration - t0) / c)) + 1
        ticks = t0 + c * np.arange(n + 1)
        ticks[1:] += rng.uniform(-j, j, size=n)
        if ticks[-1] < duration:
            ticks = np.append(ticks, ticks[-1] + c)
        while ticks[-2] >= duration:
            ticks = ticks[:-1]
        power = np.full(len(ticks), watts)
        if self.noise > 0:
            power = power * (1.0 + self.noise * rng.standard_normal(len(ticks)))
        return PowerTrace(
            timestamps=ticks,
            power=np.maximum(power, 1e-3),
            sm_clock=np.full(len(ticks), clock),
            temperature=np.full(len(ticks), temp),
            nominal_cadence=c,
            max_power=self.spec.power_sanity_factor * self.spec.tdp,
        )


# -- real hardware -------------------------------------------------------------

Runner = Callable[[Sequence[str]], str]


def _subprocess_runner(cmd: Sequence[str]) -> str:
    return subprocess.run(list(cmd), check=True, capture_output=True, text=True, timeout=30).stdout


@dataclass
class RealBackendConfig:
    smi: str = "nvidia-smi"
    device_index: int = 0
    endpoint: str = "http://127.0.0.1:8000/v1/completions"
    model: str = ""
    stack_metadata: dict = field(default_factory=dict)  # serving-stack versions, recorded verbatim
    cadence: float = DEFAULT_CADENCE_S


class RealBackend:
    """Adapter for a physical GPU behind a local OpenAI-compatible server.

    Control goes through the GPU-management CLI; every control action is
    followed by a read-back so the observed state reflects the device, not
    the request. Not exercised by the desk-scale test suite beyond its
    control plumbing.
    """

    backend_id = "real"

    def __init__(self, config: RealBackendConfig, spec: Optional[DeviceSpec] = None,
                 runner: Optional[Runner] = None, check_available: bool = True):
        self.config = config
        self.spec = spec or DeviceSpec()
        self.runner = runner or _subprocess_runner
        if check_available and runner is None and shutil.which(config.smi) is None:
            raise BackendUnavailable(
                f"{config.smi!r} not found on PATH; install the NVIDIA driver utilities or "
                "set backend_params.smi in the config, or use --backend sim"
            )
        self._requested_lock: Optional[float] = None
        self._cap: Optional[float] = None

    def _smi(self, *args: str) -> str:
        return self.runner([self.config.smi, "-i", str(self.config.device_index), *args])

    def query(self) -> dict:
        out = self._smi(
            "--query-gpu=clocks.sm,clocks.mem,power.draw,temperature.gpu,power.limit",
            "--format=csv,noheader,nounits",
        )
        sm, mem, pw, temp, limit = (float(x) for x in out.strip().splitlines()[0].split(","))
        return {"sm_clock": sm, "mem_clock": mem, "power": pw, "temperature": temp, "power_limit": limit}

    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(True, True, True, self.spec.supported_locks, (200.0, self.spec.tdp))

    def read_state(self) -> DvfsState:
        q = self.query()
        cap = self._cap
        engaged = cap is not None and q["power"] >= 0.98 * cap
        return DvfsState(actual_clock=q["sm_clock"], requested_lock=self._requested_lock,
                         configured_cap=cap, cap_engaged=engaged)

    def set_lock(self, mhz: float) -> DvfsState:
        self._smi(f"--lock-gpu-clocks={int(mhz)},{int(mhz)}")
        self._requested_lock, self._cap = float(mhz), None
        state = self.read_state()
        if state.actual_clock != mhz:
            log.warning("requested lock %.0f MHz, device reports %.0f MHz", mhz, state.actual_clock)
        return state

    def set_cap(self, watts: float) -> DvfsState:
        self._smi("--reset-gpu-clocks")
        self._smi(f"--power-limit={int(watts)}")
        self._requested_lock, self._cap = None, float(watts)
        return self.read_state()

    def set_memory_clock(self, mhz: float) -> float:
        before = self.query()["mem_clock"]
        self._smi(f"--lock-memory-clocks={int(mhz)},{int(mhz)}")
        after = self.query()["mem_clock"]
        if after == before:
            log.warning("memory clock request %.0f MHz ignored; still %.0f MHz", mhz, after)
        return after

    def reset(self) -> DvfsState:
        self._smi("--reset-gpu-clocks")
        self._smi(f"--power-limit={int(self.spec.tdp)}")
        self._requested_lock = self._cap = None
        return self.read_state()

    def _read_sample(self):
        q = self.query()
        return q["power"], q["sm_clock"], q["temperature"]

    def _serve(self, request: WorkloadRequest) -> None:
        p = request.point
        max_tokens = 1 if p.phase.value == "prefill" else p.output_len
        body = {
            "model": self.config.model,
            "prompt": [[0] * p.context] * p.batch,  # token-id prompts of exact length
            "max_tokens": max_tokens,
            "ignore_eos": True,
        }
        req = urllib.request.Request(self.config.endpoint, data=json.dumps(body).encode(),
                                     headers={"Content-Type": "application/json"})
        try:
            urllib.request.urlopen(req, timeout=3600).read()
        except OSError as exc:
            raise BackendUnavailable(f"serving endpoint {self.config.endpoint} unreachable: {exc}") from exc

    def run(self, request: WorkloadRequest, seed: int = 0) -> WorkloadResult:
        if request.lock is not None:
            state = self.set_lock(request.lock)
        elif request.cap is not None:
            state = self.set_cap(request.cap)
        else:
            state = self.reset()
        sampler = PollingSampler(self._read_sample, self.config.cadence)
        sampler.start()
        t_start = sampler.now()
        self._serve(request)
        t_end = sampler.now()
        snapshot = self._read_sample()[0]
        trace = sampler.stop()
        observed = self.read_state()
        window = PhaseWindow(request.point.phase, t_start, t_end, snapshot_power=snapshot)
        return WorkloadResult(
            tokens_processed=request.point.tokens,
            wall_time=t_end - t_start,
            trace=trace,
            window=window,
            observed_state=observed if observed.actual_clock else state,
            metadata={"backend": self.backend_id, "seed": seed, "stack": dict(self.config.stack_metadata)},
        )


def make_backend(kind: str, spec: DeviceSpec, profiles=None, power=None, **params):
    if kind == "sim":
        return SimulatedBackend(spec, profiles, power, **params)
    if kind == "real":
        return RealBackend(RealBackendConfig(**params), spec)
    raise ValueError(f"unknown backend {kind!r}; expected 'sim' or 'real'")
