"""Sweep planning, execution and aggregation.

Records are flat JSON objects appended one per line to ``records.jsonl``.
Every run's randomness is derived from ``(sweep seed, config id, rep)``, so
a resumed sweep reproduces exactly the records an uninterrupted one would.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .analysis import energy_per_token
from .backend import WorkloadRequest
from .errors import AggregationMismatch, DvfsEnergyError, EmptyGrid
from .telemetry import Phase, measure_window
from .workload import PhasePoint

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MAX_REPETITIONS = 20
POLICY_MIN_REPETITIONS = 10
STDDEV_FLAG = 0.03
LEVERS = ("lock", "cap", "free")


@dataclass(frozen=True)
class SweepGrid:
    architectures: tuple = ("GQA", "GQA-ctrl", "MLA", "GDN", "Mamba2")
    phases: tuple = ("decode",)
    clocks: tuple = (390.0, 780.0, 1185.0, 1590.0, 1980.0)
    caps: tuple = (280.0, 420.0, 500.0, 600.0, 700.0)
    batches: tuple = (1, 2, 4, 8, 16, 32)
    contexts: tuple = (1024, 4096, 16384, 65536)
    repetitions: int = 10
    warmup: int = 3
    output_len: int = 128
    include_free_run: bool = True

    def __post_init__(self):
        for name in ("architectures", "phases", "clocks", "caps", "batches", "contexts"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "phases", tuple(Phase(p).value for p in self.phases))
        if not 1 <= self.repetitions <= MAX_REPETITIONS:
            raise ValueError(f"repetitions must lie in [1, {MAX_REPETITIONS}]")
        if self.repetitions < POLICY_MIN_REPETITIONS:
            log.warning("repetitions=%d is below the default policy of %d", self.repetitions, POLICY_MIN_REPETITIONS)
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SweepGrid":
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def load_grid(path) -> SweepGrid:
    return SweepGrid.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class RunConfig:
    arch: str
    phase: str
    batch: int
    context: int
    output_len: int
    lever: str
    level: Optional[float]

    @property
    def config_id(self) -> str:
        return config_hash(asdict(self))

    @property
    def cell(self) -> tuple:
        return (self.arch, self.phase, self.batch, self.context)

    def request(self) -> WorkloadRequest:
        point = PhasePoint(Phase(self.phase), self.batch, self.context, self.output_len)
        return WorkloadRequest(
            self.arch,
            point,
            lock=self.level if self.lever == "lock" else None,
            cap=self.level if self.lever == "cap" else None,
        )


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def plan(grid: SweepGrid) -> list[RunConfig]:
    """Cartesian product with one lever per config, architecture-major order."""
    for name in ("architectures", "phases", "batches", "contexts"):
        if not getattr(grid, name):
            raise EmptyGrid(f"grid axis {name!r} is empty")
    levers = [("lock", float(c)) for c in sorted(grid.clocks)] + [("cap", float(c)) for c in sorted(grid.caps)]
    if grid.include_free_run:
        levers.append(("free", None))
    if not levers:
        raise EmptyGrid("grid has no clock, cap or free-run levels")
    out = []
    for arch in grid.architectures:
        for phase in grid.phases:
            for batch in grid.batches:
                for ctx in grid.contexts:
                    for lever, level in levers:
                        out.append(RunConfig(arch, phase, int(batch), int(ctx), grid.output_len, lever, level))
    return out


def run_seed(seed: int, config_id: str, rep: int) -> int:
    """Per-run seed; warmups use negative rep indices."""
    digest = hashlib.sha256(f"{seed}:{config_id}:{rep}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class RecordSink:
    """Append-only NDJSON record file."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(canonical_json(record) + "\n")

    def records(self) -> list[dict]:
        return read_records(self.path)


def read_records(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "records.jsonl"
    if not path.exists():
        return []
    out = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            # a torn final line from a killed writer is dropped
            log.warning("skipping unparseable record line in %s", path)
    return out


def make_record(cfg: RunConfig, rep: int, result, seed: int, backend_id: str,
                clock: Callable[[], float] = time.time) -> dict:
    m = measure_window(result.trace, result.window)
    state = result.observed_state
    trace = result.trace
    return {
        "schema_version": SCHEMA_VERSION,
        "config_id": cfg.config_id,
        "arch": cfg.arch,
        "phase": cfg.phase,
        "batch": cfg.batch,
        "context": cfg.context,
        "output_len": cfg.output_len,
        "lever": cfg.lever,
        "level": cfg.level,
        "rep_index": rep,
        "tokens": result.tokens_processed,
        "wall_time_s": result.wall_time,
        "energy_j": m.energy,
        "energy_method": m.method.value,
        "counter_validation": m.validation.value,
        "counter_relative_gap": m.relative_gap,
        "crossed_gap": m.crossed_gap,
        "requested_lock_mhz": state.requested_lock,
        "configured_cap_w": state.configured_cap,
        "actual_clock_mhz": state.actual_clock,
        "cap_engaged": state.cap_engaged,
        "cap_floor_hit": state.cap_floor_hit,
        "throttled": state.throttled,
        "median_power_w": trace.median_power(),
        "median_temp_c": trace.median_temperature(),
        "timestamp": clock(),
        "backend": backend_id,
        "seed": seed,
    }


@dataclass
class RunSummary:
    executed: list = field(default_factory=list)  # config ids run in this call
    skipped: list = field(default_factory=list)  # already complete
    failed: dict = field(default_factory=dict)  # config id -> error text

    @property
    def ok(self) -> bool:
        return not self.failed


def execute(
    configs: Iterable[RunConfig],
    backend,
    sink: RecordSink,
    repetitions: int = 10,
    warmup: int = 3,
    seed: int = 0,
    clock: Callable[[], float] = time.time,
) -> RunSummary:
    """Run configs serially; resume-safe against whatever the sink already holds.

    A config is complete once the sink holds all its repetition indices. A
    partially recorded config re-runs its warmups and then only the missing
    repetitions, each with its own derived seed.
    """
    done: dict = {}
    for r in sink.records():
        done.setdefault(r["config_id"], set()).add(r["rep_index"])
    summary = RunSummary()
    backend_id = getattr(backend, "backend_id", type(backend).__name__)
    for cfg in configs:
        cid = cfg.config_id
        have = done.get(cid, set())
        missing = [k for k in range(repetitions) if k not in have]
        if not missing:
            summary.skipped.append(cid)
            continue
        try:
            request = cfg.request()
            for w in range(warmup):
                backend.run(request, seed=run_seed(seed, cid, -1 - w))
            for k in missing:
                result = backend.run(request, seed=run_seed(seed, cid, k))
                sink.append(make_record(cfg, k, result, seed, backend_id, clock))
        except DvfsEnergyError as exc:
            log.error("config %s (%s) failed: %s", cid, cfg, exc)
            summary.failed[cid] = f"{type(exc).__name__}: {exc}"
            continue
        summary.executed.append(cid)
    return summary


# -- aggregation ---------------------------------------------------------------

CONFIG_FIELDS = ("arch", "phase", "batch", "context", "output_len", "lever", "level")


@dataclass(frozen=True)
class AggregatedPoint:
    config_id: str
    arch: str
    phase: str
    batch: int
    context: int
    output_len: int
    lever: str
    level: Optional[float]
    mj_per_tok: float  # median
    tok_per_s: float  # median
    mj_per_tok_std: float
    tok_per_s_std: float
    n: int
    power_w: float  # median of per-run median power
    actual_clock_mhz: float  # median observed clock
    cap_engaged: bool  # any run engaged the cap

    @property
    def flagged(self) -> bool:
        """Spread above the 3% stddev/median threshold in either metric."""
        return (self.mj_per_tok_std > STDDEV_FLAG * self.mj_per_tok
                or self.tok_per_s_std > STDDEV_FLAG * self.tok_per_s)

    @property
    def tok_per_j(self) -> float:
        return 1e3 / self.mj_per_tok

    @property
    def cell(self) -> tuple:
        return (self.arch, self.phase, self.batch, self.context)


def _std(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def aggregate(records: list[dict]) -> AggregatedPoint:
    """Medians and sample standard deviations over one config's repetitions."""
    if not records:
        raise AggregationMismatch("no records to aggregate")
    ids = {r["config_id"] for r in records}
    if len(ids) != 1:
        raise AggregationMismatch(f"records span {len(ids)} config ids: {sorted(ids)}")
    # sort by rep so float summation order never depends on input order
    records = sorted(records, key=lambda r: r["rep_index"])
    first = records[0]
    e = np.array([
        energy_per_token(r["energy_j"], r["phase"], r["batch"], r["context"], r["output_len"]) for r in records
    ])
    tput = np.array([r["tokens"] / r["wall_time_s"] for r in records])
    return AggregatedPoint(
        config_id=first["config_id"],
        **{k: first[k] for k in CONFIG_FIELDS},
        mj_per_tok=float(np.median(e)),
        tok_per_s=float(np.median(tput)),
        mj_per_tok_std=_std(e),
        tok_per_s_std=_std(tput),
        n=len(records),
        power_w=float(np.median([r["median_power_w"] for r in records])),
        actual_clock_mhz=float(np.median([r["actual_clock_mhz"] for r in records])),
        cap_engaged=any(r["cap_engaged"] for r in records),
    )


def aggregate_all(records: list[dict], repetitions: Optional[int] = None) -> list[AggregatedPoint]:
    """Aggregate every config; configs short of ``repetitions`` records are skipped."""
    groups: dict = {}
    for r in records:
        groups.setdefault(r["config_id"], []).append(r)
    out = []
    for cid in sorted(groups):
        recs = groups[cid]
        if repetitions is not None and len({r["rep_index"] for r in recs}) < repetitions:
            log.warning("config %s has %d/%d repetitions; not aggregated", cid, len(recs), repetitions)
            continue
        out.append(aggregate(recs))
    return sorted(out, key=lambda a: (a.arch, a.phase, a.batch, a.context, LEVERS.index(a.lever), a.level or 0.0))


def aggregates_to_rows(points: list[AggregatedPoint]) -> list[dict]:
    return [{**asdict(p), "flagged": p.flagged} for p in points]
