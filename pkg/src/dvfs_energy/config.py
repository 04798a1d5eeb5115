"""Tool configuration and model loading."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

from .device import DeviceSpec, PowerModelParams, calibrate, load_device_spec, load_power_fixtures, load_power_params
from .workload import load_profiles, utilization_scale


def data_path(name: str) -> Path:
    return Path(str(resources.files("dvfs_energy") / "data" / name))


@dataclass
class ToolConfig:
    device: str = ""  # device spec JSON; empty -> bundled H200
    profiles: str = ""  # calibrated profiles JSON; empty -> bundled
    power_params: str = ""  # power model JSON; empty -> bundled
    targets: str = ""  # calibration targets CSV; empty -> bundled
    priors: str = ""
    fixtures: str = ""
    backend: str = "sim"
    backend_params: dict = field(default_factory=dict)
    out: str = "out"
    seed: int = 0
    noise: float = 0.005

    @classmethod
    def load(cls, path: Optional[str]) -> "ToolConfig":
        if not path:
            return cls()
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def resolve(self, key: str, default_name: str) -> Path:
        value = getattr(self, key)
        return Path(value) if value else data_path(default_name)


def load_spec(cfg: ToolConfig) -> DeviceSpec:
    return load_device_spec(cfg.resolve("device", "device_h200.json"))


def load_model(cfg: ToolConfig):
    """(spec, profiles, power params) as configured."""
    spec = load_spec(cfg)
    profiles = load_profiles(cfg.resolve("profiles", "calibrated_profiles.json"))
    power = load_power_params(cfg.resolve("power_params", "power_params.json"))
    return spec, profiles, power


def calibrate_power(fixtures_path, spec: DeviceSpec, profiles: dict) -> PowerModelParams:
    """Power-component fit with each fixture scaled by its profile's utilization."""
    from .telemetry import Phase
    from .workload import PhasePoint

    def scale(arch, phase, batch):
        prof = profiles.get(arch)
        if prof is None:
            return 1.0
        return utilization_scale(prof, PhasePoint(Phase(phase), batch, 1024))

    return calibrate(load_power_fixtures(fixtures_path), spec, scale)
