"""Phase-aware GPU DVFS energy toolkit for LLM serving workloads."""

__version__ = "0.1.0"

from .device import DeviceSpec, DvfsState  # noqa: E402
from .telemetry import Phase, PhaseWindow, PowerTrace, measure_window  # noqa: E402
from .workload import ArchitectureProfile, PhasePoint  # noqa: E402

__all__ = [
    "__version__",
    "ArchitectureProfile",
    "DeviceSpec",
    "DvfsState",
    "Phase",
    "PhasePoint",
    "PhaseWindow",
    "PowerTrace",
    "measure_window",
]
