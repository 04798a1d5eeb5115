"""Exception hierarchy.

Each family carries an ``exit_code`` so the CLI can map failures to
distinct process exit statuses.
"""


class DvfsEnergyError(Exception):
    exit_code = 1


# telemetry
class TelemetryError(DvfsEnergyError):
    exit_code = 10


class InsufficientSamples(TelemetryError):
    pass


class WindowOutOfRange(TelemetryError):
    pass


class MissingSnapshot(TelemetryError):
    pass


class InvalidTrace(TelemetryError):
    pass


# device model
class DeviceError(DvfsEnergyError):
    exit_code = 11


class UnsupportedClock(DeviceError):
    pass


class UnderdeterminedFit(DeviceError):
    pass


# workload model
class WorkloadError(DvfsEnergyError):
    exit_code = 12


class CalibrationConflict(WorkloadError):
    def __init__(self, message, conflicts=()):
        super().__init__(message)
        self.conflicts = list(conflicts)


class UnknownArchitecture(WorkloadError):
    pass


# backend
class BackendError(DvfsEnergyError):
    exit_code = 13


class CapabilityError(BackendError):
    pass


class BackendUnavailable(BackendError):
    pass


# orchestrator
class OrchestratorError(DvfsEnergyError):
    exit_code = 14


class EmptyGrid(OrchestratorError):
    pass


class AggregationMismatch(OrchestratorError):
    pass


# analysis
class AnalysisError(DvfsEnergyError):
    exit_code = 15


class IncompleteCell(AnalysisError):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class AxisMismatch(AnalysisError):
    pass


# policy
class PolicyError(DvfsEnergyError):
    exit_code = 16


class PolicyApplyError(PolicyError):
    pass
