"""Exception hierarchy shared by all troughcal modules."""


class TroughcalError(Exception):
    """Base class for all troughcal errors."""


class ConfigError(TroughcalError):
    """Malformed or inconsistent configuration input."""


class InvalidGeometry(ConfigError):
    """Non-positive dimension or emissivity outside (0, 1]."""


class SensorOutOfRange(ConfigError):
    """Sensor position does not resolve to a valid grid cell."""


class NonFiniteInput(TroughcalError):
    """NaN or infinity where a finite value is required."""


class LengthMismatch(TroughcalError):
    """Paired vectors/series have different lengths."""


class NegativeFlow(TroughcalError):
    """Measured volume flow is negative beyond the noise floor."""


class CflViolation(TroughcalError):
    """u*dt/dx exceeds 1; the explicit upwind step would be unstable."""

    def __init__(self, msg, timestep=None):
        super().__init__(msg)
        self.timestep = timestep


class DiffusionStabilityViolation(TroughcalError):
    """dt exceeds the explicit stability bound for pipe axial conduction."""


class SimulationError(TroughcalError):
    """Forward simulation failed; carries the offending timestep index."""

    def __init__(self, msg, timestep=None):
        super().__init__(msg)
        self.timestep = timestep


class NonFiniteGradient(TroughcalError):
    """A gradient entry is NaN/inf; names the first offending block."""


class InvalidProbeCount(TroughcalError):
    """check_gradients called with n_probes < 1."""


class DivergedLoss(TroughcalError):
    """Training loss became non-finite."""


class NoSequences(TroughcalError):
    """fit() called with an empty sequence list."""


class EraMismatch(TroughcalError):
    """Self-consistency inputs do not share a valve era."""


class OverlappingEras(TroughcalError):
    """Two valve eras of one subfield overlap in time."""


class SchemaError(TroughcalError):
    """CSV file does not match the documented schema."""


class NonMonotoneTime(SchemaError):
    """Timestamps are not strictly increasing."""


class UnknownUnit(SchemaError):
    """Unit tag outside the closed vocabulary."""


class EmptySeries(TroughcalError):
    """Metric requested on an empty series."""


class DegenerateInput(TroughcalError):
    """Metric undefined for this input (e.g. constant regressor)."""


class ExportError(TroughcalError):
    """Failed to write a report artifact."""


class CheckpointMismatch(TroughcalError):
    """Checkpoint incompatible with the supplied topology/data."""
