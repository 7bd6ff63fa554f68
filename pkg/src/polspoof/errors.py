"""Exception hierarchy."""


class PolError(Exception):
    """Base class for all errors raised by polspoof."""


class DimensionError(PolError, ValueError):
    pass


class NonFiniteError(PolError, ValueError):
    pass


class ModelSpecError(PolError, ValueError):
    pass


class DatasetError(PolError, ValueError):
    pass


class ScheduleError(PolError, ValueError):
    pass


class BundleError(PolError):
    """Base for anything wrong with a proof bundle on disk or in memory."""


class ManifestError(BundleError):
    pass


class CheckpointFileError(BundleError):
    pass


class MissingCheckpointError(CheckpointFileError):
    pass


class BundleInvariantError(BundleError):
    pass


class DatasetMismatchError(BundleError):
    pass


class CalibrationError(PolError, ValueError):
    pass


class NotACheckpointError(PolError, ValueError):
    pass


class VerificationConfigError(PolError, ValueError):
    pass


class AttackError(PolError):
    pass


class NonConvergence(AttackError):
    """Adversarial optimization hit its iteration cap without meeting its threshold."""

    def __init__(self, message: str, *, n_max: int, partial=None):
        super().__init__(message)
        self.n_max = n_max
        self.partial = partial


class SpacingExceedsDelta(AttackError):
    def __init__(self, spacing: float, delta: float, needed_steps: int):
        super().__init__(
            f"checkpoint spacing {spacing:.6g} exceeds delta {delta:.6g}; "
            f"need at least T'={needed_steps}"
        )
        self.spacing = spacing
        self.delta = delta
        self.needed_steps = needed_steps


class SigmaTooSmall(AttackError):
    def __init__(self, sigma: float, required: float, gamma: float):
        super().__init__(
            f"sigma={sigma:.6g} must exceed the sequential-replay drift bound {required:.6g} "
            f"and stay below gamma={gamma:.6g}"
        )
        self.sigma = sigma
        self.required = required
        self.gamma = gamma
