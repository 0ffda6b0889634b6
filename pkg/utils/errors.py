"""Exception hierarchy shared by every stage of the pipeline.

Validation errors map to exit code 2 on the command line, everything else
derived from VadError maps to exit code 1.
"""


class VadError(Exception):
    """Base class for toolkit failures"""


class ValidationError(VadError):
    """Bad input, usage or configuration"""


class InvalidInput(ValidationError, ValueError):
    pass


class ShapeError(ValidationError, ValueError):
    pass


class ConfigError(ValidationError):
    pass


class ManifestError(ValidationError):
    pass


class AlignmentError(ValidationError):
    """Clip ids of two archives (or archive and references) disagree"""

    def __init__(self, message: str, offenders=None):
        self.offenders = sorted(offenders or [])
        if self.offenders:
            preview = ", ".join(self.offenders[:10])
            more = f" (+{len(self.offenders) - 10} more)" if len(self.offenders) > 10 else ""
            message = f"{message}: {preview}{more}"
        super().__init__(message)


class UndefinedMetric(VadError):
    pass


class NonFiniteGradient(VadError):
    def __init__(self, names):
        self.names = list(names)
        super().__init__(f"Non-finite gradient in: {', '.join(self.names)}")


class TrainingDiverged(VadError):
    def __init__(self, message: str, checkpoint_path=None):
        self.checkpoint_path = checkpoint_path
        super().__init__(message)


class DistillationFailed(VadError):
    pass


class ModelFormatError(VadError):
    pass
