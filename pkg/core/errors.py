class SafeFlowError(Exception):
    """Base class for every error raised by the planner."""


class ValidationError(SafeFlowError, ValueError):
    """Invalid parameters, configs or environment layouts."""


class SingularityError(SafeFlowError):
    """A flow field was evaluated at or beyond its singular time t = 1."""


class IntegrationError(SafeFlowError):
    def __init__(self, message, step=None, phase=None):
        self.step = step
        self.phase = phase
        prefix = f"[{phase}] " if phase else ""
        suffix = f" (step {step})" if step is not None else ""
        super().__init__(f"{prefix}{message}{suffix}")


class QpInfeasibleError(SafeFlowError):
    """A violated constraint row has a zero gradient and no slack."""


class TrainingDivergedError(SafeFlowError):
    pass


class ClusteringError(SafeFlowError):
    pass


class ArtifactError(SafeFlowError):
    pass


class ArtifactIOError(ArtifactError):
    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{message}: {path}" if path else message)


class MalformedArtifactError(ArtifactError):
    pass


class SchemaVersionError(ArtifactError):
    pass


class CertificateViolationError(SafeFlowError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__(f"{len(self.violations)} certificate violation(s)")
