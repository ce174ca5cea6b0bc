"""Exception hierarchy shared by every STMR module.

Each error can render itself as a dict so the CLI can print a
machine-readable JSON record on stderr.
"""


class StmrError(Exception):
    def __init__(self, message, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self):
        record = {'error': type(self).__name__, 'message': self.message}
        record.update(self.details)
        return record


class MeshError(StmrError):
    pass


class ObjParseError(MeshError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}", line=line)
        self.line = line


class DegenerateFaceError(MeshError):
    def __init__(self, face_index, area):
        super().__init__(f"degenerate face {face_index} (area {area:.3e} mm^2)",
                         face_index=int(face_index))
        self.face_index = int(face_index)


class NonManifoldError(MeshError):
    def __init__(self, message, report=None):
        super().__init__(message, report=report.to_dict() if report is not None else None)
        self.report = report


class SpiralError(StmrError):
    pass


class SimplificationError(MeshError):
    def __init__(self, message, achieved):
        super().__init__(message, achieved=int(achieved))
        self.achieved = int(achieved)


class ShapeError(StmrError):
    pass


class GradientError(StmrError):
    pass


class OptimizerError(StmrError):
    pass


class CheckpointError(StmrError):
    pass


class ConfigError(StmrError):
    pass


class ConfigMismatchError(ConfigError):
    pass


class MetricError(StmrError):
    pass


class ProcrustesError(MetricError):
    pass


class TrainingDivergedError(StmrError):
    def __init__(self, term, step):
        super().__init__(f"loss term '{term}' became non-finite at step {step}",
                         term=term, step=int(step))
        self.term = term


class UnknownVariantError(StmrError):
    pass


class UsageError(ConfigError):
    pass


class StorageError(StmrError):
    """A file or directory could not be read or written."""

    def __init__(self, message, path=None):
        super().__init__(message, path=None if path is None else str(path))
        self.path = path
