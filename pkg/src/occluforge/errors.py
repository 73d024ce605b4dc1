"""Exception types shared across the package."""


class OccluforgeError(Exception):
    """Base class for all package errors."""


class PreconditionError(OccluforgeError, ValueError):
    pass


class AlignmentUnderdetermined(OccluforgeError):
    """Fewer than three usable correspondences, or a collinear source set."""


class DegenerateRotation6D(OccluforgeError):
    def __init__(self, message: str, joint: int | None = None):
        super().__init__(message if joint is None else f"joint {joint}: {message}")
        self.joint = joint


class EmptyFrame(OccluforgeError):
    pass


class EmptyMesh(OccluforgeError):
    pass


class NothingToOversample(OccluforgeError):
    pass


class ContractViolation(OccluforgeError):
    pass


class TrainingDiverged(OccluforgeError):
    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class ParseError(OccluforgeError):
    """Malformed file. ``offset`` is the byte (or line) position of the problem."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path is not None else ""
        super().__init__(f"{src}{message}{where}")
        self.offset = offset
        self.path = path


class ConfigError(OccluforgeError, ValueError):
    pass
