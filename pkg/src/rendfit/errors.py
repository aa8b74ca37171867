"""Exception hierarchy shared by every module."""


class RendfitError(Exception):
    """Base class for all package errors."""


class ShapeError(RendfitError, ValueError):
    pass


class TapeError(RendfitError):
    pass


class DivergedError(RendfitError):
    """A loss component or gradient became non-finite."""

    def __init__(self, what, iteration=None):
        self.what = what
        self.iteration = iteration
        msg = f"diverged: {what}"
        if iteration is not None:
            msg += f" at iteration {iteration}"
        super().__init__(msg)


class BehindCameraError(RendfitError):
    pass


class DegenerateDimensionsError(RendfitError):
    pass


class RotationUndefinedError(RendfitError):
    pass


class DegenerateLatentError(RendfitError):
    pass


class OffScreenError(RendfitError):
    pass


class MeshInvariantError(RendfitError):
    pass


class ConfigError(RendfitError):
    pass


class ParseError(RendfitError):
    """Malformed input file; carries the 1-based line number when known."""

    def __init__(self, path, line, reason):
        self.path = str(path)
        self.line = line
        self.reason = reason
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {reason}")
