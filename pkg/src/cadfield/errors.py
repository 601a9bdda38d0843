"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it as the
machine-parsable prefix of its one-line failure message.
"""


class CadFieldError(Exception):
    category = "error"


class InvalidInputError(CadFieldError, ValueError):
    category = "invalid-input"


class FormatError(InvalidInputError):
    """Unparseable input file. ``line`` is 1-based when known."""

    category = "format"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DimensionError(InvalidInputError):
    category = "dimension"


class NotWatertightError(InvalidInputError):
    category = "not-watertight"


class SurfaceAmbiguousError(CadFieldError):
    """Query point lies inside the surface tolerance band; resample it."""

    category = "surface-ambiguous"


class EmptySilhouetteError(InvalidInputError):
    category = "empty-silhouette"


class CorruptLibraryError(CadFieldError):
    category = "corrupt-library"


class LibraryBuildError(CadFieldError):
    category = "library-build"


class InfeasibleError(CadFieldError):
    category = "infeasible"


class TooManyDiscardsError(InfeasibleError):
    category = "too-many-discards"

    def __init__(self, message, views=()):
        super().__init__(message)
        self.views = list(views)


class AlignmentError(CadFieldError):
    category = "alignment-ill-conditioned"


class DoubleBackwardError(CadFieldError, RuntimeError):
    category = "double-backward"


class NonFiniteError(CadFieldError, FloatingPointError):
    category = "non-finite"


class OptimizerError(CadFieldError):
    category = "optimizer"


class DivergenceError(CadFieldError):
    """Training produced a non-finite loss."""

    category = "divergence"

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)
        self.iteration = iteration
