"""Exception hierarchy.

Every failure raised by the library derives from :class:`TiltGMMError`, so
callers (the CLI in particular) can separate numerical failures from usage
errors with a single ``except`` clause.
"""

from __future__ import annotations


class TiltGMMError(Exception):
    """Base class for all library failures."""

    stage = "estimation"


class ConvergenceError(TiltGMMError):
    """An iterative solver ran out of iterations.

    The last iterate is kept on ``last_iterate`` so it can be inspected.
    """

    def __init__(self, message, last_iterate=None, stage="estimation"):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.stage = stage


class RankDeficientError(TiltGMMError):
    def __init__(self, message, columns=(), stage="estimation"):
        super().__init__(message)
        self.columns = tuple(columns)
        self.stage = stage


class SeparationError(TiltGMMError):
    stage = "reduced-model fit"


class DensityError(TiltGMMError):
    stage = "density summary"


class ModelUnidentifiedError(TiltGMMError):
    stage = "aggregation"


class PayloadError(TiltGMMError):
    """Malformed, non-finite or incompatible wire document."""

    stage = "payload codec"
