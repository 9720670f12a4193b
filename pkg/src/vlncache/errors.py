"""Exception types raised across the package."""


class VlnCacheError(Exception):
    """Base class for every error raised by vlncache."""


class InvalidDepth(VlnCacheError, ValueError):
    pass


class BehindCamera(VlnCacheError, ValueError):
    """Point lies at or behind the near plane and cannot be projected."""


class DimensionError(VlnCacheError, ValueError):
    pass


class ScoreRangeError(VlnCacheError, ValueError):
    pass


class AttentionNormalizationError(VlnCacheError, ValueError):
    pass


class MaskRemapInconsistency(VlnCacheError):
    """A token is marked for reuse but has no valid aligned index."""


class StaleWriteError(VlnCacheError):
    pass


class RenderHole(VlnCacheError):
    """A camera ray left the scene without hitting any surface."""


class TrajectoryOutOfBounds(VlnCacheError):
    pass


class EmptyEpisode(VlnCacheError, ValueError):
    pass


class ComparisonError(VlnCacheError, ValueError):
    pass


class ConfigError(VlnCacheError, ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class InvariantViolation(VlnCacheError):
    def __init__(self, invariant: str, detail: str):
        super().__init__(f"invariant violated: {invariant}: {detail}")
        self.invariant = invariant
