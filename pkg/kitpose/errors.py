"""
KITPose error types.

Every error derives from KitPoseError and from the builtin it refines, so a
caller may catch either the project type or the usual Python one.
"""


class KitPoseError(Exception):
    """Base class for all KITPose failures."""


class ShapeError(KitPoseError, ValueError):
    """Tensor shapes or extents do not fit an operation."""


class NumericalError(KitPoseError, ArithmeticError):
    """Non-finite values, mixed precision or a failed numerical check."""


class ConfigError(KitPoseError, ValueError):
    """Invalid or unknown configuration key/value."""


class DatasetError(KitPoseError, OSError):
    """Missing image, malformed annotation file or invalid skeleton."""


class CheckpointError(KitPoseError, OSError):
    """Unreadable checkpoint or checkpoint/config mismatch."""


class EvaluationError(KitPoseError, ValueError):
    """Metric inputs that admit no score (no labeled keypoints, no records)."""
