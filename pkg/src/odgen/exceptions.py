"""Exception and warning types shared across the package."""


class ODGenError(Exception):
    """Base class for every error raised by odgen."""


class EmptyBox(ODGenError, ValueError):
    """A box has zero area after clipping or rounding."""


class MalformedLabel(ODGenError, ValueError):
    """A YOLO label line cannot be parsed or is out of range."""


class MissingImage(ODGenError, FileNotFoundError):
    """A label file has no matching image file."""


class InsufficientData(ODGenError, ValueError):
    """Not enough samples to fit a statistic."""


class Overflow(ODGenError, ValueError):
    """More objects than the conditioning list length N."""


class PoolMiss(ODGenError, KeyError):
    """The foreground pool has no image for a requested category."""


class BadEmbedderShape(ODGenError, ValueError):
    """A text embedder returned something other than an L x D array."""


class ShapeMismatch(ODGenError, ValueError):
    """Arrays that must share a shape do not."""


class BadSchedule(ODGenError, ValueError):
    """Invalid noise schedule parameters."""


class Divergence(ODGenError, RuntimeError):
    """Training produced a non-finite loss."""


class ClassMissing(ODGenError, ValueError):
    """A data split lacks one of the two discriminator classes."""


class MissingArtifact(ODGenError, FileNotFoundError):
    """A pipeline stage needs an upstream artifact that does not exist."""


class StaleUpstream(ODGenError, RuntimeError):
    """Upstream artifacts on disk no longer match the recorded hashes."""


class ConfigError(ODGenError, ValueError):
    """Invalid pipeline configuration."""


class MissingCategory(UserWarning):
    """A category has no boxes; the sampler will emit zero objects of it."""


class DegenerateBoxWarning(UserWarning):
    """A parsed box was dropped because its clipped area is below 1 px^2."""


class UntrainedClassifierWarning(UserWarning):
    """The discriminator is at chance level and should not be trusted."""
