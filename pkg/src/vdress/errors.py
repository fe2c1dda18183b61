"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value violates its documented range or shape."""


class DimensionError(ValueError):
    """Array shapes do not agree."""


class IntegrityError(RuntimeError):
    """A model parameter could not be assigned to the frozen/trainable split."""


class NumericError(FloatingPointError):
    """A non-finite value appeared during training."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class CheckpointError(RuntimeError):
    """A checkpoint is malformed, truncated or incompatible."""


class MetricError(ValueError):
    """A metric cannot be computed for the given pair."""


class ValidationError(ValueError):
    """A manifest record violates the pair schema."""

    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line


class ParseError(ValueError):
    """A manifest line is not well-formed JSON."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class PipelineError(RuntimeError):
    """A data-pipeline stage failed on one item."""
