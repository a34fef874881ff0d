"""Exception hierarchy shared by every module."""


class TResNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TResNetError, ValueError):
    """A tensor has the wrong rank or an incompatible extent along some axis."""


class PaddingError(TResNetError, ValueError):
    """Reflect padding requested that is not smaller than the padded extent."""


class ParameterError(TResNetError, ValueError):
    """A parameter bundle violates its invariants (e.g. negative variance)."""


class ConfigError(TResNetError, ValueError):
    """A model configuration is invalid. ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid model config: " + "; ".join(self.violations))


class WeightFormatError(TResNetError):
    """The weight container is not a valid file (bad magic, truncated, bad JSON)."""


class WeightLoadError(TResNetError):
    """Weight container names or shapes do not match the target model."""

    def __init__(self, offenders, total=None):
        self.offenders = list(offenders)
        total = len(self.offenders) if total is None else total
        shown = "\n  ".join(self.offenders[:10])
        super().__init__(f"{total} mismatched tensor(s); first {min(total, 10)}:\n  {shown}")


class ImageError(TResNetError):
    """An input image could not be read or decoded."""


class ValidationError(TResNetError, ValueError):
    """An argument has an invalid value (e.g. non-binary targets)."""
