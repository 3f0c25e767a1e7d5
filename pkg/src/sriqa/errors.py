"""Exception types shared across the package."""


class SriqaError(Exception):
    """Base class for operational failures surfaced to callers."""


class ShapeError(SriqaError):
    """Array or image dimensions violate a layer or codec contract."""


class ConfigError(SriqaError):
    """Invalid configuration value (widths, ratios, units, plans)."""


class NumericError(SriqaError):
    """Non-finite values where finite ones are required."""


class ImageFormatError(SriqaError):
    """Malformed or unsupported image payload."""


class ManifestError(SriqaError):
    """Manifest records violate the dataset contract."""


class MetricError(SriqaError):
    """Degenerate input to a correlation metric."""


class LabelingError(SriqaError):
    """Score panels or anchors unusable for decay fitting."""


class PluginError(SriqaError):
    """An external SR plugin failed or produced bad output."""


class StateError(SriqaError):
    """Operation not valid for the current store or training state."""
