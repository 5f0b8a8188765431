class ConfigurationError(ValueError):
    """Inputs or parameters inconsistent with the configured architecture."""


class FrameError(ValueError):
    """A frame cannot be processed (shape mismatch, malformed vehicle set)."""
