class ConfigError(ValueError):
    """Invalid configuration: incompatible variant, grid or hyper-parameter."""


class ShapeError(ValueError):
    """Tensor shape does not match what an operation expects."""
