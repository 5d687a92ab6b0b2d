class OreYOLOError(Exception):
    pass


class InvalidConfigError(OreYOLOError, ValueError):
    """Configuration value or key outside its valid range."""


class ShapeError(OreYOLOError, ValueError):
    """Tensor shape does not match what a block expects."""


class DataError(OreYOLOError, ValueError):
    """Malformed or out-of-range dataset content."""
