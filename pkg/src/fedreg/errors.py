"""Error types shared across the simulator."""


class FedRegError(Exception):
    pass


class ConfigError(FedRegError):
    """Mismatched shapes, specs, or invalid wiring between components."""


class DataFormatError(FedRegError):
    """Malformed dataset file (bad magic, truncated payload, ...)."""


class NumericError(FedRegError):
    """Non-finite value produced where finite math is required."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer
