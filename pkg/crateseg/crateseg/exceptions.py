class ConfigurationError(ValueError):
    """Raised when shapes, hyperparameters or indices are inconsistent with a configuration."""


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be decoded."""


class ChecksumError(CheckpointError):
    def __init__(self, stored: int, computed: int):
        super().__init__(f"Checkpoint CRC mismatch: stored 0x{stored:08x}, computed 0x{computed:08x}")
        self.stored = stored
        self.computed = computed


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"Checkpoint format version {found} is not supported (this build reads version {expected})")
        self.found = found
        self.expected = expected


class ImageFormatError(ValueError):
    """Raised when an image header is malformed. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite values or diverges."""
