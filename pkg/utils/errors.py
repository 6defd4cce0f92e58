class AVSDError(Exception):
    """Base class for every error raised by this package"""


class RejectedInputError(AVSDError, ValueError):
    """Input rejected before any computation (shapes, token ids, empty lists)"""


class ConsistencyError(AVSDError):
    """A computed quantity violated an invariant it must satisfy"""


class ConfigError(AVSDError, ValueError):
    """Invalid configuration value; the message names the dotted key"""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class CheckpointError(AVSDError):
    """Checkpoint missing, unreadable or incompatible"""
