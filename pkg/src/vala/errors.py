"""Exception hierarchy.  ``exit_code`` is what the CLI returns for each kind."""


class VALAError(Exception):
    exit_code = 1


class ConfigError(VALAError, ValueError):
    """Invalid configuration or usage."""

    exit_code = 2


class FormatError(VALAError, ValueError):
    """A file on disk does not match its documented format."""


class ManifestError(FormatError):
    pass


class CheckpointError(FormatError):
    pass


class ImageFormatError(FormatError):
    pass


class TrainingError(VALAError, RuntimeError):
    """Training aborted (non-finite gradients, missing labels, ...)."""
