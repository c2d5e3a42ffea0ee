"""Exception types raised across the toolkit."""


class AdvDetectError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(AdvDetectError, ValueError):
    """An input violates a documented precondition."""


class DatasetError(AdvDetectError):
    """A dataset tree or sample is malformed.

    ``paths`` lists the offending files or directories.
    """

    def __init__(self, message, paths=()):
        self.paths = [str(p) for p in paths]
        if self.paths:
            message = f"{message}: {', '.join(self.paths)}"
        super().__init__(message)


class CheckpointError(AdvDetectError):
    """A checkpoint or reference-set file could not be read."""

    def __init__(self, message, path=None, expected_version=None):
        self.path = None if path is None else str(path)
        self.expected_version = expected_version
        if expected_version is not None:
            message = f"{message} (expected format version {expected_version})"
        if self.path:
            message = f"{self.path}: {message}"
        super().__init__(message)


class UnknownClassError(AdvDetectError, KeyError):
    """A predicted class has no clean reference features."""

    def __init__(self, class_id):
        self.class_id = int(class_id)
        super().__init__(f"class {self.class_id} is absent from the reference set")

    def __str__(self):
        return self.args[0]


class ConfigError(AdvDetectError):
    """An experiment config is missing, unreadable or inconsistent."""
