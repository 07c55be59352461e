"""Exception hierarchy shared by all modules."""


class ImuAugError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(ImuAugError, ValueError):
    pass


class InvalidRotation(InvalidArgument):
    """A quaternion is not unit norm within tolerance."""


class InvalidAngle(InvalidArgument):
    pass


class ConfigurationError(ImuAugError):
    """Model, ruleset, catalogue or experiment configuration is inconsistent."""


class InsufficientData(ImuAugError):
    def __init__(self, group, count):
        self.group = group
        self.count = count
        super().__init__(f"group {group} has {count} repetition(s); at least 2 required")


class DataValidationError(ImuAugError):
    """A file on disk does not satisfy its schema or numeric constraints."""


class LeakageError(ImuAugError):
    """An augmented repetition derives from a real repetition outside its partition."""

    def __init__(self, message, offending=()):
        self.offending = tuple(offending)
        super().__init__(message)
