"""Exception hierarchy shared across bidsbatch modules."""


class BidsBatchError(Exception):
    """Base class for all errors raised by bidsbatch."""


class ConfigError(BidsBatchError):
    """A configuration file could not be read or is invalid."""
