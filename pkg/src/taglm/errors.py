class InputError(ValueError):
    """Bad user-supplied data (unknown node, too few labelled nodes, empty corpus...)."""


class ConfigError(ValueError):
    """Inconsistent dimensions or configuration values."""
