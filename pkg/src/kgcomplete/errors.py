"""Shared exception types."""


class ParseError(ValueError):
    """Raised when an input file (triples, rules, lexicon, ...) is malformed."""


class ConfigError(ValueError):
    """Raised when a configuration value violates its contract."""
