"""
Exceptions raised across edgecast. Everything derives from `EdgecastException` so
callers (the CLI in particular) can map failures onto exit codes.
"""


class EdgecastException(Exception):
    """Base exception for all edgecast exceptions"""

    pass


class ConfigError(EdgecastException):
    """Invalid or inconsistent configuration: bad split fractions, branch keys that
    do not match, unknown config keys, missing artifacts at startup.
    """

    pass


class SchemaError(ConfigError):
    """Input file is missing a required column"""

    pass


class DataError(EdgecastException):
    """Input data violates an ordering or range requirement"""

    pass


class DimensionError(EdgecastException):
    """Vector lengths disagree (horizon or feature dimension)"""

    pass


class CalibrationError(EdgecastException):
    """Calibration could not be fit, e.g. on empty input"""

    pass


class RetrievalError(EdgecastException):
    """A retrieval result cannot be used, e.g. building a context from no cases"""

    pass
