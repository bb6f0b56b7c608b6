"""
Exception hierarchy shared by every tffquant module. Each class also
derives from the builtin exception a caller would expect, so existing
``except ValueError`` handlers keep working.
"""


class TffQuantError(Exception):
    """
    Base class for all tffquant errors.
    """


class ConfigError(TffQuantError, ValueError):
    """
    An argument or configuration value is out of range.
    """


class ConstructionError(TffQuantError, ValueError):
    """
    No tight fusion frame can be built for the requested parameters.
    """


class ShapeError(TffQuantError, ValueError):
    """
    Matrix or container dimensions do not line up.
    """


class FormatError(TffQuantError, ValueError):
    """
    A binary container could not be parsed.

    :param str message: Human readable description.
    :param int offset: Byte offset where parsing failed (or None).
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(FormatError):
    """
    A layer record failed its CRC32 check.

    :param str name: Best-effort name of the damaged layer.
    :param int offset: Byte offset of the damaged record.
    """

    def __init__(self, name, offset):
        super().__init__(f"CRC mismatch in layer record {name!r}", offset)
        self.name = name


class NumericalError(TffQuantError, ArithmeticError):
    """
    A numerical routine failed to converge or factorize.

    :param str message: Human readable description.
    :param float violation: Largest remaining constraint violation, if any.
    """

    def __init__(self, message, violation=None):
        super().__init__(message)
        self.violation = violation
