"""Exception hierarchy shared by every module."""


class CsrFheError(Exception):
    """Base class for all package errors."""


# sparse
class DuplicateEntry(CsrFheError, ValueError):
    pass


class IndexOutOfRange(CsrFheError, IndexError):
    pass


class InvalidRating(CsrFheError, ValueError):
    pass


# he_backend
class InvalidParams(CsrFheError, ValueError):
    pass


class TooManyValues(CsrFheError, ValueError):
    pass


class WrongKey(CsrFheError):
    pass


class KeyMismatch(CsrFheError):
    pass


class DepthExhausted(CsrFheError):
    """The circuit needs more multiplicative levels than the parameters allow.

    ``required_depth`` is the budget the full request would need and
    ``max_feasible_T`` the largest iteration count that still fits, when
    the failure was detected by schedule planning rather than mid-circuit.
    """

    def __init__(self, message, required_depth=None, max_feasible_T=None):
        super().__init__(message)
        self.required_depth = required_depth
        self.max_feasible_T = max_feasible_T


class SerializationError(CsrFheError, ValueError):
    pass


# packing
class ProfileTooWide(CsrFheError, ValueError):
    pass


class BatchTooWide(CsrFheError, ValueError):
    pass


# protocol
class KeyMisuse(CsrFheError):
    """A party tried to use key material it must not hold."""


class PrivacyViolation(CsrFheError):
    pass


# eval / cli
class ParseError(CsrFheError, ValueError):
    def __init__(self, message, line_number=None):
        super().__init__(message)
        self.line_number = line_number


class DimensionMismatch(CsrFheError, ValueError):
    pass


class SubsetTooLarge(CsrFheError, ValueError):
    pass


class EmptySet(CsrFheError, ValueError):
    pass


class ConfigError(CsrFheError, ValueError):
    pass
