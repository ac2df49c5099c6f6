"""Exception hierarchy shared across the package."""


class KalaError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(KalaError, ValueError):
    pass


class DegenerateRowError(KalaError, ValueError):
    """A softmax row had every entry masked."""


class ContractError(KalaError, ValueError):
    pass


class NumericError(KalaError, ArithmeticError):
    pass


class ConfigError(KalaError, ValueError):
    pass


class AnnotationError(KalaError, ValueError):
    """Mentions overlap or fall outside the sequence."""


class ParseError(KalaError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class RangeError(ParseError):
    """A character boundary lies outside its document."""


class EntityLookupError(KalaError, KeyError):
    pass


class DegenerateNeighborhoodError(KalaError, ValueError):
    """Every neighbor of an entity is the null entity and no self-loop survives."""


class DivergenceError(KalaError, RuntimeError):
    pass


class GradCheckError(KalaError, AssertionError):
    def __init__(self, group, error, tolerance):
        self.group = group
        self.error = error
        self.tolerance = tolerance
        super().__init__(
            f"gradient check failed for group {group!r}: "
            f"max relative error {error:.3e} > {tolerance:.1e}"
        )
