"""Exception hierarchy shared across the package."""


class AdsplaceError(Exception):
    """Base class for all package errors."""


class ContractViolation(AdsplaceError, ValueError):
    pass


class SingularCell(AdsplaceError, ValueError):
    pass


class InvalidCoordinate(AdsplaceError, ValueError):
    pass


class EmptySelection(AdsplaceError, ValueError):
    pass


class InvalidSigma(AdsplaceError, ValueError):
    pass


class TableBuildError(AdsplaceError, RuntimeError):
    pass


class MissingCondition(AdsplaceError, ValueError):
    pass


class UnknownSpecies(AdsplaceError, KeyError):
    pass


class NumericalBlowup(AdsplaceError, FloatingPointError):
    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


class GradientOverflow(AdsplaceError, FloatingPointError):
    def __init__(self, message, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id


class NonFiniteScore(AdsplaceError, FloatingPointError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class InsufficientData(AdsplaceError, ValueError):
    pass


class OracleViolation(AdsplaceError, AssertionError):
    pass


class ConfigError(AdsplaceError, ValueError):
    pass


class ParseError(AdsplaceError, ValueError):
    def __init__(self, message, line=None, col=None):
        loc = f" (line {line}, col {col})" if line is not None else ""
        super().__init__(f"{message}{loc}")
        self.line = line
        self.col = col


class MissingLattice(ParseError):
    pass
