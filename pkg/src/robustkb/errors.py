"""Exception and warning types shared across the package."""


class RobustKBError(Exception):
    """Base class for all package errors."""


class ConfigError(RobustKBError):
    """Configuration document cannot be turned into a valid run."""


class MissingKey(ConfigError):
    pass


class DimensionMismatch(ConfigError, ValueError):
    pass


class NotPositiveDefinite(ConfigError, ValueError):
    def __init__(self, name, index, eigenvalue):
        self.name = name
        self.index = index
        self.eigenvalue = eigenvalue
        super().__init__(
            f"{name} is not uniformly positive definite at grid index {index} "
            f"(smallest eigenvalue {eigenvalue:.6g})"
        )


class GridMismatch(RobustKBError, ValueError):
    pass


class BoundViolation(RobustKBError, ValueError):
    pass


class DomainViolation(RobustKBError, ValueError):
    """A concave dual is -inf somewhere along a parameter path."""


class NotAdapted(RobustKBError, ValueError):
    pass


class NotProper(RobustKBError, ValueError):
    pass


class TooManyBlocks(RobustKBError, ValueError):
    pass


class UnknownSubcommand(RobustKBError):
    pass


class RegressionRankDeficient(UserWarning):
    pass


class ParticleDegeneracy(UserWarning):
    pass
