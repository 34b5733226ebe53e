"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``ept.cli``).
"""


class EptError(Exception):
    exit_code = 1


class ConfigError(EptError):
    exit_code = 2


class ShapeError(ConfigError, ValueError):
    pass


class RankError(ConfigError, ValueError):
    pass


class BudgetError(ConfigError, ValueError):
    pass


class IntegralityError(BudgetError):
    """No integral rank solves the budget equation; ``nearest_s`` holds valid neighbours."""

    def __init__(self, message, nearest_s=()):
        super().__init__(message)
        self.nearest_s = tuple(nearest_s)


class ContractError(EptError, ValueError):
    pass


class CompatibilityError(ConfigError):
    pass


class SetupError(ConfigError):
    pass


class ProbeError(EptError, FloatingPointError):
    def __init__(self, message, param=None, index=None):
        super().__init__(message)
        self.param = param
        self.index = index


class DataError(EptError, ValueError):
    exit_code = 3


class DivergenceError(EptError, FloatingPointError):
    exit_code = 4
