"""Exception hierarchy. Each category maps to a distinct CLI exit code."""


class FactorkitError(Exception):
    exit_code = 1
    category = "error"


class ConfigurationError(FactorkitError, ValueError):
    exit_code = 3
    category = "configuration"


class ContractError(FactorkitError, ValueError):
    exit_code = 4
    category = "contract"


class NumericFailure(FactorkitError, ArithmeticError):
    exit_code = 5
    category = "numeric-failure"

    def __init__(self, message, layer=None, step=None, component=None):
        super().__init__(message)
        self.layer = layer
        self.step = step
        self.component = component


class FormatError(FactorkitError, IOError):
    exit_code = 6
    category = "io"

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class StateError(FactorkitError, RuntimeError):
    exit_code = 7
    category = "state"
