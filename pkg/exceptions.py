"""
Error types shared by the URPE lab modules

Value-type errors also subclass ValueError so plain ``except ValueError``
callers keep working.
"""


class LabError(Exception):
    """Base class for every error raised by the lab"""


class DimensionError(LabError, ValueError):
    """Operand shapes do not agree"""

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = [tuple(s) for s in shapes]


class CapacityError(LabError, ValueError):
    """A sequence is longer than a positional carrier can hold"""


class NumericError(LabError, ArithmeticError):
    """NaN or Inf showed up in an operand or result"""


class ContractError(LabError, RuntimeError):
    """A call was made outside the conditions it is defined for"""


class InputError(LabError, ValueError):
    """Bad user-level input (token ids, task arguments)"""


class DomainError(LabError, ValueError):
    """Argument outside the mathematical domain of a formula"""


class ConfigError(LabError, ValueError):
    """Invalid or unknown configuration key"""


class CheckpointError(LabError, IOError):
    """Checkpoint file is missing, truncated or inconsistent"""


class TrainingDivergence(LabError, RuntimeError):
    """Loss or gradient went non-finite during training"""

    def __init__(self, message, step=None, parameter=None):
        super().__init__(message)
        self.step = step
        self.parameter = parameter
