"""Exception types shared across the package.

The CLI maps these onto exit codes: usage 2, data/format 3, numeric 4.
"""


class FipError(Exception):
    pass


class ArgumentError(FipError, ValueError):
    pass


class NumericError(FipError, FloatingPointError):
    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


class OrderingError(FipError, ValueError):
    def __init__(self, msg, edge=None):
        super().__init__(msg)
        self.edge = edge


class StructureError(FipError, ValueError):
    pass


class CapabilityError(FipError, NotImplementedError):
    pass


class ConfigError(FipError, ValueError):
    pass


class DataError(FipError, ValueError):
    pass


class FormatError(FipError, ValueError):
    pass
