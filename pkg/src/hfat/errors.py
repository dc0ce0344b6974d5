"""Exception types shared across the package."""


class HfatError(Exception):
    pass


class DimensionError(HfatError, ValueError):
    pass


class ContractError(HfatError, ValueError):
    pass


class LifecycleError(HfatError, RuntimeError):
    pass


class NumericError(HfatError, ArithmeticError):
    pass


class FormatError(HfatError, ValueError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class CapabilityError(HfatError, ValueError):
    pass


class InsufficientDataError(HfatError, ValueError):
    pass
