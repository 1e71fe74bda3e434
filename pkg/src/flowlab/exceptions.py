"""Exception hierarchy shared by every flowlab module."""


class FlowlabError(Exception):
    """Base class for all library errors."""


class EmptyInputError(FlowlabError, ValueError):
    pass


class NonFiniteLossError(FlowlabError, ValueError):
    pass


class NonPositiveTemperatureError(FlowlabError, ValueError):
    pass


class AllZeroWeightsError(FlowlabError, ValueError):
    """Every weight underflowed to zero; raise the temperature."""


class DimensionMismatchError(FlowlabError, ValueError):
    pass


class OutOfRangeError(FlowlabError, ValueError):
    pass


class DimensionTooSmallError(FlowlabError, ValueError):
    pass


class NotPositiveDefiniteError(FlowlabError, ValueError):
    pass


class DivergenceError(FlowlabError, ArithmeticError):
    pass


class NonFiniteGradientError(DivergenceError):
    pass


class MissingHeadError(FlowlabError, KeyError):
    pass


class ArchitectureMismatchError(FlowlabError, ValueError):
    pass


class ConfigError(FlowlabError, ValueError):
    pass
