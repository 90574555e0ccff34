"""
Error types raised across the package

The CLI maps `ConfigError` to exit status 2 and any other `HrmTextError` to 1.
"""


class HrmTextError(Exception):
    """
    Base class for every domain failure
    """

    def __init__(self, reason_str: str):
        super().__init__(reason_str)


class ConfigError(HrmTextError):
    """
    Invalid configuration value; `field` names the offending key
    """

    def __init__(self, field: str, reason_str: str):
        super().__init__(f'{field}: {reason_str}')
        self.field = field


class DimensionError(HrmTextError):
    """
    Operand shapes do not agree
    """


class DegenerateRowError(HrmTextError):
    """
    A softmax row has no allowed position
    """


class NonFiniteError(HrmTextError):
    """
    NaN or Inf produced by an operation or found in a gradient
    """

    def __init__(self, source: str, reason_str: str = 'non-finite value'):
        super().__init__(f'{reason_str} in "{source}"')
        self.source = source


class ContractError(HrmTextError):
    """
    A caller broke a documented precondition
    """


class SequenceLengthError(HrmTextError):
    """
    Sequence longer than the configured context
    """


class EmptyResponseError(HrmTextError):
    """
    Loss requested over zero response positions
    """


class ValidationError(HrmTextError):
    """
    Malformed input record
    """


class PackingError(HrmTextError):
    """
    Example could not be packed; `record` describes the rejection
    """

    def __init__(self, reason_str: str, record: dict | None = None):
        super().__init__(reason_str)
        self.record = record or {}


class ContextOverflowError(HrmTextError):
    """
    Decoding would exceed the context cap
    """


class UndefinedSubsetError(HrmTextError):
    """
    Statistic requested over an empty subset
    """


class DecodeError(HrmTextError):
    """
    Error decoding a container packet
    """
