"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: usage/config problems exit 1,
data and integrity problems exit 2, numerical divergence exits 3.
"""


class TagformerError(Exception):
    exit_code = 2


class UsageError(TagformerError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class ParameterError(TagformerError, ValueError):
    exit_code = 1


class ShapeError(TagformerError, ValueError):
    pass


class LengthError(ShapeError):
    pass


class FormatError(TagformerError):
    pass


class EmptyInputError(TagformerError, ValueError):
    pass


class TooShortError(TagformerError, ValueError):
    pass


class DataError(TagformerError):
    pass


class ParseError(DataError):
    pass


class IntegrityError(DataError):
    pass


class SplitError(DataError):
    pass


class UndefinedMetricError(TagformerError, ValueError):
    pass


class DivergenceError(TagformerError):
    exit_code = 3

    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value
