"""Exception hierarchy.

Validation-type errors (bad shapes, bad configs, bad parameters) map to CLI
exit code 1; runtime failures (I/O, non-finite numerics) map to exit code 2.
"""


class Attn3dError(Exception):
    exit_code = 2


class ShapeError(Attn3dError, ValueError):
    exit_code = 1


class ParameterError(Attn3dError, ValueError):
    exit_code = 1


class RangeError(ParameterError):
    pass


class LabelError(Attn3dError, ValueError):
    exit_code = 1


class ConfigError(Attn3dError, ValueError):
    exit_code = 1


class DataError(Attn3dError, ValueError):
    exit_code = 1


class ClipIOError(Attn3dError, OSError):
    exit_code = 2


class NumericError(Attn3dError, ArithmeticError):
    exit_code = 2
