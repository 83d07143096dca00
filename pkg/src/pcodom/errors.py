"""Exception and warning types shared across the package.

Every error carries an ``exit_code`` so the command line front end can map
failures onto its fixed exit-code table without inspecting messages:

    0 ok, 2 I/O, 3 format, 4 numeric, 5 compatibility
"""

from __future__ import annotations


class PcoError(Exception):
    exit_code = 1


class IoFailure(PcoError, OSError):
    exit_code = 2


class FormatError(PcoError, ValueError):
    exit_code = 3


class NumericError(PcoError, ArithmeticError):
    exit_code = 4


class CompatibilityError(PcoError):
    exit_code = 5


# pose_core
class NonUnitQuaternion(FormatError):
    pass


class GimbalLockWarning(RuntimeWarning):
    """Middle Euler angle is at +-pi/2; the third angle was forced to 0."""


# encoding
class EmptyCloud(FormatError):
    pass


class ConfigMismatch(CompatibilityError):
    pass


# kitti_io
class TruncatedFile(FormatError):
    pass


class MalformedLine(FormatError):
    def __init__(self, path, line_number: int, reason: str):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {reason}")


class LengthMismatch(FormatError):
    pass


class NonFiniteValueWarning(RuntimeWarning):
    pass


class EmptyScanWarning(UserWarning):
    pass


# network
class ShapeMismatch(FormatError):
    pass


class GraphNotBuilt(PcoError, RuntimeError):
    pass


class ConfigError(FormatError):
    pass


class DigestMismatch(CompatibilityError):
    pass


# trainer
class NonFiniteLoss(NumericError):
    def __init__(self, message: str, dump_path=None):
        self.dump_path = dump_path
        super().__init__(message if dump_path is None else f"{message} (batch dumped to {dump_path})")


# eval
class EmptyInput(FormatError):
    pass


# synthetic
class DegenerateScene(PcoError, ValueError):
    exit_code = 3
