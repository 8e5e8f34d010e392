"""Unified error types and response helpers.

Library code raises subclasses of `WgicpError`; each carries a stable
string `error_type`, a process `exit_code`, an optional `hint` and a
`context` dict. The CLI turns them into the error envelope:

    {"ok": false, "error": {"type": str, "message": str, "hint": Optional[str], "context": Optional[dict]}}
"""

import traceback
from typing import Any, Dict, Optional

from .consts import ExitCode

# Error type constants
EMPTY_CLOUD = "empty_cloud"
INVALID_CLOUD = "invalid_cloud"
INVALID_TRANSFORM = "invalid_transform"
NON_POSITIVE_VOXEL = "non_positive_voxel"
ANGLE_NEAR_PI = "angle_near_pi"
TRUNCATED_FILE = "truncated_file"
MALFORMED_LINE = "malformed_line"
NON_ROTATION = "non_rotation"
FILE_IO_ERROR = "file_io_error"
TOO_FEW_POINTS = "too_few_points"
SINGULAR_MATRIX = "singular_matrix"
DOMAIN_ERROR = "domain_error"
TAPE_MISMATCH = "tape_mismatch"
SINGULAR_NORMAL_EQUATIONS = "singular_normal_equations"
DIVERGED = "diverged"
SEQUENCE_TOO_SHORT = "sequence_too_short"
SHAPE_MISMATCH = "shape_mismatch"
INVALID_CONFIG = "invalid_config"
CHECK_FAILED = "check_failed"
INTERNAL_ERROR = "internal_error"


class WgicpError(Exception):
    """Base class for every error raised by the toolkit."""

    error_type: str = INTERNAL_ERROR
    exit_code: int = ExitCode.IO_ERROR

    def __init__(
        self,
        message: str,
        hint: Optional[str] = None,
        context: Optional[Dict[str, Any]] = None,
    ) -> None:
        super().__init__(message)
        self.message = message
        self.hint = hint
        self.context = context or {}


# -----------------------------------------------------------------------------
# Input / parse errors (exit 1)
# -----------------------------------------------------------------------------


class EmptyCloud(WgicpError):
    error_type = EMPTY_CLOUD


class InvalidCloud(WgicpError):
    error_type = INVALID_CLOUD


class InvalidTransform(WgicpError):
    error_type = INVALID_TRANSFORM


class NonPositiveVoxel(WgicpError):
    error_type = NON_POSITIVE_VOXEL


class TooFewPoints(WgicpError):
    error_type = TOO_FEW_POINTS


class FileIoError(WgicpError):
    error_type = FILE_IO_ERROR

    def __init__(self, path: str, reason: str) -> None:
        super().__init__(
            f"{path}: {reason}",
            hint="Check that the path exists and is readable",
            context={"path": str(path)},
        )
        self.path = str(path)


class TruncatedFile(WgicpError):
    error_type = TRUNCATED_FILE

    def __init__(self, path: str, byte_offset: int, record_size: int) -> None:
        super().__init__(
            f"{path}: truncated record at byte offset {byte_offset} "
            f"(file length is not a multiple of {record_size} bytes)",
            hint="Velodyne scans store 4 little-endian float32 values per point",
            context={"path": str(path), "byte_offset": byte_offset},
        )
        self.path = str(path)
        self.byte_offset = byte_offset


class MalformedLine(WgicpError):
    error_type = MALFORMED_LINE

    def __init__(self, path: str, line_index: int, reason: str) -> None:
        super().__init__(
            f"{path}: line {line_index + 1}: {reason}",
            context={"path": str(path), "line_index": line_index},
        )
        self.path = str(path)
        self.line_index = line_index


class NonRotation(WgicpError):
    error_type = NON_ROTATION

    def __init__(self, path: str, line_index: int, deviation: float) -> None:
        super().__init__(
            f"{path}: line {line_index + 1}: rotation block is not a rotation "
            f"(deviation {deviation:.3e})",
            context={"path": str(path), "line_index": line_index, "deviation": deviation},
        )
        self.path = str(path)
        self.line_index = line_index


class ShapeMismatch(WgicpError):
    error_type = SHAPE_MISMATCH


class InvalidConfig(WgicpError):
    error_type = INVALID_CONFIG


class SequenceTooShort(WgicpError):
    error_type = SEQUENCE_TOO_SHORT


# -----------------------------------------------------------------------------
# Numerical errors (exit 2)
# -----------------------------------------------------------------------------


class NumericalError(WgicpError):
    exit_code = ExitCode.DIVERGED


class AngleNearPi(NumericalError):
    error_type = ANGLE_NEAR_PI


class SingularMatrix(NumericalError):
    error_type = SINGULAR_MATRIX


class DomainError(NumericalError):
    error_type = DOMAIN_ERROR


class TapeMismatch(NumericalError):
    error_type = TAPE_MISMATCH


class SingularNormalEquations(NumericalError):
    error_type = SINGULAR_NORMAL_EQUATIONS


class Diverged(NumericalError):
    error_type = DIVERGED

    def __init__(self, message: str, step: int, context: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message, context={"step": step, **(context or {})})
        self.step = step


# -----------------------------------------------------------------------------
# Check failures (exit 3)
# -----------------------------------------------------------------------------


class CheckFailed(WgicpError):
    error_type = CHECK_FAILED
    exit_code = ExitCode.CHECK_FAILED


def make_error(
    error_type: str,
    message: str,
    hint: Optional[str] = None,
    context: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    return {
        "ok": False,
        "error": {
            "type": error_type,
            "message": message,
            "hint": hint,
            "context": context or {},
        },
    }


def exception_to_error(
    error_type: str, exc: Exception, hint: Optional[str] = None
) -> Dict[str, Any]:
    if isinstance(exc, WgicpError):
        return make_error(
            error_type=exc.error_type,
            message=exc.message,
            hint=exc.hint or hint,
            context=dict(exc.context),
        )
    return make_error(
        error_type=error_type,
        message=str(exc),
        hint=hint,
        context={"trace": traceback.format_exc(limit=3)},
    )


def exit_code_for(exc: Exception) -> int:
    """Process exit code for an exception escaping a command."""
    if isinstance(exc, WgicpError):
        return int(exc.exit_code)
    return int(ExitCode.IO_ERROR)
