"""Structured errors.

Every failure the pipeline reports on purpose is an ``OldnError`` with a stable
machine ``code`` and a human ``detail`` (plus optional context fields), so the
CLI and the experiment runner can log and tabulate them without string matching.
"""

from __future__ import annotations

from typing import Any, Dict


class OldnError(Exception):
    code = "oldn_error"

    def __init__(self, detail: str, *, code: str | None = None, **context: Any) -> None:
        super().__init__(detail)
        if code is not None:
            self.code = code
        self.detail = detail
        self.context: Dict[str, Any] = dict(context)

    def as_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"code": self.code, "detail": self.detail}
        for k, v in self.context.items():
            out[k] = v if isinstance(v, (int, float, str, bool)) or v is None else str(v)
        return out

    def __str__(self) -> str:
        return f"{self.code}: {self.detail}"


class ShapeError(OldnError, ValueError):
    code = "shape_mismatch"


class PrecisionError(OldnError, ValueError):
    code = "precision_mismatch"


class TapeError(OldnError):
    code = "tape"


class ConfigError(OldnError, ValueError):
    code = "config"


class TrainingError(OldnError, ValueError):
    code = "training"


class MetricError(OldnError, ValueError):
    code = "metric"


class CheckpointError(OldnError, ValueError):
    code = "checkpoint"


class ImageFormatError(OldnError, ValueError):
    code = "image_format"


class UnsupportedFormatError(ImageFormatError):
    code = "unsupported_format"


class CodecError(OldnError, ValueError):
    code = "codec"


class StreamMagicError(CodecError):
    code = "stream_magic"


class StreamVersionError(CodecError):
    code = "stream_version"


class StreamTruncatedError(CodecError):
    code = "stream_truncated"


class CodeTableError(CodecError):
    code = "code_table"


class SymbolCountError(CodecError):
    code = "symbol_count"
