from typing import Any, Dict, Optional

RECOVERABLE = "RECOVERABLE"
FATAL = "FATAL"


class IrisSwapError(Exception):
    """
    Root of every error raised by the toolkit.

    code is the machine-readable name printed by the CLI, type tells the
    attack runners whether a frame can be skipped (RECOVERABLE) or the run
    must stop (FATAL).
    """

    code = "IRISSWAP_ERROR"
    type = FATAL

    def __init__(self, message: str = "", context: Optional[Dict[str, Any]] = None):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.context = dict(context or {})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "status": "error",
            "error": {
                "code": self.code,
                "type": self.type,
                "message": self.message,
                "context": self.context,
            },
        }


class RecoverableError(IrisSwapError):
    type = RECOVERABLE


# ---------- imaging ----------

class MalformedHeader(RecoverableError):
    code = "MALFORMED_HEADER"


class UnsupportedMaxval(RecoverableError):
    code = "UNSUPPORTED_MAXVAL"


class TruncatedPayload(RecoverableError):
    code = "TRUNCATED_PAYLOAD"


class IoFailure(IrisSwapError):
    code = "IO_FAILURE"


class OutOfBounds(RecoverableError):
    code = "OUT_OF_BOUNDS"


class DegenerateFrame(RecoverableError):
    code = "DEGENERATE_FRAME"


# ---------- segmentation ----------

class NoPupilFound(RecoverableError):
    code = "NO_PUPIL_FOUND"


class NoLimbusFound(RecoverableError):
    code = "NO_LIMBUS_FOUND"


class DimensionMismatch(IrisSwapError):
    code = "DIMENSION_MISMATCH"


# ---------- rubbersheet ----------

class InvalidGeometry(RecoverableError):
    code = "INVALID_GEOMETRY"


class DegenerateTexture(IrisSwapError):
    code = "DEGENERATE_TEXTURE"


# ---------- iriscode ----------

class TextureTooSmall(IrisSwapError):
    code = "TEXTURE_TOO_SMALL"


class GeometryMismatch(IrisSwapError):
    code = "GEOMETRY_MISMATCH"


class InsufficientMask(RecoverableError):
    code = "INSUFFICIENT_MASK"


# ---------- gaze ----------

class DegenerateDesign(IrisSwapError):
    code = "DEGENERATE_DESIGN"


class TooFewPoints(IrisSwapError):
    code = "TOO_FEW_POINTS"


class NoValidationSamples(IrisSwapError):
    code = "NO_VALIDATION_SAMPLES"


# ---------- synth ----------

class GazeOutOfFrame(IrisSwapError):
    code = "GAZE_OUT_OF_FRAME"


# ---------- liveness ----------

class TooFewSamples(IrisSwapError):
    code = "TOO_FEW_SAMPLES"


class NonMonotonicTime(IrisSwapError):
    code = "NON_MONOTONIC_TIME"


class AllSamplesCapped(IrisSwapError):
    code = "ALL_SAMPLES_CAPPED"


class SignalTooShort(IrisSwapError):
    code = "SIGNAL_TOO_SHORT"


class NonFiniteInput(IrisSwapError):
    code = "NON_FINITE_INPUT"


class SingleClassPartition(IrisSwapError):
    code = "SINGLE_CLASS_PARTITION"


class DivergedLoss(IrisSwapError):
    code = "DIVERGED_LOSS"


class NoWindows(IrisSwapError):
    code = "NO_WINDOWS"


class NoSpoofedSamples(IrisSwapError):
    code = "NO_SPOOFED_SAMPLES"


# ---------- harness ----------

class TooFewSubjects(IrisSwapError):
    code = "TOO_FEW_SUBJECTS"


class ConfigError(IrisSwapError):
    code = "CONFIG_ERROR"


class UnknownSubcommand(IrisSwapError):
    code = "UNKNOWN_SUBCOMMAND"


class ExperimentError(IrisSwapError):
    code = "EXPERIMENT_FAILED"
