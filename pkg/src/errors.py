"""
Error taxonomy. Every error carries a stable machine-readable `code`; the CLI
prints it as the `error=<code>` prefix of its single-line failure output.
"""

from typing import Any, Dict, Optional


class SphereDsbError(Exception):
    code = "error"

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.details: Dict[str, Any] = details

    def payload(self) -> Dict[str, Any]:
        return {"error": self.code, "message": str(self), **self.details}


# geometry
class AntipodalPoints(SphereDsbError):
    code = "antipodal_points"


# simulation
class OutOfHorizon(SphereDsbError):
    code = "out_of_horizon"


class EmptyDataset(SphereDsbError):
    code = "empty_dataset"


class NonFiniteState(SphereDsbError):
    code = "non_finite_state"


# networks
class StaleTape(SphereDsbError):
    code = "stale_tape"


class NonFiniteGradient(SphereDsbError):
    code = "non_finite_gradient"

    def with_context(self, n: int, phase: str, step: int) -> "NonFiniteGradient":
        err = NonFiniteGradient(f"{self} (ipf n={n}, phase={phase}, step={step})", **self.details)
        err.details.update({"n": n, "phase": phase, "step": step})
        return err


class FormatMismatch(SphereDsbError):
    code = "format_mismatch"


class CorruptFile(SphereDsbError):
    code = "corrupt_file"


class ShapeMismatch(SphereDsbError):
    code = "shape_mismatch"


class DivergenceModeUnsupported(SphereDsbError):
    code = "divergence_mode_unsupported"


# data
class MissingColumns(SphereDsbError):
    code = "missing_columns"


class EmptyAfterFiltering(SphereDsbError):
    code = "empty_after_filtering"


class BoundViolation(SphereDsbError):
    code = "bound_violation"


class BadWeights(SphereDsbError):
    code = "bad_weights"


class InvalidHarmonic(SphereDsbError):
    code = "invalid_harmonic"


class InvalidSyntheticSpec(SphereDsbError, ValueError):
    code = "invalid_synthetic_spec"


class SampleExportError(SphereDsbError):
    code = "io_error"


class UnsupportedPrior(SphereDsbError):
    code = "unsupported_prior"


# cli
class MissingCheckpoint(SphereDsbError):
    code = "missing_checkpoint"


class ConfigError(SphereDsbError):
    code = "config_error"

    def __init__(self, problems: "list[str]") -> None:
        super().__init__("; ".join(problems), problems=list(problems))


def error_code(exc: BaseException, default: Optional[str] = None) -> str:
    if isinstance(exc, SphereDsbError):
        return exc.code
    return default or "internal_error"
