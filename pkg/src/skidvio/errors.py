"""Typed error categories shared across the package."""


class SkidvioError(Exception):
    category = "error"


class DegenerateParamsError(SkidvioError, ValueError):
    category = "degenerate-params"


class InsufficientExcitationError(SkidvioError, ValueError):
    category = "insufficient-excitation"


class MeasurementGapError(SkidvioError, ValueError):
    category = "measurement-gap"


class TooFewSamplesError(SkidvioError, ValueError):
    category = "too-few-samples"


class ManifoldGradientError(SkidvioError, ValueError):
    category = "manifold-gradient-blowup"


class NegativeDepthError(SkidvioError, ValueError):
    category = "negative-depth"


class SolverDivergedError(SkidvioError, RuntimeError):
    category = "solver-diverged"

    def __init__(self, message, last_good_keyframe=None):
        super().__init__(message)
        self.last_good_keyframe = last_good_keyframe


class ConfigError(SkidvioError, ValueError):
    category = "config-parse"


class StreamMissingError(SkidvioError, ValueError):
    category = "stream-missing"


class VariantMismatchError(SkidvioError, ValueError):
    category = "variant-mismatch"


class SingularBlockWarning(UserWarning):
    """Raised as a warning when a marginalized block needs the eigenvalue floor."""
