"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all engine errors."""


class ShapeError(EngineError):
    """Tensor shapes violate an operation's contract."""


class SizeError(EngineError):
    """Requested tensor exceeds the supported element count."""


class ConfigError(EngineError):
    """Model configuration is inconsistent."""


class DeterminismError(EngineError):
    """A function expected to be deterministic produced differing outputs."""


class TrainingError(EngineError):
    """Training diverged; carries the offending step index."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class VerificationError(EngineError):
    """Analytic and instrumented cost accounting disagree."""

    def __init__(self, message: str, layer: str):
        super().__init__(message)
        self.layer = layer


class WeightFormatError(EngineError):
    """Base class for weight-file load failures."""


class BadMagicError(WeightFormatError):
    """File does not start with the weight-format magic bytes."""


class VersionError(WeightFormatError):
    """Weight file uses an unsupported format version."""


class TruncatedError(WeightFormatError):
    """Weight file ends before the manifest or a blob is complete."""


class ManifestError(WeightFormatError):
    """Weight-file manifest is malformed or disagrees with its blobs."""


class ImageFormatError(EngineError):
    """Image file or buffer violates the supported format."""


class UnsupportedDepthError(ImageFormatError):
    """Image uses a bit depth other than 8 bits per sample."""
