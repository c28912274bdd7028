from typing import Any, Optional, Sequence


class ReefDeployError(Exception):
    """Base class for every error raised by the decision engine."""


class ConfigError(ReefDeployError, ValueError):
    pass


class StorageError(ReefDeployError, OSError):
    pass


class ManifestError(ReefDeployError, ValueError):
    def __init__(self, message: str, line_no: Optional[int] = None, frame_id: Optional[str] = None):
        prefix = []
        if line_no is not None:
            prefix.append(f"line {line_no}")
        if frame_id is not None:
            prefix.append(f"frame {frame_id!r}")
        super().__init__(f"{', '.join(prefix)}: {message}" if prefix else message)
        self.line_no = line_no
        self.frame_id = frame_id


class NoLabelsError(ReefDeployError, ValueError):
    pass


class TilingError(ReefDeployError, ValueError):
    pass


class ClassificationError(ReefDeployError, LookupError):
    """The backend has no entry for a requested frame or patch."""


class DimensionMismatchError(ReefDeployError, ValueError):
    pass


class NonFiniteError(ReefDeployError, ArithmeticError):
    pass


class DecisionError(ReefDeployError, ValueError):
    def __init__(self, message: str, frame_id: Optional[str] = None):
        super().__init__(f"frame {frame_id!r}: {message}" if frame_id else message)
        self.frame_id = frame_id


class ZeroCountError(ReefDeployError, ValueError):
    pass


class InvalidProbabilityError(ReefDeployError, ValueError):
    pass


class ZeroProbabilityError(InvalidProbabilityError):
    pass


class DivergenceError(ReefDeployError, ArithmeticError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class CheckpointError(ReefDeployError, ValueError):
    pass


class CheckpointSchemaError(CheckpointError):
    pass


class CheckpointDimensionError(CheckpointError):
    pass


class ResponseParseError(ReefDeployError, ValueError):
    """A VLM reply could not be turned into a patch label."""

    reason = "unparseable response"


class NoParseableObjectError(ResponseParseError):
    reason = "no parseable object"


class ClassOutOfRangeError(ResponseParseError):
    reason = "class out of range"


class VlmTransportError(ReefDeployError):
    retryable = True

    def __init__(self, message: str, status: Optional[int] = None, retryable: Optional[bool] = None):
        super().__init__(message)
        self.status = status
        if retryable is not None:
            self.retryable = retryable


class VlmRateLimitError(VlmTransportError):
    def __init__(self, message: str, retry_after_s: Optional[float] = None):
        super().__init__(message, status=429)
        self.retry_after_s = retry_after_s


class VlmAuthError(VlmTransportError):
    retryable = False


class CredentialError(ReefDeployError):
    pass


class ZeroNormError(ReefDeployError, ValueError):
    pass


class AlignmentError(ReefDeployError, ValueError):
    pass


class GeoTrackError(ReefDeployError, ValueError):
    def __init__(self, message: str, frame_ids: Sequence[str] = ()):
        listed = f": {', '.join(frame_ids)}" if frame_ids else ""
        super().__init__(f"{message}{listed}")
        self.frame_ids = list(frame_ids)


class StreamAbortedError(ReefDeployError):
    def __init__(self, message: str, decisions: Sequence[Any], stats: Any):
        super().__init__(message)
        self.decisions = list(decisions)
        self.stats = stats
