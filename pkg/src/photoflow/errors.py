"""Exception hierarchy shared across the pipeline."""


class PhotoflowError(Exception):
    """Base class for all pipeline errors."""


# --- buffer ingestion ---

class MissingBuffer(PhotoflowError):
    """A named buffer file is absent (recoverable: caller may zero-fill)."""


class DimensionMismatch(PhotoflowError):
    """Buffers or images disagree on resolution."""


class DecodeError(PhotoflowError):
    """An image file exists but could not be decoded."""


# --- mask pipeline ---

class NoEntityFound(PhotoflowError):
    """The instruction contains no usable noun phrase; ask for a user mask."""


class MissingUserMask(PhotoflowError):
    """User mask mode selected but no mask supplied."""


class ZeroMask(PhotoflowError):
    """A mask with zero total weight where a non-empty one is required."""


# --- backends ---

class BackendUnavailable(PhotoflowError):
    """A backend could not be reached."""


class ShapeError(PhotoflowError):
    """A backend returned or received a tensor of the wrong shape."""


class NonFiniteOutput(PhotoflowError):
    """A backend returned NaN or Inf values."""


class ProtocolError(PhotoflowError):
    """Malformed request or response on the external adapter wire."""


class RemoteError(PhotoflowError):
    """The remote backend reported an application-level failure."""


class AdapterTimeout(PhotoflowError):
    """The external adapter timed out."""


# --- dataset forge ---

class ClientUnavailable(PhotoflowError):
    """The chat client could not be reached."""


class UnparseableResponse(PhotoflowError):
    """Chat response stayed malformed after one reprompt."""


class EmptyCritiques(PhotoflowError):
    """No critique carried any suggestion."""


class EmbedderUnavailable(PhotoflowError):
    """The embedding backend could not be reached."""


# --- trainer ---

class DivergenceDetected(PhotoflowError):
    """Training loss went NaN or grew 10x from its start."""


# --- metrics ---

class TooSmall(PhotoflowError):
    """Image smaller than the metric's window."""


class TooFewSamples(PhotoflowError):
    """Not enough feature vectors for an unbiased estimate."""


class NonPositiveInput(PhotoflowError):
    """Harmonic mean requires strictly positive inputs."""


# --- cli ---

class ConfigError(PhotoflowError):
    """Invalid or incomplete run configuration."""
