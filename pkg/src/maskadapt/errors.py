class BackendError(RuntimeError):
    """A pluggable backend (encoder, segmenter, pose model, denoiser) failed."""


class BackendUnavailable(BackendError):
    """A backend was requested but is not installed or configured."""


class ShapeError(ValueError):
    pass
