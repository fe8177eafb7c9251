"""Exceptions raised by the finemask library."""


class FinemaskError(Exception):
    """Base class for all finemask errors."""


class ShapeError(FinemaskError, ValueError):
    """Operand shapes do not match."""


class NonFiniteError(FinemaskError, FloatingPointError):
    """A numeric operation produced NaN or Inf."""


class ConfigError(FinemaskError, ValueError):
    """Invalid configuration, schedule or option combination."""


class DivergenceError(FinemaskError):
    """Training loss became non-finite."""

    def __init__(self, step: int, last_loss: float | None) -> None:
        """Init."""
        super().__init__(
            f"Training diverged at step {step} (last finite loss: {last_loss})"
        )
        self.step = step
        self.last_loss = last_loss


class MetricError(FinemaskError, ValueError):
    """Invalid metric inputs."""


class TokenError(FinemaskError, ValueError):
    """Out-of-range token id or over-long sequence."""


class UndefinedStatisticError(FinemaskError):
    """A statistic is undefined for the given input."""


class ArtifactError(FinemaskError):
    """Base class for checkpoint and bundle errors."""


class ChecksumError(ArtifactError):
    """Stored CRC-32 does not match the file contents."""


class VersionError(ArtifactError):
    """Unsupported format version."""


class TruncationError(ArtifactError):
    """File ended before a complete record could be read."""


class FormatError(ArtifactError):
    """Bad magic or malformed record."""


class BindingError(ArtifactError):
    """Mask bundle refers to a different checkpoint."""
