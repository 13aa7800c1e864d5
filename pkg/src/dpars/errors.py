"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/format problems exit 2,
runtime and numerical failures exit 1.
"""


class DparsError(Exception):
    """Base class for all package errors."""


class ConfigError(DparsError):
    """Invalid configuration, geometry, or command usage."""


class FilterSpecError(ConfigError):
    """Filter specification incompatible with the sampling rate."""


class DataFormatError(DparsError):
    """A file does not match its documented schema."""


class AlignmentError(DataFormatError):
    """Signal and label streams disagree in length beyond tolerance."""


class ProtocolError(DparsError):
    """Repetition labels outside the 1..6 split protocol."""


class NumericsError(DparsError):
    """A non-finite value appeared where the contract forbids it."""


class TapeError(DparsError):
    """Misuse of the autodiff tape (backward before forward, double backward)."""


class DivergenceError(NumericsError):
    """Training produced a non-finite loss; carries the offending epoch."""

    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch
