"""Exception hierarchy shared by all uwbcal modules.

Each class carries an ``exit_code`` used by the command-line front end so
that distinct failure classes map to distinct process exit statuses.
"""


class UwbCalError(Exception):
    exit_code = 1


class IoError(UwbCalError, OSError):
    """Input file missing or unreadable, or output not writable."""

    exit_code = 16


class ConfigError(UwbCalError, ValueError):
    exit_code = 3


class FormatError(UwbCalError, ValueError):
    """Malformed dataset, delay or calibration file."""

    exit_code = 4


class VersionMismatch(FormatError):
    exit_code = 5


class DegenerateInterval(UwbCalError, ValueError):
    exit_code = 6


class NoPositiveRoot(UwbCalError, ArithmeticError):
    exit_code = 6


class SignalDropped(UwbCalError):
    """First-path power fell below the detection threshold."""

    exit_code = 7


class InsufficientTags(UwbCalError, ValueError):
    exit_code = 8


class MissingTruth(UwbCalError, ValueError):
    exit_code = 9


class RankDeficient(UwbCalError, ArithmeticError):
    exit_code = 10


class NonConvergence(UwbCalError, ArithmeticError):
    exit_code = 11


class EmptyDataset(UwbCalError, ValueError):
    exit_code = 12


class InsufficientData(UwbCalError, ValueError):
    exit_code = 13


class DegenerateDomain(InsufficientData):
    exit_code = 13


class DegenerateSigma(UwbCalError, ValueError):
    exit_code = 14


class SingularGeometry(UwbCalError, ArithmeticError):
    exit_code = 15
