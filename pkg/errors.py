"""
Error types raised across the mechanism design pipeline

Every error carries the process exit code the CLI returns for it.
"""


class PipelineError(Exception):
    """Base class for all pipeline failures"""
    exit_code: int = 1


class ConfigError(PipelineError, ValueError):
    """Invalid or unparsable configuration"""
    exit_code = 2


class DataError(PipelineError, ValueError):
    """Input data is missing, malformed or insufficient"""
    exit_code = 3


class NumericalError(PipelineError, ArithmeticError):
    """A computation could not produce a meaningful result"""
    exit_code = 4


# ==================== GEOMETRY ====================

class ClosureInfeasible(NumericalError):
    """The four-bar loop cannot close at the requested pose"""


class DegeneratePose(NumericalError):
    """Coupler diagonal collapsed to zero length"""


class EmptyWorkspace(NumericalError):
    """No pose of the operating range is reachable"""


class Uncoverable(NumericalError):
    """No scale in the search bracket lets the workspace contain the task"""


class NonPositiveArea(DataError):
    pass


class EmptyInput(DataError):
    pass


# ==================== SAMPLING / TRAINING ====================

class InvalidBounds(ConfigError):
    pass


class TooFewRows(DataError):
    pass


class MissingColumns(DataError):
    pass


class NonFiniteLoss(NumericalError):
    """Training diverged"""


# ==================== DYNAMICS ====================

class SingularPose(NumericalError):
    """Jacobian is too ill-conditioned to be trusted"""


# ==================== OPTIMIZATION / MINING ====================

class NoFeasibleIndividual(NumericalError):
    pass


class InsufficientHistory(DataError):
    pass


class IncompleteManifest(DataError):
    """A stage input is missing from the run manifest or fails its hash check"""
