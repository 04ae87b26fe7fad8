"""
Error hierarchy shared by every app in the harness.

The management command maps these onto process exit codes, so raise the most
specific class available.
"""


class CordError(Exception):
    """Base class for harness errors"""


class ConfigError(CordError):
    """Invalid configuration value, unknown key or inconsistent model dims"""


class ShapeError(CordError):
    """Tensor shapes do not satisfy an op's contract"""


class NonFiniteError(CordError, ArithmeticError):
    """NaN or Inf produced by a forward op, a gradient or a loss"""


class NonDeterministicLossError(CordError):
    """A loss builder returned different values at the same point"""


class VocabularyError(CordError, ValueError):
    """Token id outside the alphabet it is meant to come from"""


class TaskError(CordError, ValueError):
    """Task generation parameters out of range or malformed token streams"""


class RolloutError(CordError, ValueError):
    """Invalid rollout request (temperature, group size)"""


class AnalysisError(CordError, ValueError):
    """Statistic undefined for the given records"""


class CheckpointError(CordError):
    """Checkpoint file is corrupt or does not match the model layout"""


class ArtifactIOError(CordError, OSError):
    """Reading or writing a run artifact failed"""

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")
