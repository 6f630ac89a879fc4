"""Exception hierarchy for the toolkit.

Every error raised on purpose derives from ToolkitError so the CLI can map
them to exit code 1 with a one-line diagnostic.
"""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class LogParseError(ToolkitError):
    """Malformed trace log line. Carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class CatalogError(ToolkitError):
    """Invalid signal catalog or catalog lookup failure."""


class CodecError(ToolkitError):
    """Bit-field extraction/patching misuse (id mismatch, field overflow)."""


class ConfigError(ToolkitError):
    """Invalid configuration (trace generator, simulator, pipeline)."""


class InjectionInfeasibleError(ToolkitError):
    """The 3-sigma exclusion band covers the whole usable signal range."""

    def __init__(self, signal: str, message: str):
        super().__init__(f"{signal}: {message}")
        self.signal = signal


class PlanError(ToolkitError):
    """Attack plan cannot be constructed or is inconsistent."""


class FeatureAssemblyError(ToolkitError):
    """Feature matrix assembly failed (signal never observed, empty input)."""


class UndefinedCorrelationError(ToolkitError):
    """Pearson correlation undefined (zero-variance series)."""


class TrainingError(ToolkitError):
    """Training diverged. Carries the epoch at which loss became non-finite."""

    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


class CheckpointError(ToolkitError):
    """Checkpoint could not be read."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version not understood."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint payload truncated or inconsistent with its header."""


class DimensionError(CheckpointError):
    """Checkpoint dimensions do not match what the caller expects."""


class SimError(ToolkitError):
    """Network simulation misconfiguration."""


class PipelineError(ToolkitError):
    """A pipeline stage failed. Carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage


class EvalError(ToolkitError):
    """Evaluation input invalid (length mismatch, non-binary labels)."""
