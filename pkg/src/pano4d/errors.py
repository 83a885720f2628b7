"""Exception types shared across modules; the CLI maps them to exit codes."""


class ConfigError(ValueError):
    """Invalid or unknown configuration (exit code 2)."""


class FormatError(ValueError):
    """Malformed on-disk artifact: bad magic, truncation, missing file (exit 3)."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered; carries the failing step index (exit 4)."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class DataMismatchError(ValueError):
    """Prediction/ground-truth streams are misaligned (exit 5)."""
