"""Exception types shared across the package."""


class PprkitError(Exception):
    """Base class for every error this package raises deliberately."""


class TagMismatchError(PprkitError, ValueError):
    """An image arrived in the wrong color space for an operation."""


class DimensionMismatchError(PprkitError, ValueError):
    """Paired images or masks do not share pixel dimensions."""


class FormatError(PprkitError, ValueError):
    """File contents do not match the declared or implied format."""


class ImageIOError(PprkitError, OSError):
    """Reading or writing an image file failed."""


class ManifestError(PprkitError, ValueError):
    """A dataset manifest failed validation; holds every problem found."""

    def __init__(self, problems):
        self.problems = tuple(problems)
        lines = "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(f"manifest validation failed:\n{lines}")


class TrainingDivergedError(PprkitError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, epoch: int, step: int, value: float):
        self.epoch = epoch
        self.step = step
        self.value = value
        super().__init__(
            f"loss became non-finite ({value}) at epoch {epoch}, step {step}"
        )
