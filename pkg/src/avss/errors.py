"""Exception types shared across the package."""


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes or channel counts."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (e.g. backward on a non-scalar)."""


class DegenerateBatch(ValueError):
    """Batch statistics requested on a batch too small to define them."""


class MissingGradient(RuntimeError):
    """An optimizer step found a parameter without a populated gradient."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class InputTooShort(ValueError):
    """A signal is shorter than the transform or metric requires."""


class DivergedError(RuntimeError):
    """Training hit a non-finite loss."""

    def __init__(self, iteration, value):
        super().__init__(f"non-finite loss ({value}) at iteration {iteration}")
        self.iteration = iteration


class DatasetError(ValueError):
    """Dataset missing, empty, or malformed."""
