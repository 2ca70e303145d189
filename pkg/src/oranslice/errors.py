class ConstraintViolation(ValueError):
    """An allocation breaks the RB budget or single-ownership rule."""


class NumericalFailure(FloatingPointError):
    """A NaN or Inf showed up in parameters, losses or network outputs."""


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    """Backward called with a cache produced before the last parameter update."""
