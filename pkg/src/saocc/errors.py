"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition or usage contract was violated."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf value appeared where finite values are required."""


class DegenerateError(ValueError):
    """Geometry is degenerate (coincident points, empty surface, ...)."""


class ParseError(ValueError):
    """Malformed file content."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class VersionError(ValueError):
    """Checkpoint magic or version mismatch."""


class SchemaError(ValueError):
    """Checkpoint tensors do not match the expected parameter set."""
