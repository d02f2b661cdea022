"""Exception types shared across the package."""


class PathdiffError(Exception):
    pass


class DimensionError(PathdiffError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(PathdiffError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(PathdiffError, ValueError):
    """Invalid configuration.  ``problems`` lists every issue found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class FormatError(PathdiffError, ValueError):
    """A serialized file is malformed, truncated or of the wrong version."""


class GenerationError(PathdiffError, ValueError):
    pass


class AllocationError(PathdiffError, ValueError):
    pass
