"""Exception hierarchy shared by all splitlab modules."""


class SplitlabError(Exception):
    """Base class for every error raised by splitlab."""


class DimensionError(SplitlabError, ValueError):
    """Measures, functions and kernels do not chain together."""


class InconsistentSpecError(SplitlabError, ValueError):
    """A chain specification violates one of its structural invariants."""


class DegenerateChainError(SplitlabError, ValueError):
    """A level has zero mass or zero success probability where a ratio is needed."""


class InfeasibleError(SplitlabError, ValueError):
    """The request cannot be satisfied (budget too small, no admissible parameter...)."""


class InadmissibleKError(InfeasibleError):
    """The threshold scaling K makes a perturbed kernel super-stochastic."""


class StepBudgetExceeded(SplitlabError, RuntimeError):
    """An Euler path neither hit the boundary nor got killed within its step budget."""

    def __init__(self, steps, position):
        super().__init__(f"step budget of {steps} exhausted at position {tuple(position)}")
        self.steps = steps
        self.position = position


class ConfigError(SplitlabError, ValueError):
    """Malformed configuration document; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class QuadratureError(SplitlabError, ArithmeticError):
    """A series or quadrature failed to reach its tolerance."""
