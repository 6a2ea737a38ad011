"""Exception hierarchy shared across the package.

Every domain-level failure raises a subclass of :class:`GmgpError`, so callers
(and the command-line front end) can distinguish modeling/validation problems
from ordinary IO errors.
"""


__all__ = [
    "GmgpError",
    "CycleDetected",
    "MultipleRoots",
    "UnreachableNode",
    "DanglingEdge",
    "DuplicateEdge",
    "UnknownNode",
    "DimensionMismatch",
    "SingularCorrelation",
    "RankDeficientTrend",
    "NotNested",
    "InTreeRequired",
    "SingularCovariance",
    "SingularConditioningBlock",
    "SizeNotMultiple",
    "SizeMonotonicityViolated",
    "BudgetTooSmall",
    "EmptyDesign",
    "EmptyInput",
    "NegativeVariance",
    "OutOfDomain",
]


class GmgpError(Exception):
    """Base class for all domain errors raised by this package."""


# ---------------------------------------------------------------------------
# DAG construction and queries
# ---------------------------------------------------------------------------

class CycleDetected(GmgpError):
    """The graph contains a directed cycle (self-loops included)."""


class MultipleRoots(GmgpError):
    """More than one node has out-degree zero, or root_id is not the sink."""


class UnreachableNode(GmgpError):
    """A node has no directed path to the root."""


class DanglingEdge(GmgpError):
    """An edge references a node id that does not exist."""


class DuplicateEdge(GmgpError):
    """The same directed edge is listed more than once."""


class UnknownNode(GmgpError):
    """A query referenced a node id that is not in the graph."""


# ---------------------------------------------------------------------------
# Kernels and GP regression
# ---------------------------------------------------------------------------

class DimensionMismatch(GmgpError):
    """Vector/matrix dimensions are inconsistent with the kernel or model."""


class SingularCorrelation(GmgpError):
    """Correlation matrix not positive definite after full nugget escalation."""


class RankDeficientTrend(GmgpError):
    """Trend/regression design matrix does not have full column rank."""


# ---------------------------------------------------------------------------
# Graphical model fitting and prediction
# ---------------------------------------------------------------------------

class NotNested(GmgpError):
    """A child design point is missing from a parent design set."""


class InTreeRequired(GmgpError):
    """Recursive fitting is only defined when the DAG is a directed in-tree."""


class SingularCovariance(GmgpError):
    """Joint prior covariance of all observations is not positive definite."""


class SingularConditioningBlock(GmgpError):
    """Conditional covariance requested with a singular conditioning set."""


# ---------------------------------------------------------------------------
# Experimental design
# ---------------------------------------------------------------------------

class SizeNotMultiple(GmgpError):
    """A node sample size is not a multiple of the root sample size."""


class SizeMonotonicityViolated(GmgpError):
    """Sample sizes decrease along an edge, or leave a node short of the
    slices already consumed by its descendants."""


class BudgetTooSmall(GmgpError):
    """Budget cannot afford a single run at every node."""


class EmptyDesign(GmgpError):
    """An operation that needs at least one design point received none."""


# ---------------------------------------------------------------------------
# Benchmarks and metrics
# ---------------------------------------------------------------------------

class EmptyInput(GmgpError):
    """A metric received zero-length inputs."""


class NegativeVariance(GmgpError):
    """A variance input contains negative entries."""


class OutOfDomain(GmgpError):
    """A test-function evaluation point lies outside the family domain."""
