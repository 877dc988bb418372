"""Deterministic laboratory for distributed logistic regression on separable data.

Three optimizers (local GD, two-stage local GD, local gradient flow), the
stepsize policies that drive them, and executable checks of the convergence
analysis, all bitwise reproducible at desk scale.
"""

__version__ = "0.1.0"

from . import data, diagnostics, losses, optim, schedules, specialfn  # noqa: F401
from .data import FederatedDataset, PartitionSpec, RawSample, SyntheticSpec  # noqa: F401
from .optim import RunConfig, RunResult, RoundTrace  # noqa: F401
