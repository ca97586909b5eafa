"""Hierarchical configuration search for structured sparse/dense spaces."""

from .space import ConfigSpace, Configuration, load_space, builtin_space
from .orchestrator import RunConfig, RunResult, run
from .evaluator import INFEASIBLE

__version__ = "0.1.0"

__all__ = [
    "ConfigSpace", "Configuration", "load_space", "builtin_space",
    "RunConfig", "RunResult", "run", "INFEASIBLE", "__version__",
]
