"""Implicit symbolic regression: pre-trained set-to-sequence skeleton
decoding, constant fitting under a degeneracy-aware fitness, a GP baseline
and a solver-based evaluation metric."""

from .expr import (Const, Expr, MalformedPrefix, Op, Skeleton, SlotCountMismatch, Var, evaluate,
                   evaluate_batch, extract_skeleton, instantiate, parse_prefix, print_prefix,
                   used_dimensions)
from .fitness import ClfemConfig, FitnessResult, clfem_fitness, vanilla_fitness
from .metrics import EvalReport, MetricConfig, fitness_metric
from .numopt import BfgsConfig, bfgs_minimize, fit_constants

__version__ = "0.1.0"

__all__ = [
    "BfgsConfig", "ClfemConfig", "Const", "EvalReport", "Expr", "FitnessResult", "MalformedPrefix",
    "MetricConfig", "Op", "Skeleton", "SlotCountMismatch", "Var", "bfgs_minimize", "clfem_fitness",
    "evaluate", "evaluate_batch", "extract_skeleton", "fit_constants", "fitness_metric", "instantiate",
    "parse_prefix", "print_prefix", "used_dimensions", "vanilla_fitness",
]
