"""Solver-based scoring of a predicted implicit equation against the truth.

Points are sampled on the predicted zero set, the true equation is
evaluated there, and the mean square is normalized by the ambient mean
square of the true equation under a standard normal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .expr import D_MAX, Const, Expr, Op, evaluate_batch, used_dimensions
from .numopt import BfgsConfig, batched_fd_gradient, bfgs_minimize

DEFAULT_TAUS = (0.5, 0.7, 0.8, 0.9, 0.99)


class DegenerateTruth(ValueError):
    pass


@dataclass(frozen=True)
class MetricConfig:
    M: int = 200
    norm_samples: int = 10
    solver_tol: float = 1e-6
    taus: tuple[float, ...] = DEFAULT_TAUS
    rng_seed: int | None = None
    bfgs: BfgsConfig = BfgsConfig(max_iters=100)

    def __post_init__(self):
        if self.M < 1 or self.norm_samples < 1:
            raise ValueError("M and norm_samples must be >= 1")


@dataclass
class EvalReport:
    mse: float
    nmse: float
    fitness: float
    acc: dict[float, int] = field(default_factory=dict)
    accepted_points: int = 0

    def to_dict(self) -> dict:
        return {
            "mse": self.mse,
            "nmse": self.nmse,
            "fitness": self.fitness,
            "acc": {str(t): v for t, v in self.acc.items()},
            "accepted_points": self.accepted_points,
        }


def strip_scale(e: Expr) -> Expr:
    """Drop constant multiplicative factors wrapped around ``e``.

    The metric is invariant to rescaling the true equation; removing the
    factor structurally makes that invariance exact in floating point.
    """
    while isinstance(e, Op):
        a = e.args[0]
        b = e.args[1] if len(e.args) > 1 else None
        if e.name == "mul" and isinstance(a, Const) and a.value != 0:
            e = b
        elif e.name == "mul" and isinstance(b, Const) and b.value != 0:
            e = a
        elif e.name == "div" and isinstance(b, Const) and b.value != 0:
            e = a
        else:
            break
    return e


def _embed(z: np.ndarray, dims: list[int]) -> np.ndarray:
    X = np.zeros(z.shape[:-1] + (D_MAX,))
    X[..., [d - 1 for d in dims]] = z
    return X


def sample_solutions(f_hat: Expr, M: int, rng: np.random.Generator, dims: list[int] | None = None,
                     cfg: MetricConfig = MetricConfig()) -> np.ndarray:
    """Points with |f_hat(x)| <= solver_tol, found by minimizing f_hat(x)^2
    from M standard-normal starts over ``dims`` (other coordinates stay 0).

    Returns an ``(accepted, D_MAX)`` array, possibly empty.
    """
    dims = sorted(dims if dims is not None else used_dimensions(f_hat))
    if not dims:
        raise ValueError("no dimensions to sample over")
    starts = rng.standard_normal((M, len(dims)))

    def batch(Z):
        v = evaluate_batch(f_hat, _embed(np.atleast_2d(Z), dims))
        with np.errstate(over="ignore"):
            return v * v

    single = lambda z: float(batch(z[None, :])[0])  # noqa: E731
    gradient = batched_fd_gradient(batch, cfg.bfgs.fd_step)

    accepted = []
    for z0 in starts:
        if not math.isfinite(single(z0)):
            continue
        opt = bfgs_minimize(single, z0, cfg.bfgs, gradient=gradient)
        x = _embed(opt.x_star, dims)
        value = evaluate_batch(f_hat, x[None, :])[0]
        if math.isfinite(value) and abs(value) <= cfg.solver_tol:
            accepted.append(x)
    if not accepted:
        return np.zeros((0, D_MAX))
    return np.stack(accepted)


def _normalizer(f_true: Expr, dims: list[int], count: int, rng: np.random.Generator) -> float:
    # draws where f_true is undefined are redrawn, capped at 100x the target
    values: list[float] = []
    for _ in range(100):
        v = evaluate_batch(f_true, _embed(rng.standard_normal((count, len(dims))), dims))
        values.extend(v[np.isfinite(v)].tolist())
        if len(values) >= count:
            break
    if not values:
        raise DegenerateTruth("true equation is undefined on every normalization draw")
    vals = np.asarray(values[:count])
    return float(np.mean(vals * vals))


def fitness_metric(f_hat: Expr, f_true: Expr, cfg: MetricConfig = MetricConfig(),
                   rng: np.random.Generator | None = None) -> EvalReport:
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    solve_rng, norm_rng = rng.spawn(2)
    core = strip_scale(f_true)
    dims = sorted(used_dimensions(core))
    if not dims:
        raise DegenerateTruth("true equation has no variables")

    denom = _normalizer(core, dims, cfg.norm_samples, norm_rng)
    if denom < 1e-12:
        raise DegenerateTruth(f"normalization term {denom:.3g} is ~0")

    points = sample_solutions(f_hat, cfg.M, solve_rng, dims, cfg)
    # MSE is reported on f_true as given; NMSE uses the scale-free core so
    # that rescaling the truth cancels exactly
    values = evaluate_batch(core, points) if len(points) else np.zeros(0)
    raw = evaluate_batch(f_true, points) if len(points) else np.zeros(0)
    ok = np.isfinite(values) & np.isfinite(raw)
    values, raw = values[ok], raw[ok]
    if len(values) == 0:
        mse, nmse, fit = math.inf, math.inf, 0.0
    else:
        mse = float(np.mean(raw * raw))
        nmse = float(np.mean(values * values)) / denom
        fit = 1.0 / (1.0 + math.sqrt(nmse))
    acc = {t: int(fit >= t) for t in cfg.taus}
    return EvalReport(mse, nmse, fit, acc, int(len(values)))
