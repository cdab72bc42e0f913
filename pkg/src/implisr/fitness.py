"""Residual fitness for implicit equations, with and without the
per-dimension degeneracy gate (CL-FEM)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .expr import D_MAX, Expr, evaluate_batch

NOT_FINITE_PENALTY = 1e9
NEG_INF = -math.inf


@dataclass(frozen=True)
class ClfemConfig:
    tau: float = 1e-4
    L: float = -1.0
    U: float = 1.0
    norm_ell: int = 1
    rng_seed: int | None = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.L < self.U:
            raise ValueError("need L < U")
        if self.norm_ell not in (1, 2):
            raise ValueError("norm_ell must be 1 or 2")


@dataclass
class FitnessResult:
    value: float
    d: dict[int, float] = field(default_factory=dict)
    degenerate_dims: set[int] = field(default_factory=set)

    @property
    def is_degenerate(self) -> bool:
        return bool(self.degenerate_dims)


def data_dims(data: np.ndarray) -> list[int]:
    """1-based indices of non-padding (not identically zero) columns."""
    data = np.asarray(data)
    return [j + 1 for j in range(data.shape[1]) if np.any(data[:, j] != 0)]


def residual_terms(values: np.ndarray, ell: int) -> np.ndarray:
    """Per-point |f|^ell with the fixed penalty for non-finite evaluations."""
    with np.errstate(over="ignore"):
        terms = np.abs(values) ** ell
    return np.where(np.isfinite(terms), terms, NOT_FINITE_PENALTY)


def vanilla_fitness(f: Expr, data: np.ndarray, ell: int = 1) -> float:
    values = evaluate_batch(f, data)
    with np.errstate(over="ignore"):
        return -float(np.mean(residual_terms(values, ell)))


def draw_uniform(shape, cfg: ClfemConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(cfg.L, cfg.U, size=shape)


def make_stochastic_dataset(data: np.ndarray, j: int, cfg: ClfemConfig,
                            rng: np.random.Generator | None = None,
                            noise: np.ndarray | None = None) -> np.ndarray:
    """Copy of ``data`` whose column ``j`` (1-based) is resampled in (L, U).

    ``noise`` pins the replacement values: a full ``(N, D)`` uniform draw
    from which column ``j`` is taken.
    """
    data = np.asarray(data, dtype=np.float64)
    out = data.copy()
    if noise is None:
        if rng is None:
            rng = np.random.default_rng(cfg.rng_seed)
        out[:, j - 1] = draw_uniform(len(data), cfg, rng)
    else:
        out[:, j - 1] = noise[:, j - 1]
    return out


def clfem_fitness(f: Expr, data: np.ndarray, cfg: ClfemConfig = ClfemConfig(),
                  rng: np.random.Generator | None = None,
                  noise: np.ndarray | None = None,
                  dims: list[int] | None = None) -> FitnessResult:
    """CL-FEM fitness of ``f`` on ``data``.

    One stochastic dataset per checked dimension; ``d_j`` is the mean squared
    change of f when column j is resampled. Checked dimensions default to the
    non-padding columns of ``data``. Points where either evaluation is not
    finite are left out of ``d_j``; if none remain, the dimension counts as
    degenerate.
    """
    data = np.asarray(data, dtype=np.float64)
    n, width = data.shape
    if dims is None:
        dims = data_dims(data)
    if noise is None:
        if rng is None:
            rng = np.random.default_rng(cfg.rng_seed)
        noise = draw_uniform((n, width), cfg, rng)

    # one evaluation over the real data stacked with every perturbed copy
    stacked = [data]
    for j in dims:
        stacked.append(make_stochastic_dataset(data, j, cfg, noise=noise))
    values = evaluate_batch(f, np.concatenate(stacked, axis=0)).reshape(len(stacked), n)
    base = values[0]

    d: dict[int, float] = {}
    degenerate: set[int] = set()
    for k, j in enumerate(dims, start=1):
        ok = np.isfinite(base) & np.isfinite(values[k])
        if not ok.any():
            d[j] = math.nan
            degenerate.add(j)
            continue
        with np.errstate(over="ignore"):
            d[j] = float(np.mean((base[ok] - values[k][ok]) ** 2))
        if not d[j] > cfg.tau:
            degenerate.add(j)

    if not dims:
        # nothing to perturb means nothing certifies the candidate
        degenerate = set(range(1, D_MAX + 1))

    if np.mean(~np.isfinite(base)) > 0.5:
        # undefined on most of the data: no dimension can be certified
        degenerate |= set(dims) or {1}

    if degenerate:
        return FitnessResult(NEG_INF, d, degenerate)
    with np.errstate(over="ignore"):
        return FitnessResult(-float(np.mean(residual_terms(base, cfg.norm_ell))), d, set())
