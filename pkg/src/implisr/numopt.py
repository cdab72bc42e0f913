"""BFGS with finite-difference gradients and a strong-Wolfe line search,
plus multi-restart constant fitting for skeletons."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .expr import Skeleton, evaluate_batch, instantiate
from .fitness import (NEG_INF, NOT_FINITE_PENALTY, ClfemConfig, FitnessResult,
                      clfem_fitness, draw_uniform, vanilla_fitness)


class NonFiniteObjective(ValueError):
    pass


class AllRestartsDegenerate(RuntimeError):
    pass


@dataclass(frozen=True)
class BfgsConfig:
    max_iters: int = 200
    grad_tol: float = 1e-8
    fd_step: float = 1e-6
    c1: float = 1e-4
    c2: float = 0.9
    restarts: int = 4
    max_ls_iters: int = 30

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")


@dataclass
class OptResult:
    x_star: np.ndarray
    f_star: float
    iters: int
    converged: bool
    history: list[float] | None = None


def _safe(value: float) -> float:
    return value if math.isfinite(value) else math.inf


def fd_gradient(objective: Callable[[np.ndarray], float], x: np.ndarray, step: float) -> np.ndarray:
    """Central differences; falls back to one-sided where a side is not finite."""
    g = np.zeros_like(x)
    for i in range(len(x)):
        h = step * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        fp, fm = _safe(objective(x + e)), _safe(objective(x - e))
        f0 = 0.0 if math.isfinite(fp) and math.isfinite(fm) else _safe(objective(x))
        g[i] = _combine_fd(fp, fm, f0, h)
    return g


def _combine_fd(fp: float, fm: float, f0: float, h: float) -> float:
    if math.isfinite(fp) and math.isfinite(fm):
        return (fp - fm) / (2 * h)
    if math.isfinite(fp) and math.isfinite(f0):
        return (fp - f0) / h
    if math.isfinite(fm) and math.isfinite(f0):
        return (f0 - fm) / h
    return 0.0


def batched_fd_gradient(batch_objective: Callable[[np.ndarray], np.ndarray], step: float):
    """Build a gradient function from an objective that scores many rows at once.

    ``batch_objective`` maps a ``(B, n)`` array of parameter vectors to ``B``
    objective values; all 2n+1 stencil points go through one call.
    """

    def grad(x: np.ndarray) -> np.ndarray:
        n = len(x)
        h = step * np.maximum(1.0, np.abs(x))
        stencil = np.repeat(x[None, :], 2 * n + 1, axis=0)
        idx = np.arange(n)
        stencil[idx, idx] += h
        stencil[n + idx, idx] -= h
        vals = np.asarray(batch_objective(stencil), dtype=np.float64)
        vals = np.where(np.isfinite(vals), vals, math.inf)
        fp, fm, f0 = vals[:n], vals[n:2 * n], vals[-1]
        return np.array([_combine_fd(fp[i], fm[i], f0, h[i]) for i in range(n)])

    return grad


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolating (a, fa, ga) and (b, fb, gb), or None."""
    if a == b:
        return None
    d1 = ga + gb - 3 * (fa - fb) / (a - b)
    rad = d1 * d1 - ga * gb
    if rad < 0:
        return None
    d2 = math.copysign(math.sqrt(rad), b - a)
    denom = gb - ga + 2 * d2
    if denom == 0 or not math.isfinite(denom):
        return None
    out = b - (b - a) * (gb + d2 - d1) / denom
    return out if math.isfinite(out) else None


def wolfe_line_search(phi, dphi, phi0: float, dphi0: float, c1: float, c2: float,
                      alpha_init: float = 1.0, max_iters: int = 30, alpha_max: float = 1e10):
    """Strong-Wolfe line search (bracketing + zoom).

    Returns ``(alpha, phi(alpha))`` or ``None``. When no strong-Wolfe point is
    found, the best step satisfying sufficient decrease is returned instead.
    """
    best = None  # best Armijo-satisfying step seen, as fallback

    def armijo(a, fa):
        return fa <= phi0 + c1 * a * dphi0

    def note(a, fa):
        nonlocal best
        if math.isfinite(fa) and armijo(a, fa) and (best is None or fa < best[1]):
            best = (a, fa)

    def zoom(lo, flo, glo, hi, fhi, ghi):
        for _ in range(max_iters):
            if lo == hi:
                break
            trial = None
            if math.isfinite(flo) and math.isfinite(fhi) and glo is not None and ghi is not None:
                trial = _cubic_min(lo, flo, glo, hi, fhi, ghi)
            width = abs(hi - lo)
            left, right = min(lo, hi), max(lo, hi)
            if trial is None or not (left + 0.1 * width <= trial <= right - 0.1 * width):
                trial = 0.5 * (lo + hi)
            ft = phi(trial)
            note(trial, ft)
            if not armijo(trial, ft) or ft >= flo:
                hi, fhi, ghi = trial, ft, (dphi(trial) if math.isfinite(ft) else None)
                continue
            gt = dphi(trial)
            if abs(gt) <= -c2 * dphi0:
                return trial, ft
            if gt * (hi - lo) >= 0:
                hi, fhi, ghi = lo, flo, glo
            lo, flo, glo = trial, ft, gt
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                break
        return None

    prev, fprev, gprev = 0.0, phi0, dphi0
    alpha = alpha_init
    for i in range(max_iters):
        fa = phi(alpha)
        note(alpha, fa)
        if not armijo(alpha, fa) or (i > 0 and fa >= fprev):
            ga = dphi(alpha) if math.isfinite(fa) else None
            found = zoom(prev, fprev, gprev, alpha, fa, ga)
            return found if found is not None else best
        ga = dphi(alpha)
        if abs(ga) <= -c2 * dphi0:
            return alpha, fa
        if ga >= 0:
            found = zoom(alpha, fa, ga, prev, fprev, gprev)
            return found if found is not None else best
        prev, fprev, gprev = alpha, fa, ga
        alpha = min(2.0 * alpha, alpha_max)
    return best


def bfgs_minimize(objective: Callable[[np.ndarray], float], x0, cfg: BfgsConfig = BfgsConfig(),
                  gradient: Callable[[np.ndarray], np.ndarray] | None = None,
                  record: bool = False) -> OptResult:
    """Minimize ``objective`` with BFGS (inverse-Hessian form).

    Gradients come from central finite differences unless ``gradient`` is
    given. Non-finite objective values during the line search count as +inf;
    a non-finite gradient ends the run at the current point.
    """
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _bfgs(objective, x0, cfg, gradient, record)


def _bfgs(objective, x0, cfg: BfgsConfig, gradient, record: bool) -> OptResult:
    x = np.array(x0, dtype=np.float64).ravel()
    f = float(objective(x))
    if not math.isfinite(f):
        raise NonFiniteObjective(f"objective is {f} at the starting point")
    fun = lambda z: _safe(objective(z))  # noqa: E731
    grad = gradient or (lambda z: fd_gradient(fun, z, cfg.fd_step))

    n = len(x)
    history = [f] if record else None
    if n == 0:
        return OptResult(x, f, 0, True, history)

    g = grad(x)
    H = np.eye(n)
    first = True
    converged = False
    k = 0
    while k < cfg.max_iters:
        if not np.all(np.isfinite(g)):
            break
        if np.linalg.norm(g) <= cfg.grad_tol:
            converged = True
            break
        p = -H @ g
        if not g @ p < 0:
            H = np.eye(n)
            p = -g
        cache: dict[float, np.ndarray] = {}

        def phi(a):
            return fun(x + a * p)

        def dphi(a):
            if a not in cache:
                cache[a] = grad(x + a * p)
            return float(cache[a] @ p)

        alpha_init = min(1.0, 1.0 / max(np.abs(g).max(), 1e-300)) if first else 1.0
        found = wolfe_line_search(phi, dphi, f, float(g @ p), cfg.c1, cfg.c2,
                                  alpha_init=alpha_init, max_iters=cfg.max_ls_iters)
        if found is None:
            if not np.allclose(H, np.eye(n)):
                H = np.eye(n)
                first = True
                continue
            break
        alpha, f_new = found
        k += 1
        s = alpha * p
        x_new = x + s
        g_new = cache[alpha] if alpha in cache else grad(x_new)
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)) and sy > 0:
            if first:
                H = np.eye(n) * (sy / float(y @ y))
            rho = 1.0 / sy
            Hy = H @ y
            H = H + ((sy + y @ Hy) * rho * rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
            first = False
        stalled = f - f_new <= 1e-16 * max(1.0, abs(f)) and np.linalg.norm(s) <= 1e-16 * max(1.0, np.linalg.norm(x))
        x, f, g = x_new, f_new, g_new
        if record:
            history.append(f)
        if stalled:
            break
    if not converged and np.linalg.norm(g) <= cfg.grad_tol:
        converged = True
    return OptResult(x, f, k, converged, history)


# --------------------------------------------------------------------------
# constant fitting

def _squared_residual_objective(skeleton: Skeleton, data: np.ndarray):
    def batch(C: np.ndarray) -> np.ndarray:
        C = np.atleast_2d(C)
        values = evaluate_batch(skeleton, data, [C[:, k:k + 1] for k in range(C.shape[1])])
        values = np.broadcast_to(values, (C.shape[0], len(data)))
        with np.errstate(over="ignore"):
            terms = values * values
        terms = np.where(np.isfinite(terms), terms, NOT_FINITE_PENALTY)
        return terms.mean(axis=1)

    def single(c: np.ndarray) -> float:
        return float(batch(c[None, :])[0])

    return single, batch


def fit_constants(skeleton: Skeleton, data: np.ndarray, clfem_cfg: ClfemConfig = ClfemConfig(),
                  bfgs_cfg: BfgsConfig = BfgsConfig(), rng: np.random.Generator | None = None,
                  fitness: str = "clfem", noise: np.ndarray | None = None,
                  init: np.ndarray | None = None, objective: str = "residual",
                  pin_noise: bool = True) -> tuple[list[float], FitnessResult]:
    """Fit the placeholder constants of ``skeleton`` to ``data``.

    With ``objective="residual"`` (default) each start minimizes the mean
    squared residual (smooth, unlike the gated fitness), then the fitted
    expression is scored with ``fitness`` ("clfem" or "vanilla"). With
    ``objective="fitness"`` BFGS works on the negated fitness directly,
    degenerate points counting as a large finite penalty. The best-scoring
    start wins; with "clfem", degenerate fits rank below every finite one.

    ``noise`` pins the CL-FEM stochastic draw; by default one draw is made
    per call and shared by all starts. ``pin_noise=False`` redraws it on
    every fitness evaluation instead. ``init`` replaces the first random
    starting point.
    """
    if objective not in ("residual", "fitness"):
        raise ValueError("objective must be 'residual' or 'fitness'")
    if rng is None:
        rng = np.random.default_rng(clfem_cfg.rng_seed)
    data = np.asarray(data, dtype=np.float64)
    if fitness == "clfem" and noise is None and pin_noise:
        noise = draw_uniform(data.shape, clfem_cfg, rng)

    def score(consts) -> FitnessResult:
        expr = instantiate(skeleton, consts)
        if fitness == "vanilla":
            return FitnessResult(vanilla_fitness(expr, data, clfem_cfg.norm_ell))
        return clfem_fitness(expr, data, clfem_cfg, rng=rng, noise=noise)

    n = skeleton.slot_count
    if n == 0:
        result = score([])
        if result.value == NEG_INF:
            raise AllRestartsDegenerate("bare expression is degenerate")
        return [], result

    if objective == "residual":
        single, batch = _squared_residual_objective(skeleton, data)
        gradient = batched_fd_gradient(batch, bfgs_cfg.fd_step)
    else:
        def single(c):
            v = score([float(t) for t in c]).value
            return -v if math.isfinite(v) and -v < NOT_FINITE_PENALTY else NOT_FINITE_PENALTY

        gradient = None

    best: tuple[list[float], FitnessResult] | None = None
    for run in range(1 + bfgs_cfg.restarts):
        x0 = None
        for attempt in range(10):
            cand = init if (run == 0 and attempt == 0 and init is not None) else rng.standard_normal(n)
            if math.isfinite(single(np.asarray(cand, dtype=np.float64))) and single(np.asarray(cand)) < NOT_FINITE_PENALTY:
                x0 = np.asarray(cand, dtype=np.float64)
                break
        if x0 is None:
            continue
        opt = bfgs_minimize(single, x0, bfgs_cfg, gradient=gradient)
        consts = [float(v) for v in opt.x_star]
        result = score(consts)
        if best is None or result.value > best[1].value:
            best = (consts, result)

    if best is None or best[1].value == NEG_INF:
        raise AllRestartsDegenerate(f"every start of {skeleton} ended degenerate")
    return best
