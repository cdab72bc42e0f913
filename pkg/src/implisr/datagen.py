"""Synthetic pre-training corpus: random implicit equations and points on
their zero sets."""
from __future__ import annotations

import json
import math
import multiprocessing as mp
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .expr import (D_MAX, OPERATORS, Const, Expr, Op, Skeleton, Var, evaluate_batch,
                   extract_skeleton, instantiate, parse_prefix, print_prefix, used_dimensions)

SCAN_INTERVALS = 100
ROOT_TOL = 1e-10
BISECT_ITERS = 120


class Discarded(Exception):
    """Raised when an equation yields too few points (ill-conditioned)."""


@dataclass
class GenConfig:
    non_leaf_nodes: int = 5
    min_non_leaf_nodes: int | None = None  # if set, the count is uniform in [min, non_leaf_nodes]
    p_var: float = 0.8
    p_const: float = 0.2
    D_max: int = D_MAX
    n_vars: int | None = None  # leaves only use x_1..x_{n_vars}; defaults to D_max
    operators: tuple[str, ...] | None = None  # subset of the alphabet; default all
    N_points: int = 200
    scan_range: tuple[float, float] = (-10.0, 10.0)
    max_point_trials: int | None = None  # default 10 * N_points
    K_samples: int = 1000
    rng_seed: int = 0

    def __post_init__(self):
        if not math.isclose(self.p_var + self.p_const, 1.0):
            raise ValueError("p_var + p_const must be 1")
        if self.N_points < 1:
            raise ValueError("N_points must be >= 1")
        lo, hi = self.scan_range
        if not lo < hi:
            raise ValueError("scan_range lower bound must be below the upper bound")
        if self.D_max != D_MAX:
            raise ValueError(f"D_max is fixed at {D_MAX}")
        if self.operators is not None:
            unknown = set(self.operators) - set(OPERATORS)
            if unknown:
                raise ValueError(f"unknown operators {sorted(unknown)}")
            self.operators = tuple(self.operators)
        self.scan_range = tuple(self.scan_range)

    @property
    def trial_budget(self) -> int:
        return self.max_point_trials if self.max_point_trials is not None else 10 * self.N_points

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown GenConfig keys {sorted(extra)}")
        return cls(**d)


@dataclass
class TrainingSample:
    skeleton_tokens: list[str]
    points: np.ndarray
    true_constants: list[float]
    used_dims: set[int] = field(default_factory=set)
    expr_tokens: list[str] | None = None

    @property
    def expr(self) -> Expr:
        return instantiate(parse_skeleton(self.skeleton_tokens), self.true_constants)

    def to_record(self) -> dict:
        return {
            "skeleton": list(self.skeleton_tokens),
            "constants": [float(c) for c in self.true_constants],
            "points": self.points.tolist(),
            "dims": sorted(self.used_dims),
            "expr": list(self.expr_tokens or print_prefix(self.expr)),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TrainingSample":
        return cls(list(rec["skeleton"]), np.asarray(rec["points"], dtype=np.float64),
                   [float(c) for c in rec["constants"]], set(rec["dims"]), rec.get("expr"))


def parse_skeleton(tokens: Sequence[str]) -> Skeleton:
    parsed = parse_prefix(tokens)
    return parsed if isinstance(parsed, Skeleton) else Skeleton(parsed)


# --------------------------------------------------------------------------
# equations

def _operator_table(cfg: GenConfig):
    names = list(cfg.operators or OPERATORS)
    weights = np.array([OPERATORS[n].sample_weight for n in names], dtype=np.float64)
    return names, weights / weights.sum()


def sample_equation(cfg: GenConfig, rng: np.random.Generator) -> Expr:
    """Random tree with a fixed number of operator nodes.

    Operators are drawn i.i.d. by weight and placed one by one into a
    uniformly chosen empty slot of the partial tree; the remaining slots
    become leaves (variable w.p. p_var, else an N(0, 1) constant).
    """
    names, probs = _operator_table(cfg)
    n_vars = cfg.n_vars or cfg.D_max
    if cfg.min_non_leaf_nodes is None:
        n_ops = cfg.non_leaf_nodes
    else:
        n_ops = int(rng.integers(cfg.min_non_leaf_nodes, cfg.non_leaf_nodes + 1))

    # a node is [name, children]; None marks an empty slot
    root: list = [None]
    holes = [(root, 0)]
    for _ in range(n_ops):
        parent, idx = holes.pop(int(rng.integers(len(holes))))
        name = names[int(rng.choice(len(names), p=probs))]
        node = [name, [None] * OPERATORS[name].arity]
        parent[idx] = node
        holes.extend((node[1], i) for i in range(len(node[1])))

    # leaves are filled in prefix order so the draw sequence is well defined
    def build(slot):
        if slot is None:
            if rng.random() < cfg.p_var:
                return Var(int(rng.integers(1, n_vars + 1)))
            return Const(float(rng.standard_normal()))
        name, children = slot
        return Op(name, tuple(build(c) for c in children))

    return build(root[0])


# --------------------------------------------------------------------------
# points

def _solve_rows(f: Expr, base: np.ndarray, solve_dim: np.ndarray, cfg: GenConfig,
                rng: np.random.Generator) -> np.ndarray:
    """For each row of ``base``, solve f = 0 in column ``solve_dim[r]``.

    Returns the solved coordinate per row (nan where no root was found).
    The scan evaluates a uniform grid of SCAN_INTERVALS subintervals; every
    sign change and exact grid zero is a root candidate, refined by
    bisection and accepted if |f| <= ROOT_TOL.
    """
    n_rows = len(base)
    lo, hi = cfg.scan_range
    grid = np.linspace(lo, hi, SCAN_INTERVALS + 1)
    rows = np.arange(n_rows)

    def eval_at(row_idx, vals):
        X = base[row_idx].copy()
        X[np.arange(len(row_idx)), solve_dim[row_idx]] = vals
        return evaluate_batch(f, X)

    g_rows = np.repeat(rows, len(grid))
    g_vals = np.tile(grid, n_rows)
    fg = eval_at(g_rows, g_vals).reshape(n_rows, len(grid))

    # candidate brackets: sign changes between finite neighbours
    left, right = fg[:, :-1], fg[:, 1:]
    change = np.isfinite(left) & np.isfinite(right) & (np.sign(left) * np.sign(right) < 0)
    r_idx, c_idx = np.nonzero(change)
    a = grid[c_idx].astype(np.float64)
    b = grid[c_idx + 1].astype(np.float64)
    fa = left[r_idx, c_idx]
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (a + b)
        fm = eval_at(r_idx, mid)
        same = np.sign(fm) == np.sign(fa)
        # a nan midpoint (pole inside the bracket) counts as a sign change;
        # such brackets fail the final tolerance check
        a = np.where(same, mid, a)
        fa = np.where(same, fm, fa)
        b = np.where(same, b, mid)
        if np.all(b - a <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(a))):
            break
    fa_final = eval_at(r_idx, a)
    fb_final = eval_at(r_idx, b)
    pick_b = np.abs(fb_final) < np.abs(np.where(np.isfinite(fa_final), fa_final, np.inf))
    root = np.where(pick_b, b, a)
    froot = np.where(pick_b, fb_final, fa_final)
    good = np.isfinite(froot) & (np.abs(froot) <= ROOT_TOL)

    z_r, z_c = np.nonzero(fg == 0.0)
    cand_rows = np.concatenate([r_idx[good], z_r])
    cand_vals = np.concatenate([root[good], grid[z_c]])

    # uniform choice among the distinct roots of each row
    out = np.full(n_rows, np.nan)
    order = np.argsort(cand_rows, kind="stable")
    cand_rows, cand_vals = cand_rows[order], cand_vals[order]
    starts = np.searchsorted(cand_rows, rows, side="left")
    ends = np.searchsorted(cand_rows, rows, side="right")
    for r in rows:
        vals = np.unique(cand_vals[starts[r]:ends[r]])
        if len(vals):
            out[r] = vals[int(rng.integers(len(vals)))]
    return out


def sample_points(f: Expr, cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """``N_points x D_max`` matrix of points with f(x) = 0; raises Discarded."""
    dims = sorted(used_dimensions(f))
    if not dims:
        raise Discarded("equation has no variables")
    budget = cfg.trial_budget
    need = cfg.N_points
    collected: list[np.ndarray] = []
    used = 0
    while used < budget and need > 0:
        batch = min(budget - used, max(need * 2, 32))
        base = np.zeros((batch, cfg.D_max))
        solve_dim = np.asarray(dims)[rng.integers(len(dims), size=batch)] - 1
        for j in dims:
            base[:, j - 1] = rng.standard_normal(batch)
        roots = _solve_rows(f, base, solve_dim, cfg, rng)
        ok = np.flatnonzero(np.isfinite(roots))
        base[np.arange(batch), solve_dim] = roots
        take = ok[:need]
        collected.append(base[take])
        need -= len(take)
        used += batch
    if need > 0:
        raise Discarded(f"only {cfg.N_points - need} of {cfg.N_points} points in {budget} trials")
    return np.concatenate(collected, axis=0)


def build_sample(f: Expr, points: np.ndarray) -> TrainingSample:
    skeleton, constants = extract_skeleton(f)
    return TrainingSample(print_prefix(skeleton), np.asarray(points, dtype=np.float64), constants,
                          used_dimensions(f), print_prefix(f))


def generate_samples(cfg: GenConfig, count: int, rng: np.random.Generator) -> Iterator[TrainingSample]:
    """Yield ``count`` accepted samples; discarded equations do not count."""
    made = 0
    while made < count:
        f = sample_equation(cfg, rng)
        try:
            points = sample_points(f, cfg, rng)
        except Discarded:
            continue
        made += 1
        yield build_sample(f, points)


def _dumps(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"), ensure_ascii=False)


def _worker(args) -> list[str]:
    cfg_dict, count, seed_state = args
    cfg = GenConfig.from_dict(cfg_dict)
    rng = np.random.default_rng(np.random.SeedSequence(**seed_state))
    return [_dumps(s.to_record()) for s in generate_samples(cfg, count, rng)]


def generate_corpus(cfg: GenConfig, out: str | Path, workers: int = 1) -> Path:
    """Write ``cfg.K_samples`` records as JSONL.

    With one worker the file is a deterministic function of ``rng_seed``.
    With more, each worker draws from its own spawned seed stream and the
    chunks are concatenated in worker order.
    """
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if workers <= 1:
        rng = np.random.default_rng(cfg.rng_seed)
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            for sample in generate_samples(cfg, cfg.K_samples, rng):
                fh.write(_dumps(sample.to_record()) + "\n")
        return out

    children = np.random.SeedSequence(cfg.rng_seed).spawn(workers)
    share = [cfg.K_samples // workers + (i < cfg.K_samples % workers) for i in range(workers)]
    cfg_dict = asdict(cfg)
    jobs = [(cfg_dict, n, {"entropy": ss.entropy, "spawn_key": ss.spawn_key}) for n, ss in zip(share, children)]
    with mp.get_context("spawn").Pool(workers) as pool:
        chunks = pool.map(_worker, jobs)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for chunk in chunks:
            for line in chunk:
                fh.write(line + "\n")
    return out


def load_corpus(path: str | Path) -> list[TrainingSample]:
    with open(path, encoding="utf-8") as fh:
        return [TrainingSample.from_record(json.loads(line)) for line in fh if line.strip()]
