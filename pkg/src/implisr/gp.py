"""Genetic-programming baseline for implicit equations.

Trees are immutable ``Expr`` values; variation rebuilds the path from the
root to the changed node. Fitness is either the plain residual or the
degeneracy-gated CL-FEM score; in the latter mode the stochastic datasets
are drawn once per run so that fitness is a pure function of the tree and
elitism is strictly monotone.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .expr import (D_MAX, OPERATORS, Const, Expr, Op, Var, depth, extract_skeleton, instantiate,
                   walk)
from .fitness import NEG_INF, ClfemConfig, clfem_fitness, data_dims, draw_uniform, vanilla_fitness
from .numopt import AllRestartsDegenerate, BfgsConfig, fit_constants

TreePath = tuple[int, ...]


@dataclass(frozen=True)
class GpConfig:
    population: int = 2000
    generations: int = 20
    tournament: int = 20
    p_crossover: float = 0.9
    p_subtree_mutation: float = 0.01
    p_point_mutation: float = 0.01
    point_sigma: float = 0.1
    max_depth: int = 8
    init_depth: tuple[int, int] = (2, 6)
    p_const: float = 0.2
    fitness_mode: str = "clfem"
    const_fit: bool = False
    const_fit_iters: int = 20
    operators: tuple[str, ...] | None = None
    max_retries: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("p_crossover", "p_subtree_mutation", "p_point_mutation", "p_const"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.p_crossover + self.p_subtree_mutation + self.p_point_mutation > 1.0 + 1e-12:
            raise ValueError("variation probabilities sum above 1")
        if self.population <= self.tournament or self.tournament < 1:
            raise ValueError("need population > tournament >= 1")
        if self.fitness_mode not in ("vanilla", "clfem"):
            raise ValueError("fitness_mode must be 'vanilla' or 'clfem'")
        lo, hi = self.init_depth
        if not 1 <= lo <= hi <= self.max_depth:
            raise ValueError("init_depth must lie within [1, max_depth]")


@dataclass
class Individual:
    expr: Expr
    fitness: float


@dataclass
class GpResult:
    best: Individual
    stats: list[dict] = field(default_factory=list)

    def write_stats(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["generation", "best_fitness", "mean_fitness"])
            for row in self.stats:
                w.writerow([row["generation"], repr(row["best_fitness"]), repr(row["mean_fitness"])])


# --------------------------------------------------------------------------
# tree surgery

def node_paths(e: Expr) -> list[tuple[TreePath, Expr]]:
    """Every node with its child-index path from the root, in prefix order."""
    out = []
    stack: list[tuple[TreePath, Expr]] = [((), e)]
    while stack:
        p, node = stack.pop()
        out.append((p, node))
        if isinstance(node, Op):
            stack.extend((p + (i,), a) for i, a in reversed(list(enumerate(node.args))))
    return out


def replace_at(e: Expr, path: TreePath, new: Expr) -> Expr:
    if not path:
        return new
    i = path[0]
    args = list(e.args)
    args[i] = replace_at(args[i], path[1:], new)
    return Op(e.name, tuple(args))


# --------------------------------------------------------------------------
# random trees

class TreeFactory:
    def __init__(self, n_vars: list[int], operators: tuple[str, ...] | None, p_const: float):
        self.vars = list(n_vars)
        self.ops = list(operators or OPERATORS)
        self.unary = [o for o in self.ops if OPERATORS[o].arity == 1]
        self.binary = [o for o in self.ops if OPERATORS[o].arity == 2]
        self.p_const = p_const

    def leaf(self, rng) -> Expr:
        if rng.random() < self.p_const:
            return Const(float(rng.standard_normal()))
        return Var(self.vars[int(rng.integers(len(self.vars)))])

    def tree(self, rng, max_depth: int, full: bool) -> Expr:
        """Full trees put operators at every level above the last; grow
        trees pick among operators and terminals at each level."""
        if max_depth <= 1:
            return self.leaf(rng)
        n_ops = len(self.ops)
        if not full and rng.random() >= n_ops / (n_ops + len(self.vars) + 1):
            return self.leaf(rng)
        name = self.ops[int(rng.integers(n_ops))]
        return Op(name, tuple(self.tree(rng, max_depth - 1, full) for _ in range(OPERATORS[name].arity)))

    def ramped(self, rng, count: int, depths: tuple[int, int]) -> list[Expr]:
        lo, hi = depths
        out = []
        for i in range(count):
            d = lo + i % (hi - lo + 1)
            out.append(self.tree(rng, d, full=bool(i % 2)))
        return out


# --------------------------------------------------------------------------
# operators

def tournament(fitness: np.ndarray, size: int, rng: np.random.Generator) -> int:
    """Index of the fittest of ``size`` distinct random entrants (first wins ties)."""
    picks = rng.choice(len(fitness), size=min(size, len(fitness)), replace=False)
    return int(picks[np.argmax(fitness[picks])])


def crossover(a: Expr, b: Expr, rng: np.random.Generator, max_depth: int = 8, retries: int = 10) -> Expr:
    """Replace a uniform subtree of ``a`` by a uniform subtree of ``b``;
    falls back to ``a`` when every retry breaks the depth bound."""
    na, nb = node_paths(a), node_paths(b)
    for _ in range(retries):
        path, _ = na[int(rng.integers(len(na)))]
        _, donor = nb[int(rng.integers(len(nb)))]
        child = replace_at(a, path, donor)
        if depth(child) <= max_depth:
            return child
    return a


def subtree_mutation(a: Expr, factory: TreeFactory, rng: np.random.Generator, max_depth: int = 8,
                     retries: int = 10) -> Expr:
    nodes = node_paths(a)
    for _ in range(retries):
        path, _ = nodes[int(rng.integers(len(nodes)))]
        room = max_depth - len(path)
        child = replace_at(a, path, factory.tree(rng, max(1, min(room, 4)), full=False))
        if depth(child) <= max_depth:
            return child
    return a


def point_mutation(a: Expr, factory: TreeFactory, rng: np.random.Generator, sigma: float = 0.1) -> Expr:
    """Change one node in place: constants get N(0, sigma) noise, variables
    and operators are redrawn (operators keep their arity)."""
    nodes = node_paths(a)
    path, node = nodes[int(rng.integers(len(nodes)))]
    if isinstance(node, Const):
        new = Const(node.value + float(rng.normal(0.0, sigma)))
    elif isinstance(node, Var):
        new = Var(factory.vars[int(rng.integers(len(factory.vars)))])
    else:
        pool = factory.unary if len(node.args) == 1 else factory.binary
        new = Op(pool[int(rng.integers(len(pool)))], node.args) if pool else node
    return replace_at(a, path, new)


# --------------------------------------------------------------------------
# run

class _Scorer:
    def __init__(self, data: np.ndarray, cfg: GpConfig, clfem_cfg: ClfemConfig, rng: np.random.Generator):
        self.data = data
        self.cfg = cfg
        self.clfem_cfg = clfem_cfg
        self.noise = draw_uniform(data.shape, clfem_cfg, rng)
        self.cache: dict[Expr, float] = {}
        self.bfgs = BfgsConfig(max_iters=cfg.const_fit_iters, restarts=0)

    def score(self, e: Expr) -> float:
        hit = self.cache.get(e)
        if hit is not None:
            return hit
        if self.cfg.fitness_mode == "vanilla":
            v = vanilla_fitness(e, self.data, self.clfem_cfg.norm_ell)
        else:
            v = clfem_fitness(e, self.data, self.clfem_cfg, noise=self.noise).value
        self.cache[e] = v
        return v

    def refine(self, e: Expr, rng) -> Expr:
        """Lamarckian constant tuning from the individual's current constants."""
        skel, consts = extract_skeleton(e)
        if not consts:
            return e
        try:
            fitted, _ = fit_constants(skel, self.data, self.clfem_cfg, self.bfgs, rng,
                                      fitness=self.cfg.fitness_mode, noise=self.noise,
                                      init=np.asarray(consts))
        except AllRestartsDegenerate:
            return e
        return instantiate(skel, fitted)


def gp_run(data: np.ndarray, cfg: GpConfig = GpConfig(), clfem_cfg: ClfemConfig = ClfemConfig(),
           rng: np.random.Generator | None = None) -> GpResult:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("data must be a non-empty N x D matrix")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    dims = data_dims(data) or list(range(1, D_MAX + 1))
    factory = TreeFactory(dims, cfg.operators, cfg.p_const)
    scorer = _Scorer(data, cfg, clfem_cfg, rng)

    def evaluate(pop, keep_first=False):
        if cfg.const_fit:
            # the elite is carried over unchanged
            head = pop[:1] if keep_first else []
            pop = head + [scorer.refine(e, rng) for e in pop[len(head):]]
        return pop, np.array([scorer.score(e) for e in pop])

    pop, fit = evaluate(factory.ramped(rng, cfg.population, cfg.init_depth))
    best = Individual(pop[int(np.argmax(fit))], float(np.max(fit)))
    stats = []

    def record(gen):
        finite = fit[np.isfinite(fit)]
        stats.append({"generation": gen, "best_fitness": best.fitness,
                      "mean_fitness": float(finite.mean()) if len(finite) else NEG_INF})

    record(0)
    p_c = cfg.p_crossover
    p_s = p_c + cfg.p_subtree_mutation
    p_p = p_s + cfg.p_point_mutation
    for gen in range(1, cfg.generations + 1):
        children = [best.expr]  # elitism
        while len(children) < cfg.population:
            parent = pop[tournament(fit, cfg.tournament, rng)]
            r = rng.random()
            if r < p_c:
                donor = pop[tournament(fit, cfg.tournament, rng)]
                child = crossover(parent, donor, rng, cfg.max_depth, cfg.max_retries)
            elif r < p_s:
                child = subtree_mutation(parent, factory, rng, cfg.max_depth, cfg.max_retries)
            elif r < p_p:
                child = point_mutation(parent, factory, rng, cfg.point_sigma)
            else:
                child = parent
            children.append(child)
        pop, fit = evaluate(children, keep_first=True)
        i = int(np.argmax(fit))
        if fit[i] > best.fitness:
            best = Individual(pop[i], float(fit[i]))
        record(gen)
    return GpResult(best, stats)


def check_closure(pop: list[Expr], max_depth: int) -> bool:
    """Every tree is well formed (constructors validate arity) and within depth."""
    return all(depth(e) <= max_depth and all(isinstance(n, (Op, Var, Const)) for n in walk(e)) for e in pop)
