"""Benchmark suites, robustness sweeps and the experiment runner."""
from __future__ import annotations

import csv
import logging
import math
import time
import traceback
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import Discarded, GenConfig, sample_equation, sample_points
from .expr import Expr, MalformedPrefix, parse_prefix, print_prefix, used_dimensions
from .fitness import ClfemConfig
from .gp import GpConfig, gp_run
from .inference import BeamConfig, discover
from .metrics import DEFAULT_TAUS, MetricConfig, fitness_metric
from .numopt import BfgsConfig

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

SUITES = ("ai_feynman", "synthetic", "synthetic_paper50")
METHODS = ("pie", "pie_vanilla", "gp_vanilla", "gp_clfem")
HELD_OUT_SEED = 0x5EED_7E57
SYNTHETIC_COUNT = 80
AGGREGATE_ID = "ALL"


class SuiteParseError(ValueError):
    pass


@dataclass
class BenchEquation:
    eq_id: str
    expr: Expr
    points: np.ndarray | None  # None when no data could be generated
    error: str | None = None

    @property
    def dims(self) -> set[int]:
        return used_dimensions(self.expr)


@dataclass
class BenchmarkSuite:
    name: str
    equations: list[BenchEquation]

    def __len__(self):
        return len(self.equations)


def read_suite_file(text: str, name: str = "suite") -> list[tuple[str, Expr]]:
    """Parse ``id<TAB>prefix tokens`` lines; ``#`` starts a comment line."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        eq_id, _, body = line.partition("\t")
        if not body:
            raise SuiteParseError(f"{name}:{lineno}: expected 'id<TAB>prefix'")
        try:
            e = parse_prefix(body)
        except MalformedPrefix as exc:
            raise SuiteParseError(f"{name}:{lineno}: equation {eq_id!r} does not parse: {exc}") from None
        out.append((eq_id, e))
    return out


def _bundled(name: str) -> str:
    return resources.files("implisr").joinpath("suites", f"{name}.txt").read_text(encoding="utf-8")


def suite_gen_config(n_points: int) -> GenConfig:
    # benchmark equations are fixed, so they get a generous trial budget
    return GenConfig(N_points=n_points, max_point_trials=200 * n_points)


def load_suite(name: str, n_points: int = 200, seed: int = 0, count: int | None = None,
               with_data: bool = True) -> BenchmarkSuite:
    """Bundled or held-out suite with per-equation data.

    Each equation's points come from its own stream seeded by
    ``(seed, equation index)``. The ``synthetic`` suite draws ``count``
    equations (default 80) from the default sampler with a fixed held-out
    seed, keeping only equations that yield data.
    """
    cfg = suite_gen_config(n_points)
    if name == "synthetic":
        return _synthetic_suite(cfg, seed, count or SYNTHETIC_COUNT, with_data)
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    entries = read_suite_file(_bundled(name), name)
    if count is not None:
        entries = entries[:count]
    eqs = []
    for idx, (eq_id, e) in enumerate(entries):
        if not with_data:
            eqs.append(BenchEquation(eq_id, e, None))
            continue
        rng = np.random.default_rng([seed, idx])
        try:
            eqs.append(BenchEquation(eq_id, e, sample_points(e, cfg, rng)))
        except Discarded as exc:
            eqs.append(BenchEquation(eq_id, e, None, f"discarded: {exc}"))
    return BenchmarkSuite(name, eqs)


def _synthetic_suite(cfg: GenConfig, seed: int, count: int, with_data: bool) -> BenchmarkSuite:
    rng = np.random.default_rng([HELD_OUT_SEED, seed])
    eqs = []
    while len(eqs) < count:
        e = sample_equation(cfg, rng)
        try:
            pts = sample_points(e, cfg, rng)
        except Discarded:
            continue
        eqs.append(BenchEquation(f"syn_{len(eqs) + 1:03d}", e, pts if with_data else None))
    return BenchmarkSuite("synthetic", eqs)


def write_suite(suite: BenchmarkSuite, path: str | Path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {suite.name}\n")
        for eq in suite.equations:
            fh.write(f"{eq.eq_id}\t{' '.join(print_prefix(eq.expr))}\n")


def add_noise(points: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative noise ``x * (1 + zeta)``, zeta ~ N(0, sigma^2) per entry."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    points = np.asarray(points, dtype=np.float64)
    if sigma == 0:
        return points.copy()
    return points * (1.0 + rng.normal(0.0, sigma, size=points.shape))


# --------------------------------------------------------------------------
# experiments

def _as_list(v) -> list:
    return list(v) if isinstance(v, (list, tuple)) else [v]


@dataclass
class ExperimentConfig:
    suite: str = "ai_feynman"
    method: list[str] = field(default_factory=lambda: ["gp_clfem"])
    noise_sigma: list[float] = field(default_factory=lambda: [0.0])
    n_points: list[int] = field(default_factory=lambda: [200])
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str | None = None
    checkpoint: str | None = None
    count: int | None = None  # first ``count`` equations of the suite
    data_seed: int = 0
    beam: dict = field(default_factory=dict)
    gp: dict = field(default_factory=dict)
    clfem: dict = field(default_factory=dict)
    bfgs: dict = field(default_factory=dict)
    metric: dict = field(default_factory=dict)

    def __post_init__(self):
        self.method = _as_list(self.method)
        self.noise_sigma = [float(s) for s in _as_list(self.noise_sigma)]
        self.n_points = [int(n) for n in _as_list(self.n_points)]
        self.seeds = [int(s) for s in _as_list(self.seeds)]
        bad = set(self.method) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}; choose from {METHODS}")
        if any(s < 0 for s in self.noise_sigma):
            raise ValueError("noise_sigma must be >= 0")
        if any(m.startswith("pie") for m in self.method) and not self.checkpoint:
            raise ValueError("pie methods need a checkpoint")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown experiment keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_toml(cls, path: str | Path) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
        cfg = cls.from_dict(d)
        base = Path(path).parent
        if cfg.checkpoint and not Path(cfg.checkpoint).is_absolute():
            cfg.checkpoint = str(base / cfg.checkpoint)
        return cfg


RESULT_COLUMNS = ["suite", "eq_id", "method", "sigma", "n_points", "seed", "fitness"] + \
    [f"acc_{t}" for t in DEFAULT_TAUS] + ["error"]


def _solve(method: str, points: np.ndarray, cfg: ExperimentConfig, model, rng: np.random.Generator) -> Expr:
    clfem_cfg = ClfemConfig(**cfg.clfem)
    bfgs_cfg = BfgsConfig(**cfg.bfgs)
    if method in ("pie", "pie_vanilla"):
        found = discover(points, model, BeamConfig(**cfg.beam), clfem_cfg, bfgs_cfg, rng,
                         fitness="clfem" if method == "pie" else "vanilla")
        return found.expr
    gp_cfg = GpConfig(**{**cfg.gp, "fitness_mode": "clfem" if method == "gp_clfem" else "vanilla"})
    return gp_run(points, gp_cfg, clfem_cfg, rng).best.expr


def _row_rng(seed: int, eq_idx: int, si: int, ni: int, method: str) -> np.random.Generator:
    return np.random.default_rng([seed, eq_idx, si, ni, METHODS.index(method)])


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None) -> list[dict]:
    """Run every (equation, method, sigma, n_points, seed) cell and score it.

    Returns per-cell rows followed by one aggregate row per (method, sigma,
    n_points). Writes the CSV to ``out`` (or ``cfg.out``) and per-row wall
    times to a sidecar ``<out>.timing.csv``; timings are kept out of the
    results so that reruns compare byte for byte.
    """
    out = out or cfg.out
    model = None
    if any(m.startswith("pie") for m in cfg.method):
        from .model import PIEModel
        model = PIEModel.load(cfg.checkpoint)
    n_max = max(cfg.n_points)
    suite = load_suite(cfg.suite, n_points=n_max, seed=cfg.data_seed, count=cfg.count)
    metric_cfg = MetricConfig(**cfg.metric)

    rows, timings = [], []
    for eq_idx, eq in enumerate(suite.equations):
        for method in cfg.method:
            for si, sigma in enumerate(cfg.noise_sigma):
                for ni, n in enumerate(cfg.n_points):
                    for seed in cfg.seeds:
                        rng = _row_rng(seed, eq_idx, si, ni, method)
                        noise_rng, solve_rng, metric_rng = rng.spawn(3)
                        t0 = time.perf_counter()
                        row = {"suite": suite.name, "eq_id": eq.eq_id, "method": method, "sigma": sigma,
                               "n_points": n, "seed": seed, "error": ""}
                        try:
                            if eq.points is None:
                                raise Discarded(eq.error or "no data")
                            pts = add_noise(eq.points[:n], sigma, noise_rng)
                            pred = _solve(method, pts, cfg, model, solve_rng)
                            report = fitness_metric(pred, eq.expr, metric_cfg, metric_rng)
                            row["fitness"] = report.fitness
                            for t in DEFAULT_TAUS:
                                row[f"acc_{t}"] = int(report.fitness >= t)
                        except Exception as exc:  # one bad cell must not sink the sweep
                            log.warning("%s/%s failed: %s", eq.eq_id, method, exc)
                            log.debug(traceback.format_exc())
                            row["fitness"] = 0.0
                            for t in DEFAULT_TAUS:
                                row[f"acc_{t}"] = 0
                            row["error"] = type(exc).__name__
                        rows.append(row)
                        timings.append({"eq_id": eq.eq_id, "method": method, "sigma": sigma, "n_points": n,
                                        "seed": seed, "wall_time": time.perf_counter() - t0})
    rows.extend(aggregate(rows))
    if out:
        write_results(rows, out)
        write_timings(timings, Path(str(out) + ".timing.csv"))
    return rows


def aggregate(rows: Sequence[dict]) -> list[dict]:
    """Mean fitness and Acc fractions per (suite, method, sigma, n_points)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r["eq_id"] == AGGREGATE_ID:
            continue
        groups.setdefault((r["suite"], r["method"], r["sigma"], r["n_points"]), []).append(r)
    out = []
    for (suite, method, sigma, n), rs in groups.items():
        agg = {"suite": suite, "eq_id": AGGREGATE_ID, "method": method, "sigma": sigma, "n_points": n,
               "seed": "all", "fitness": float(np.mean([r["fitness"] for r in rs])), "error": ""}
        for t in DEFAULT_TAUS:
            agg[f"acc_{t}"] = float(np.mean([r["fitness"] >= t for r in rs]))
        out.append(agg)
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results(rows: Sequence[dict], path: str | Path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in RESULT_COLUMNS])


def write_timings(rows: Sequence[dict], path: Path):
    cols = ["eq_id", "method", "sigma", "n_points", "seed", "wall_time"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])


def read_results(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
