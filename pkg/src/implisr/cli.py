"""Command-line entry point: generate, train, infer, evaluate, baseline-gp, bench."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .expr import D_MAX, parse_prefix, print_prefix

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("implisr")


def _load_table(path: str | None, section: str | None = None) -> dict:
    if not path:
        return {}
    with open(path, "rb") as fh:
        d = tomllib.load(fh)
    return d.get(section, d) if section else d


def read_points(path: str, index: int = 0) -> np.ndarray:
    """Points from a CSV (one row per point, header optional) or a JSONL
    file of records with a ``points`` key; padded to D_max columns."""
    p = Path(path)
    if p.suffix == ".jsonl":
        with open(p, encoding="utf-8") as fh:
            lines = [ln for ln in fh if ln.strip()]
        pts = np.asarray(json.loads(lines[index])["points"], dtype=np.float64)
    else:
        with open(p, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        try:
            float(rows[0][0])
        except ValueError:
            rows = rows[1:]
        pts = np.asarray([[float(v) for v in r] for r in rows], dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] > D_MAX:
        raise SystemExit(f"{path}: expected an N x (<= {D_MAX}) point matrix, got {pts.shape}")
    if pts.shape[1] < D_MAX:
        pts = np.hstack([pts, np.zeros((len(pts), D_MAX - pts.shape[1]))])
    return pts


def _write_json(obj, out: str | None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def cmd_generate(args):
    from .datagen import GenConfig, generate_corpus

    d = _load_table(args.config, "generate")
    if args.seed is not None:
        d["rng_seed"] = args.seed
    if args.count is not None:
        d["K_samples"] = args.count
    cfg = GenConfig.from_dict(d)
    generate_corpus(cfg, args.out, workers=args.workers)
    log.info("wrote %d samples to %s", cfg.K_samples, args.out)


def cmd_train(args):
    from .datagen import load_corpus
    from .model import ModelConfig, PIEModel, TrainConfig, train

    overrides = {k: v for k, v in (("lr", args.lr), ("max_seq_len", args.max_seq_len),
                                   ("batch_size", args.batch_size), ("dropout", args.dropout)) if v is not None}
    cfg = ModelConfig.preset(args.preset, **overrides)
    model = PIEModel(cfg, seed=args.seed)
    tcfg = TrainConfig(epochs=args.epochs, max_steps=args.max_steps, patience=args.patience, seed=args.seed)
    loss_csv = args.loss_csv or str(args.out) + ".loss.csv"
    val = load_corpus(args.val) if args.val else []
    res = train(model, load_corpus(args.data), val, tcfg, loss_csv=loss_csv, ckpt=args.out)
    log.info("trained %d steps, best val CE %s; checkpoint %s", res.steps, res.best_val, args.out)


def cmd_infer(args):
    from .fitness import ClfemConfig
    from .inference import BeamConfig, NoViableCandidate, discover
    from .model import PIEModel
    from .numopt import BfgsConfig

    model = PIEModel.load(args.ckpt)
    points = read_points(args.points, args.index)
    try:
        found = discover(points, model, BeamConfig(args.beam, args.max_len), ClfemConfig(tau=args.tau),
                         BfgsConfig(restarts=args.restarts), np.random.default_rng(args.seed),
                         fitness=args.fitness)
    except NoViableCandidate as exc:
        log.error("%s", exc)
        _write_json({"expr_prefix": None, "error": str(exc)}, args.out)
        return 1
    _write_json(found.to_dict(), args.out)
    return 0


def cmd_evaluate(args):
    from .metrics import DEFAULT_TAUS, EvalReport, MetricConfig, fitness_metric

    with open(args.pred, encoding="utf-8") as fh:
        pred = json.load(fh)
    tokens = pred["expr_prefix"] if isinstance(pred, dict) else pred
    f_true = parse_prefix(args.truth)
    if tokens is None:
        # a failed inference scores like a prediction with no solutions
        report = EvalReport(float("inf"), float("inf"), 0.0, {t: 0 for t in DEFAULT_TAUS}, 0)
    else:
        report = fitness_metric(parse_prefix(tokens), f_true, MetricConfig(M=args.M),
                                np.random.default_rng(args.seed))
    _write_json(report.to_dict(), args.out)


def cmd_baseline_gp(args):
    from .fitness import ClfemConfig
    from .gp import GpConfig, gp_run

    d = _load_table(args.config, "gp")
    d.update(fitness_mode=args.fitness, rng_seed=args.seed)
    for key in ("population", "generations"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    cfg = GpConfig(**d)
    points = read_points(args.points, args.index)
    res = gp_run(points, cfg, ClfemConfig())
    if args.stats:
        res.write_stats(args.stats)
    _write_json({"expr_prefix": print_prefix(res.best.expr), "fitness": res.best.fitness,
                 "config": asdict(cfg)}, args.out)


def cmd_bench(args):
    from .bench import ExperimentConfig, run_experiment

    cfg = ExperimentConfig.from_toml(args.config)
    rows = run_experiment(cfg, args.out)
    for r in rows:
        if r["eq_id"] == "ALL":
            log.info("%s sigma=%s n=%s fitness=%.3f acc_0.5=%.3f", r["method"], r["sigma"], r["n_points"],
                     r["fitness"], r["acc_0.5"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="implisr", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("generate", help="write a synthetic pre-training corpus (JSONL)")
    p.add_argument("--config", help="TOML file with generator settings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int, help="number of samples (overrides K_samples)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the set-to-sequence model")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--preset", choices=("tiny", "paper"), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--patience", type=int, default=1, help="epochs without validation improvement before stopping")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--dropout", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="discover an equation for a point set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--points", required=True, help="CSV or JSONL")
    p.add_argument("--index", type=int, default=0, help="record index for JSONL input")
    p.add_argument("--beam", type=int, default=16)
    p.add_argument("--max-len", type=int, default=48)
    p.add_argument("--fitness", choices=("clfem", "vanilla"), default="clfem")
    p.add_argument("--tau", type=float, default=1e-4)
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score a prediction against a true equation")
    p.add_argument("--pred", required=True, help="JSON with an expr_prefix field")
    p.add_argument("--truth", required=True, help="prefix expression")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--M", type=int, default=200)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline-gp", help="genetic-programming baseline")
    p.add_argument("--points", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--fitness", choices=("vanilla", "clfem"), default="clfem")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="TOML with GP settings")
    p.add_argument("--population", type=int)
    p.add_argument("--generations", type=int)
    p.add_argument("--stats", help="per-generation stats CSV")
    p.add_argument("--out")
    p.set_defaults(func=cmd_baseline_gp)

    p = sub.add_parser("bench", help="run a benchmark sweep from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
