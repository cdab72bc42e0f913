"""End-to-end acceptance criteria, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL`` line (also repeated in the
pytest terminal summary) and then asserts the verdict.
"""
import json
import math
import time

import numpy as np
import pytest

from implisr import tensor as T
from implisr.bench import load_suite
from implisr.cli import main
from implisr.datagen import GenConfig, generate_samples, sample_equation, sample_points
from implisr.expr import (SOS_ID, Const, Op, extract_skeleton, ids_to_tokens, instantiate, parse_prefix,
                          print_prefix, used_dimensions)
from implisr.fitness import ClfemConfig, clfem_fitness
from implisr.gp import GpConfig, gp_run
from implisr.inference import BeamConfig, beam_search, model_step_fn
from implisr.metrics import MetricConfig, fitness_metric
from implisr.model import ModelConfig, PIEModel, TrainConfig, make_batch, train
from implisr.numopt import BfgsConfig, fit_constants
from test_inference import ToyModel, exhaustive, greedy
from test_tensor import gradient_check

TOY_GRAMMAR = dict(non_leaf_nodes=3, min_non_leaf_nodes=1, n_vars=2, operators=("add", "sub", "mul", "sin"))
CIRCLE = parse_prefix("sub add pow2 x_1 pow2 x_2 1.0")


def elapsed(t0):
    return f"{time.perf_counter() - t0:.1f}s"


# 1 ---------------------------------------------------------------------------

def test_c01_round_trip(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    failures = 0
    for i in range(10_000):
        cfg = GenConfig(non_leaf_nodes=1 + i % 8, p_var=0.6, p_const=0.4)
        e = sample_equation(cfg, rng)
        skel, consts = extract_skeleton(e)
        failures += parse_prefix(print_prefix(e)) != e
        failures += instantiate(skel, consts) != e
    ok = failures == 0 and time.perf_counter() - t0 < 10
    criterion(1, ok, f"10^4 trees, {failures} round-trip failures, {elapsed(t0)}")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_c02_generated_residuals(criterion):
    t0 = time.perf_counter()
    samples = list(generate_samples(GenConfig(N_points=200), 1000, np.random.default_rng(2)))
    from implisr.expr import evaluate_batch

    worst = max(float(np.max(np.abs(evaluate_batch(s.expr, s.points)))) for s in samples)
    pad_ok = all(np.all(s.points[:, d - 1] == 0) for s in samples for d in {1, 2, 3} - used_dimensions(s.expr))
    ok = len(samples) == 1000 and worst <= 1e-8 and pad_ok
    criterion(2, ok, f"1000 samples, max |f| = {worst:.2e}, padding zero: {pad_ok}, {elapsed(t0)}")
    assert ok


# 3 ---------------------------------------------------------------------------

def degenerate_variants(e):
    """g - g, 0 * g, a constant, and g with one variable frozen."""
    out = [Op("sub", (e, e)), Op("mul", (Const(0.0), e)), Const(1.3)]
    for d in sorted(used_dimensions(e)):
        tokens = ["1.0" if t == f"x_{d}" else t for t in print_prefix(e)]
        out.append(parse_prefix(tokens))
    return out


def test_c03_clfem_degeneracy(criterion):
    t0 = time.perf_counter()
    suite = load_suite("ai_feynman", n_points=200)
    n_degen = caught = 0
    truth_vals = []
    for i, eq in enumerate(suite.equations):
        cfg = ClfemConfig(rng_seed=i)
        truth_vals.append(clfem_fitness(eq.expr, eq.points, cfg).value)
        for f in degenerate_variants(eq.expr):
            n_degen += 1
            caught += clfem_fitness(f, eq.points, cfg).value == -math.inf
    truths_ok = sum(math.isfinite(v) and v >= -1e-6 for v in truth_vals)
    ok = caught == n_degen and truths_ok == 39
    criterion(3, ok, f"degenerate -inf {caught}/{n_degen}, truths finite >= -1e-6 {truths_ok}/39, {elapsed(t0)}")
    assert ok


# 4 ---------------------------------------------------------------------------

def test_c04_autodiff(criterion):
    t0 = time.perf_counter()
    worst = max(gradient_check(seed) for seed in range(100))
    ok = worst < 1e-4
    criterion(4, ok, f"100 random float64 networks, max rel err {worst:.2e}, {elapsed(t0)}")
    assert ok


# 5 ---------------------------------------------------------------------------

def test_c05_permutation_invariance(criterion):
    t0 = time.perf_counter()
    model = PIEModel(ModelConfig.preset("tiny"), seed=5).eval()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(5, 100))
        pts = rng.uniform(-10, 10, (1, n, 3))
        base = model.encode(pts).data
        scale = float(np.max(np.abs(base)))
        for _ in range(10):
            perm = rng.permutation(n)
            worst = max(worst, float(np.max(np.abs(model.encode(pts[:, perm]).data - base))) / scale)
    ok = worst < 1e-5
    criterion(5, ok, f"100 inputs x 10 permutations (float32), max rel deviation {worst:.2e}, {elapsed(t0)}")
    assert ok


# 6 ---------------------------------------------------------------------------

def test_c06_decoder_sanity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    samples = list(generate_samples(GenConfig(N_points=20, **TOY_GRAMMAR), 16, rng))
    points, targets = make_batch(samples, 16)
    cfg = ModelConfig.preset("tiny", dropout=0.0, max_seq_len=16)

    # causality: changing token j never moves the logits before j
    model = PIEModel(cfg, seed=6).eval()
    z = model.encode(points)
    tokens = rng.integers(3, 20, (len(samples), 10))
    tokens[:, 0] = SOS_ID
    base = model.decode(tokens, z).data
    causal = True
    for j in range(1, 10):
        other = tokens.copy()
        other[:, j] = (other[:, j] - 2) % 17 + 3
        causal &= bool(np.array_equal(model.decode(other, z).data[:, :j], base[:, :j]))

    # zero output head: uniform prediction, CE = ln 20
    model.zero_output_head()
    ce0 = model.loss(points, targets).item()

    # overfit one batch at the default learning rate
    model = PIEModel(cfg, seed=6).train()
    opt = T.Adam(model.parameters(), lr=cfg.lr)
    first = last = None
    for _ in range(200):
        opt.zero_grad()
        loss = model.loss(points, targets)
        loss.backward()
        opt.step()
        first = loss.item() if first is None else first
    last = model.loss(points, targets).item()
    drop = 1 - last / first
    ok = causal and abs(ce0 - math.log(20)) <= 1e-3 and drop >= 0.95
    criterion(6, ok, f"causal: {causal}, zero-head CE {ce0:.5f} (ln 20 = {math.log(20):.5f}), "
                     f"overfit CE {first:.3f} -> {last:.4f} ({drop:.1%} drop), {elapsed(t0)}")
    assert ok


# 7 ---------------------------------------------------------------------------

def test_c07_beam_oracle(criterion):
    t0 = time.perf_counter()
    mismatches = checked = 0
    for seed in range(50):
        for max_len in (1, 2, 3, 4):
            model = ToyModel(seed, vocab=5)
            truth = exhaustive(model, max_len)
            full = beam_search(model, BeamConfig(beam_size=len(truth), max_len=max_len))
            for k in (1, 4, len(truth)):
                checked += 1
                mismatches += [s for s, _ in full[:k]] != [s for s, _ in truth[:k]]
            (one, _), = beam_search(model, BeamConfig(beam_size=1, max_len=max_len))
            checked += 1
            mismatches += one != greedy(model, max_len)[0]
    ok = mismatches == 0
    criterion(7, ok, f"vocab 5, max_len 1-4, 50 toy models, k in {{1, 4, all}} + greedy: "
                     f"{mismatches}/{checked} mismatches, {elapsed(t0)}")
    assert ok


# 8 ---------------------------------------------------------------------------

FAMILIES = {
    "ellipse": ("sub add mul {a} pow2 x_1 mul {b} pow2 x_2 {c}", "sub add mul <c> pow2 x_1 mul <c> pow2 x_2 <c>"),
    "hyperbola": ("sub sub mul {a} pow2 x_1 mul {b} pow2 x_2 {c}", "sub sub mul <c> pow2 x_1 mul <c> pow2 x_2 <c>"),
    "inverse": ("sub x_2 div {a} x_1", "sub x_2 div <c> x_1"),
    "linear": ("sub add mul {a} x_1 mul {b} x_2 {c}", "sub add mul <c> x_1 mul <c> x_2 <c>"),
}


def test_c08_constant_recovery(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    scores = []
    for truth_fmt, skel_text in FAMILIES.values():
        skel = parse_prefix(skel_text)
        for _ in range(5):
            a, b, c = (float(v) for v in rng.uniform(0.5, 3.0, 3))
            truth = parse_prefix(truth_fmt.format(a=repr(a), b=repr(b), c=repr(c)))
            data = sample_points(truth, GenConfig(N_points=200), rng)
            consts, _ = fit_constants(skel, data, ClfemConfig(), BfgsConfig(restarts=4), rng)
            scores.append(fitness_metric(instantiate(skel, consts), truth, MetricConfig(), rng).fitness)
    rate = float(np.mean(np.array(scores) >= 0.95))
    ok = len(scores) == 20 and rate >= 0.9
    criterion(8, ok, f"20 skeletons, metric fitness >= 0.95 on {rate:.0%} (min {min(scores):.4f}), {elapsed(t0)}")
    assert ok


# 9 ---------------------------------------------------------------------------

def test_c09_metric_suite(criterion):
    t0 = time.perf_counter()
    suite = load_suite("ai_feynman", with_data=False)
    reports = [fitness_metric(eq.expr, eq.expr, MetricConfig(), np.random.default_rng(i))
               for i, eq in enumerate(suite.equations)]
    self_min = min(r.fitness for r in reports)

    zero = []
    for truth in ("sub add pow2 x_1 pow2 x_2 1.0", "sub x_1 1.0", "sub add x_1 x_2 0.3"):
        f_true = parse_prefix(truth)
        zero.append(np.mean([fitness_metric(Const(0.0), f_true, MetricConfig(), np.random.default_rng(k)).fitness
                             for k in range(30)]))

    exact = True
    probe = parse_prefix("sub add pow2 x_1 mul 1.2 pow2 x_2 0.9")
    for i, eq in enumerate(suite.equations):
        cfg = MetricConfig(M=40)
        a = fitness_metric(eq.expr, eq.expr, cfg, np.random.default_rng(100 + i))
        b = fitness_metric(eq.expr, Op("mul", (Const(7.0), eq.expr)), cfg, np.random.default_rng(100 + i))
        exact &= a.nmse == b.nmse and a.fitness == b.fitness
        reports.append(b)
    a = fitness_metric(probe, CIRCLE, MetricConfig(), np.random.default_rng(0))
    b = fitness_metric(probe, Op("mul", (Const(7.0), CIRCLE)), MetricConfig(), np.random.default_rng(0))
    exact &= a.nmse == b.nmse and a.fitness == b.fitness
    reports += [a, b]

    taus = sorted(reports[0].acc)
    monotone = all(r.acc[lo] >= r.acc[hi] for r in reports for lo, hi in zip(taus, taus[1:]))
    ok = self_min >= 0.99 and all(0.4 <= z <= 0.6 for z in zero) and exact and monotone
    criterion(9, ok, f"AIF self-fitness min {self_min:.6f}, zero-function mean fitness "
                     f"{', '.join(f'{z:.3f}' for z in zero)}, scale c=7 bit-exact: {exact}, "
                     f"Acc monotone: {monotone}, {elapsed(t0)}")
    assert ok


# 10 --------------------------------------------------------------------------

TOY_POINTS = 64  # points per sample; the CPU budget covers 20k samples at this size
TOY_EPOCHS = 20
TOY_PATIENCE = 3
TOY_LR = 1e-3


@pytest.mark.slow
def test_c10_toy_training(criterion, tmp_path):
    t0 = time.perf_counter()
    cfg = GenConfig(N_points=TOY_POINTS, **TOY_GRAMMAR)
    rng = np.random.default_rng(10)
    train_set = list(generate_samples(cfg, 20_000, rng))
    val_set = list(generate_samples(cfg, 500, rng))
    test_set = list(generate_samples(cfg, 200, rng))
    model = PIEModel(ModelConfig.preset("tiny", lr=TOY_LR, max_seq_len=16), seed=0)
    res = train(model, train_set, val_set, TrainConfig(epochs=TOY_EPOCHS, patience=TOY_PATIENCE, seed=0),
                loss_csv=tmp_path / "loss.csv")
    top1 = contained = 0
    for s in test_set:
        seqs = beam_search(model_step_fn(model, s.points), BeamConfig(beam_size=16, max_len=16))
        decoded = [ids_to_tokens(q[:-1] if q and q[-1] == 2 else q) for q, _ in seqs]
        top1 += decoded[0] == s.skeleton_tokens
        contained += s.skeleton_tokens in decoded
    top1_rate, cont_rate = top1 / len(test_set), contained / len(test_set)
    minutes = (time.perf_counter() - t0) / 60
    ok = top1_rate >= 0.2 and cont_rate >= 0.5 and minutes <= 60
    criterion(10, ok, f"{res.steps} steps, best val CE {res.best_val:.4f}, top-1 {top1_rate:.1%}, "
                      f"beam-16 containment {cont_rate:.1%}, {minutes:.1f} min")
    assert ok


# 11 --------------------------------------------------------------------------

def test_c11_gp_smoke(criterion):
    t0 = time.perf_counter()
    th = np.random.default_rng(0).uniform(0, 2 * np.pi, 200)
    data = np.column_stack([np.cos(th), np.sin(th), np.zeros(200)])
    scores, elitist = [], True
    for seed in range(5):
        res = gp_run(data, GpConfig(population=500, generations=20, rng_seed=seed))
        best = [s["best_fitness"] for s in res.stats]
        elitist &= all(b >= a for a, b in zip(best, best[1:]))
        scores.append(fitness_metric(res.best.expr, CIRCLE, MetricConfig(rng_seed=0)).fitness)
    ok = max(scores) >= 0.9 and elitist
    criterion(11, ok, f"pop 500 / gen 20, metric fitness per seed {', '.join(f'{s:.3f}' for s in scores)}, "
                      f"elitism holds: {elitist}, {elapsed(t0)}")
    assert ok


# 12 --------------------------------------------------------------------------

PIPE_GEN = """
[generate]
non_leaf_nodes = 3
min_non_leaf_nodes = 1
n_vars = 2
operators = ["add", "sub", "mul", "sin"]
N_points = 50
"""

PIPE_BENCH = """
suite = "ai_feynman"
method = ["pie", "gp_clfem"]
count = 3
seeds = [0]
n_points = [50]
checkpoint = "model.ckpt"
[beam]
beam_size = 4
max_len = 12
[gp]
population = 60
generations = 3
tournament = 5
[metric]
M = 40
"""


def run_pipeline(d):
    (d / "gen.toml").write_text(PIPE_GEN)
    (d / "bench.toml").write_text(PIPE_BENCH)
    main(["generate", "--config", str(d / "gen.toml"), "--out", str(d / "train.jsonl"), "--seed", "1",
          "--count", "400", "--workers", "1"])
    main(["generate", "--config", str(d / "gen.toml"), "--out", str(d / "val.jsonl"), "--seed", "2",
          "--count", "64", "--workers", "1"])
    main(["train", "--data", str(d / "train.jsonl"), "--val", str(d / "val.jsonl"), "--preset", "tiny",
          "--seed", "0", "--out", str(d / "model.ckpt"), "--loss-csv", str(d / "loss.csv"), "--max-steps", "200",
          "--patience", "1000", "--max-seq-len", "16"])
    main(["infer", "--ckpt", str(d / "model.ckpt"), "--points", str(d / "val.jsonl"), "--beam", "8",
          "--max-len", "12", "--seed", "0", "--out", str(d / "pred.json")])
    truth = " ".join(json.loads((d / "val.jsonl").read_text().splitlines()[0])["expr"])
    main(["evaluate", "--pred", str(d / "pred.json"), "--truth", truth, "--seed", "0", "--out",
          str(d / "report.json")])
    main(["bench", "--config", str(d / "bench.toml"), "--out", str(d / "results.csv")])


@pytest.mark.slow
def test_c12_pipeline_determinism(criterion, tmp_path):
    t0 = time.perf_counter()
    runs = [tmp_path / "a", tmp_path / "b"]
    for d in runs:
        d.mkdir()
        run_pipeline(d)
    names = ["train.jsonl", "val.jsonl", "loss.csv", "model.ckpt", "pred.json", "report.json", "results.csv"]
    same = {n: (runs[0] / n).read_bytes() == (runs[1] / n).read_bytes() for n in names}
    steps = len((runs[0] / "loss.csv").read_text().splitlines()) - 1
    ok = all(same.values()) and (time.perf_counter() - t0) < 15 * 60
    differ = [n for n, s in same.items() if not s]
    criterion(12, ok, f"generate -> train (200 steps, {steps} loss rows) -> infer -> evaluate -> bench, "
                      f"two runs byte-identical: {'yes' if not differ else 'no, ' + ', '.join(differ)}, "
                      f"{elapsed(t0)}")
    assert ok
