import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implisr import tensor as T
from implisr.datagen import GenConfig, generate_samples
from implisr.expr import EOS_ID, SOS_ID
from implisr.model import (FP16_MAX, ModelConfig, PIEModel, TrainConfig, binary16_bits, make_batch,
                           point_features, train)
from oracles import binary16_bits_struct

TINY = ModelConfig.preset("tiny", dropout=0.0, max_seq_len=16)


def toy_samples(n, n_points=20, seed=0):
    cfg = GenConfig(non_leaf_nodes=3, min_non_leaf_nodes=1, n_vars=2, operators=("add", "sub", "mul", "sin"),
                    N_points=n_points)
    return list(generate_samples(cfg, n, np.random.default_rng(seed)))


def rel_dev(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))


# -- embedding --------------------------------------------------------------

@settings(max_examples=300, deadline=None)
@given(st.floats(-FP16_MAX, FP16_MAX, allow_nan=False))
def test_binary16_matches_struct_codec(v):
    assert binary16_bits(np.array([v]))[0].tolist() == binary16_bits_struct(v)


def test_binary16_examples():
    assert binary16_bits(np.array(0.0)).tolist() == [0] * 16
    # 1.0 is 0x3C00: exponent bits 10..13 set
    assert binary16_bits(np.array(1.0)).tolist() == [0] * 10 + [1, 1, 1, 1, 0, 0]
    big = binary16_bits(np.array([1e6, -1e6, 65504.0, -65504.0]))
    assert np.array_equal(big[0], big[2]) and np.array_equal(big[1], big[3])
    assert big[0].tolist() != binary16_bits_struct(float("inf"))


def test_point_features_layout():
    pts = np.array([[[1.0, -2.0, 0.0]]])
    f = point_features(pts)
    assert f.shape == (1, 1, 48)
    assert f[0, 0, :16].tolist() == binary16_bits_struct(1.0)
    assert f[0, 0, 16:32].tolist() == binary16_bits_struct(-2.0)
    assert not f[0, 0, 32:].any()


# -- config -----------------------------------------------------------------

def test_config_presets_and_validation():
    paper = ModelConfig.preset("paper")
    assert (paper.d_hid, paper.enc_heads, paper.n_inducing, paper.pma_seeds, paper.dec_layers) == (512, 16, 50, 10, 8)
    assert ModelConfig.preset("tiny", lr=1e-3).lr == 1e-3
    with pytest.raises(ValueError):
        ModelConfig(d_hid=100, enc_heads=16)
    with pytest.raises(ValueError):
        ModelConfig.preset("huge")
    assert ModelConfig.from_dict({**TINY.__dict__, "unknown": 1}) == TINY


# -- encoder ----------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 10, 200, 500])
def test_encoder_output_shape(n):
    m = PIEModel(TINY, seed=0).eval()
    pts = np.random.default_rng(n).uniform(-3, 3, (2, n, 3))
    z = m.encode(pts)
    assert z.shape == (2, TINY.pma_seeds, TINY.d_hid)
    assert np.all(np.isfinite(z.data))


def test_encoder_rejects_bad_shape():
    m = PIEModel(TINY, seed=0)
    with pytest.raises(T.ShapeMismatch):
        m.encode(np.zeros((1, 5, 2)))


@pytest.mark.parametrize("dtype,tol", [("float32", 1e-5), ("float64", 1e-12)])
def test_encoder_permutation_invariance(dtype, tol):
    m = PIEModel(ModelConfig.preset("tiny", dtype=dtype), seed=1).eval()
    rng = np.random.default_rng(0)
    for _ in range(5):
        pts = rng.uniform(-5, 5, (1, 50, 3))
        base = m.encode(pts).data
        for _ in range(3):
            perm = rng.permutation(50)
            assert rel_dev(m.encode(pts[:, perm]).data, base) < tol


# -- decoder ----------------------------------------------------------------

def test_decoder_is_causal():
    m = PIEModel(TINY, seed=2).eval()
    rng = np.random.default_rng(0)
    z = m.encode(rng.uniform(-2, 2, (3, 20, 3)))
    tokens = rng.integers(3, 20, (3, 8))
    tokens[:, 0] = SOS_ID
    base = m.decode(tokens, z).data
    for j in range(1, 8):
        other = tokens.copy()
        other[:, j] = (other[:, j] - 3 + 1) % 17 + 3
        out = m.decode(other, z).data
        assert np.array_equal(out[:, :j], base[:, :j])
        assert not np.array_equal(out[:, j], base[:, j])


def test_teacher_forcing_matches_step_by_step():
    m = PIEModel(TINY, seed=3).eval()
    rng = np.random.default_rng(1)
    z = m.encode(rng.uniform(-2, 2, (2, 20, 3)))
    tokens = np.concatenate([np.full((2, 1), SOS_ID), rng.integers(3, 20, (2, 6))], axis=1)
    full = T.log_softmax(m.decode(tokens, z)).data
    for t in range(tokens.shape[1]):
        step = np.log(m.decode_step(tokens[:, :t + 1], z))
        np.testing.assert_allclose(step, full[:, t], atol=1e-5)
        np.testing.assert_allclose(m.next_log_probs(tokens[:, :t + 1], z), full[:, t], atol=1e-5)


def test_zero_head_is_uniform():
    m = PIEModel(TINY, seed=0).eval()
    m.zero_output_head()
    samples = toy_samples(8)
    points, targets = make_batch(samples, TINY.max_seq_len)
    z = m.encode(points)
    np.testing.assert_allclose(m.decode_step(targets[:, :3], z), 1 / 20, atol=1e-7)
    assert abs(m.loss(points, targets).item() - math.log(20)) < 1e-3


def test_gradient_reaches_every_parameter():
    m = PIEModel(TINY, seed=0).train()
    points, targets = make_batch(toy_samples(8), TINY.max_seq_len)
    m.loss(points, targets).backward()
    for name, p in m.params.items():
        assert p.grad is not None and np.any(p.grad != 0), name


def test_overfit_single_batch_quick():
    m = PIEModel(ModelConfig.preset("tiny", dropout=0.0, max_seq_len=16, lr=1e-3), seed=0).train()
    points, targets = make_batch(toy_samples(8), 16)
    opt = T.Adam(m.parameters(), lr=1e-3)
    first = None
    for _ in range(60):
        opt.zero_grad()
        loss = m.loss(points, targets)
        loss.backward()
        opt.step()
        first = first if first is not None else loss.item()
    assert m.loss(points, targets).item() < 0.5 * first


# -- training loop and persistence ------------------------------------------

def test_training_is_deterministic(tmp_path):
    tr, va = toy_samples(40, seed=0), toy_samples(10, seed=1)
    cfg = ModelConfig.preset("tiny", max_seq_len=16, batch_size=8)
    outs = []
    for run in ("a", "b"):
        m = PIEModel(cfg, seed=5)
        res = train(m, tr, va, TrainConfig(epochs=1, max_steps=4, seed=2), loss_csv=tmp_path / f"{run}.csv",
                    ckpt=tmp_path / f"{run}.ckpt")
        outs.append(res)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert outs[0].steps == 4
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "step,train_ce,val_ce" and len(lines) == 5
    assert lines[-1].split(",")[2] != ""  # validation at the final step


def test_early_stopping_keeps_best(tmp_path):
    tr, va = toy_samples(24, seed=0), toy_samples(8, seed=1)
    cfg = ModelConfig.preset("tiny", max_seq_len=16, batch_size=8, lr=3e-2)  # lr high enough to diverge
    m = PIEModel(cfg, seed=0)
    res = train(m, tr, va, TrainConfig(epochs=6, patience=1), loss_csv=tmp_path / "l.csv")
    vals = [v for _, _, v in res.history if v is not None]
    assert res.best_val == min(vals)
    assert len(vals) <= 6
    from implisr.model import evaluate_ce
    assert evaluate_ce(m, va, 8) == pytest.approx(res.best_val, rel=1e-6)


def test_checkpoint_round_trip(tmp_path):
    m = PIEModel(TINY, seed=4).eval()
    path = tmp_path / "m.ckpt"
    m.save(path, {"steps": 3})
    back = PIEModel.load(path)
    assert back.cfg == m.cfg
    for k, v in m.state_dict().items():
        assert back.state_dict()[k].tobytes() == v.tobytes()
    pts = np.random.default_rng(0).uniform(-1, 1, (1, 15, 3))
    tok = np.array([[SOS_ID, 3, 16, EOS_ID]])
    assert np.array_equal(m.decode(tok, m.encode(pts)).data, back.decode(tok, back.encode(pts)).data)


def test_load_state_dict_checks_shapes():
    m = PIEModel(TINY, seed=0)
    state = m.state_dict()
    state["out.b"] = np.zeros(3, dtype=np.float32)
    with pytest.raises(T.ShapeMismatch):
        m.load_state_dict(state)
    state.pop("out.b")
    with pytest.raises(ValueError):
        m.load_state_dict(state)
