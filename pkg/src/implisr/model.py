"""Set-to-sequence network: binary16 point embedding, Set Transformer
encoder (ISAB stack + PMA pooling) and a causal Transformer decoder over
skeleton tokens, plus the cross-entropy training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .expr import D_MAX, EOS_ID, PAD_ID, SOS_ID, VOCAB, tokens_to_ids
from .tensor import Tensor

log = logging.getLogger(__name__)

FP16_MAX = 65504.0
BITS = 16
NEG_BIG = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_emb: int = 16
    d_hid: int = 512
    enc_heads: int = 16
    enc_layers: int = 4  # linear layers per rFF
    n_isab: int = 5
    n_inducing: int = 50
    pma_seeds: int = 10
    dec_heads: int = 16
    dec_layers: int = 8
    dropout: float = 0.1
    vocab: int = len(VOCAB)
    max_seq_len: int = 48
    batch_size: int = 64
    lr: float = 1e-4
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_emb != BITS:
            raise ValueError("d_emb is fixed by the binary16 encoding (16)")
        for name in ("d_hid", "enc_heads", "enc_layers", "n_isab", "n_inducing", "pma_seeds",
                     "dec_heads", "dec_layers", "vocab", "max_seq_len", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_hid % self.enc_heads or self.d_hid % self.dec_heads:
            raise ValueError("d_hid must be divisible by the number of heads")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == "paper":
            base = cls()
        elif name == "tiny":
            base = cls(d_hid=128, enc_heads=4, enc_layers=2, n_isab=2, n_inducing=16, pma_seeds=10,
                       dec_heads=4, dec_layers=2)
        else:
            raise ValueError(f"unknown preset {name!r}")
        return replace(base, **overrides)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --------------------------------------------------------------------------
# embedding

def binary16_bits(values: np.ndarray) -> np.ndarray:
    """Bit vectors (LSB first) of the IEEE-754 half-precision encoding.

    Magnitudes above the binary16 maximum are clamped first, so nothing
    encodes as infinity. Output shape is ``values.shape + (16,)``.
    """
    v = np.clip(np.asarray(values, dtype=np.float64), -FP16_MAX, FP16_MAX)
    raw = v.astype(np.float16).view(np.uint16)
    return ((raw[..., None] >> np.arange(BITS, dtype=np.uint16)) & 1).astype(np.uint8)


def point_features(points: np.ndarray) -> np.ndarray:
    """``(..., N, D_max)`` points to ``(..., N, D_max * 16)`` multi-hot rows."""
    bits = binary16_bits(points)
    return bits.reshape(bits.shape[:-2] + (bits.shape[-2] * BITS,))


# --------------------------------------------------------------------------
# network

class PIEModel:
    """Parameters live in a flat ``name -> Tensor`` dict; the forward pass
    is written functionally on top of it."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.params: dict[str, Tensor] = {}
        self.training = False
        self._rng = np.random.default_rng(seed)
        self._drop_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        self._build()

    # -- parameters --------------------------------------------------------
    def _uniform(self, name, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        self.params[name] = Tensor(self._rng.uniform(-bound, bound, shape).astype(self.dtype), requires_grad=True,
                                   name=name)

    def _const(self, name, shape, value):
        self.params[name] = Tensor(np.full(shape, value, dtype=self.dtype), requires_grad=True, name=name)

    def _linear_params(self, name, n_in, n_out):
        self._uniform(f"{name}.w", (n_in, n_out), n_in)
        self._uniform(f"{name}.b", (n_out,), n_in)

    def _norm_params(self, name, d):
        self._const(f"{name}.g", (d,), 1.0)
        self._const(f"{name}.b", (d,), 0.0)

    def _attn_params(self, name, d):
        for p in ("q", "k", "v", "o"):
            self._linear_params(f"{name}.{p}", d, d)

    def _rff_params(self, name, d):
        for i in range(self.cfg.enc_layers):
            self._linear_params(f"{name}.{i}", d, d)

    def _mab_params(self, name, d):
        self._attn_params(f"{name}.att", d)
        self._norm_params(f"{name}.ln0", d)
        self._rff_params(f"{name}.rff", d)
        self._norm_params(f"{name}.ln1", d)

    def _build(self):
        c = self.cfg
        d = c.d_hid
        self._linear_params("emb.0", D_MAX * BITS, d)
        self._linear_params("emb.1", d, d)
        for i in range(c.n_isab):
            self._uniform(f"isab{i}.ind", (c.n_inducing, d), d)
            self._mab_params(f"isab{i}.mab0", d)
            self._mab_params(f"isab{i}.mab1", d)
        self._uniform("pma.seeds", (c.pma_seeds, d), d)
        self._rff_params("pma.rff", d)
        self._mab_params("pma.mab", d)
        self._uniform("dec.tok", (c.vocab, d), d)
        self._uniform("dec.pos", (c.max_seq_len + 1, d), d)
        for i in range(c.dec_layers):
            self._attn_params(f"dec{i}.self", d)
            self._norm_params(f"dec{i}.ln0", d)
            self._attn_params(f"dec{i}.cross", d)
            self._norm_params(f"dec{i}.ln1", d)
            self._linear_params(f"dec{i}.ff0", d, 4 * d)
            self._linear_params(f"dec{i}.ff1", 4 * d, d)
            self._norm_params(f"dec{i}.ln2", d)
        self._linear_params("out", d, c.vocab)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def zero_output_head(self):
        self.params["out.w"].data[...] = 0
        self.params["out.b"].data[...] = 0

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    # -- building blocks ---------------------------------------------------
    def _linear(self, x, name):
        return x @ self.params[f"{name}.w"] + self.params[f"{name}.b"]

    def _norm(self, x, name):
        return T.layer_norm(x) * self.params[f"{name}.g"] + self.params[f"{name}.b"]

    def _drop(self, x):
        return T.dropout(x, self.cfg.dropout, self.training, self._drop_rng)

    def _attention(self, X, Y, name, heads, mask=None):
        """Multi-head scaled dot-product attention of queries X on keys/values Y.

        ``mask`` (broadcastable to B x h x n x m) marks disallowed pairs.
        """
        B, n, d = X.shape
        m = Y.shape[1]
        dh = d // heads

        def split(t, length):
            return T.transpose(T.reshape(t, (B, length, heads, dh)), (0, 2, 1, 3))

        q = split(self._linear(X, f"{name}.q"), n)
        k = split(self._linear(Y, f"{name}.k"), m)
        v = split(self._linear(Y, f"{name}.v"), m)
        scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        if mask is not None:
            scores = T.mask_fill(scores, mask, NEG_BIG)
        ctx = T.softmax(scores) @ v
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, n, d))
        return self._linear(ctx, f"{name}.o")

    def _rff(self, x, name):
        for i in range(self.cfg.enc_layers):
            x = self._linear(x, f"{name}.{i}")
            if i < self.cfg.enc_layers - 1:
                x = T.relu(x)
        return x

    def _mab(self, X, Y, name):
        h = self._norm(X + self._drop(self._attention(X, Y, f"{name}.att", self.cfg.enc_heads)), f"{name}.ln0")
        return self._norm(h + self._drop(self._rff(h, f"{name}.rff")), f"{name}.ln1")

    def _tile(self, p: Tensor, batch: int) -> Tensor:
        # leading-batch broadcast of a learned set (inducing points, seeds)
        return Tensor(np.zeros((batch,) + p.shape, dtype=self.dtype)) + p

    # -- encoder -----------------------------------------------------------
    def embed_points(self, points: np.ndarray) -> Tensor:
        """``(B, N, D_max)`` points to ``(B, N, d_hid)`` embeddings."""
        feats = Tensor(point_features(points).astype(self.dtype))
        return self._linear(T.relu(self._linear(feats, "emb.0")), "emb.1")

    def encode(self, points: np.ndarray) -> Tensor:
        """``(B, N, D_max)`` points to the ``(B, k, d_hid)`` set summary."""
        points = np.asarray(points)
        if points.ndim == 2:
            points = points[None]
        if points.ndim != 3 or points.shape[-1] != D_MAX:
            raise T.ShapeMismatch(f"points must be (B, N, {D_MAX}), got {points.shape}")
        h = self.embed_points(points)
        B = points.shape[0]
        for i in range(self.cfg.n_isab):
            ind = self._mab(self._tile(self.params[f"isab{i}.ind"], B), h, f"isab{i}.mab0")
            h = self._mab(h, ind, f"isab{i}.mab1")
        seeds = self._tile(self.params["pma.seeds"], B)
        return self._mab(seeds, self._rff(h, "pma.rff"), "pma.mab")

    # -- decoder -----------------------------------------------------------
    def decode(self, tokens: np.ndarray, z: Tensor) -> Tensor:
        """Logits ``(B, L, vocab)`` for every prefix of ``tokens`` (B x L ids)."""
        tokens = np.asarray(tokens)
        B, L = tokens.shape
        if L > self.cfg.max_seq_len + 1:
            raise T.ShapeMismatch(f"sequence length {L} exceeds max_seq_len + 1")
        pos = T.index_select(self.params["dec.pos"], np.arange(L))
        h = self._drop(T.index_select(self.params["dec.tok"], tokens) + pos)
        causal = np.triu(np.ones((L, L), dtype=bool), k=1)
        heads = self.cfg.dec_heads
        for i in range(self.cfg.dec_layers):
            h = self._norm(h + self._drop(self._attention(h, h, f"dec{i}.self", heads, causal)), f"dec{i}.ln0")
            h = self._norm(h + self._drop(self._attention(h, z, f"dec{i}.cross", heads)), f"dec{i}.ln1")
            ff = self._linear(T.relu(self._linear(h, f"dec{i}.ff0")), f"dec{i}.ff1")
            h = self._norm(h + self._drop(ff), f"dec{i}.ln2")
        return self._linear(h, "out")

    def decode_step(self, prefixes: np.ndarray, z: Tensor) -> np.ndarray:
        """Next-token probabilities ``(B, vocab)`` after each prefix."""
        with T.no_grad():
            logits = self.decode(prefixes, z)
            return T.softmax(logits[:, -1, :]).data

    def next_log_probs(self, prefixes: np.ndarray, z: Tensor) -> np.ndarray:
        with T.no_grad():
            return T.log_softmax(self.decode(prefixes, z)[:, -1, :]).data.astype(np.float64)

    def loss(self, points: np.ndarray, targets: np.ndarray) -> Tensor:
        """Mean token CE of ``targets`` (SOS ... EOS PAD*), PAD masked."""
        z = self.encode(points)
        logits = self.decode(targets[:, :-1], z)
        gold = targets[:, 1:]
        mask = (gold != PAD_ID).astype(self.dtype)
        nll = -T.gather_last(T.log_softmax(logits), gold)
        return T.sum(nll * Tensor(mask)) * (1.0 / float(mask.sum()))

    # -- persistence -------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self.params) ^ set(state)
        if missing:
            raise ValueError(f"checkpoint keys differ: {sorted(missing)[:5]}")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise T.ShapeMismatch(f"{k}: checkpoint {arr.shape} vs model {self.params[k].shape}")
            self.params[k].data = arr.astype(self.dtype, copy=True)

    def save(self, path: str | Path, extra: dict | None = None):
        T.save_tensors(path, self.state_dict(), {"config": asdict(self.cfg), **(extra or {})})

    @classmethod
    def load(cls, path: str | Path) -> "PIEModel":
        state, meta = T.load_tensors(path)
        model = cls(ModelConfig.from_dict(meta["config"]))
        model.load_state_dict(state)
        return model.eval()


# --------------------------------------------------------------------------
# training

def encode_target(skeleton_tokens: Sequence[str]) -> list[int]:
    return [SOS_ID] + tokens_to_ids(skeleton_tokens) + [EOS_ID]


def make_batch(samples, max_seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack points and PAD-filled target ids; all samples must share N."""
    ids = [encode_target(s.skeleton_tokens) for s in samples]
    if max(len(t) for t in ids) > max_seq_len + 1:
        raise ValueError("target longer than max_seq_len")
    L = max(len(t) for t in ids)
    targets = np.full((len(ids), L), PAD_ID, dtype=np.int64)
    for r, t in enumerate(ids):
        targets[r, :len(t)] = t
    points = np.stack([s.points for s in samples])
    return points, targets


@dataclass
class TrainConfig:
    epochs: int = 100
    max_steps: int | None = None
    patience: int = 1
    seed: int = 0
    log_every: int = 50


@dataclass
class TrainResult:
    steps: int
    best_val: float
    history: list[tuple[int, float, float | None]]


def evaluate_ce(model: PIEModel, samples, batch_size: int) -> float:
    """Token-weighted CE over ``samples`` with dropout off."""
    was = model.training
    model.eval()
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            points, targets = make_batch(samples[i:i + batch_size], model.cfg.max_seq_len)
            n = int((targets[:, 1:] != PAD_ID).sum())
            total += model.loss(points, targets).item() * n
            count += n
    model.train(was)
    return total / max(count, 1)


def _usable(samples, max_seq_len):
    keep = [s for s in samples if len(s.skeleton_tokens) + 2 <= max_seq_len + 1]
    if len(keep) < len(samples):
        log.warning("dropped %d samples longer than max_seq_len", len(samples) - len(keep))
    return keep


def train(model: PIEModel, train_samples, val_samples, tcfg: TrainConfig = TrainConfig(),
          loss_csv: str | Path | None = None, ckpt: str | Path | None = None) -> TrainResult:
    """Adam on token CE with per-epoch validation and early stopping.

    The best-validation weights are kept (and saved to ``ckpt``). One CSV
    row per optimizer step; ``val_ce`` is filled at validation points.
    """
    if not train_samples:
        raise ValueError("empty training set")
    cfg = model.cfg
    train_samples = _usable(list(train_samples), cfg.max_seq_len)
    val_samples = _usable(list(val_samples), cfg.max_seq_len) if val_samples else []
    rng = np.random.default_rng(tcfg.seed)
    opt = T.Adam(model.parameters(), lr=cfg.lr)
    history: list[tuple[int, float, float | None]] = []
    best_val, best_state, bad_epochs, step = math.inf, None, 0, 0

    fh = open(loss_csv, "w", newline="") if loss_csv else None
    writer = csv.writer(fh, lineterminator="\n") if fh else None
    if writer:
        writer.writerow(["step", "train_ce", "val_ce"])

    def record(train_ce, val_ce):
        history.append((step, train_ce, val_ce))
        if writer:
            writer.writerow([step, repr(train_ce), "" if val_ce is None else repr(val_ce)])

    try:
        done = False
        for epoch in range(tcfg.epochs):
            model.train()
            order = rng.permutation(len(train_samples))
            for i in range(0, len(order), cfg.batch_size):
                batch = [train_samples[j] for j in order[i:i + cfg.batch_size]]
                points, targets = make_batch(batch, cfg.max_seq_len)
                opt.zero_grad()
                loss = model.loss(points, targets)
                loss.backward()
                opt.step()
                step += 1
                last = tcfg.max_steps is not None and step >= tcfg.max_steps
                val = evaluate_ce(model, val_samples, cfg.batch_size) if (last and val_samples) else None
                record(loss.item(), val)
                if tcfg.log_every and step % tcfg.log_every == 0:
                    log.info("epoch %d step %d train_ce %.4f", epoch, step, loss.item())
                if last:
                    done = True
                    break
            if done:
                if val is not None and val < best_val:
                    best_val, best_state = val, {k: v.copy() for k, v in model.state_dict().items()}
                break
            if not val_samples:
                continue
            val = evaluate_ce(model, val_samples, cfg.batch_size)
            history[-1] = (step, history[-1][1], val)
            if writer:
                # rewrite is avoided: validation gets its own row at the same step
                writer.writerow([step, "", repr(val)])
            log.info("epoch %d val_ce %.4f", epoch, val)
            if val < best_val:
                best_val, bad_epochs = val, 0
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
            else:
                bad_epochs += 1
                if bad_epochs >= tcfg.patience:
                    break
    finally:
        if fh:
            fh.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    if ckpt:
        model.save(ckpt, {"steps": step, "best_val": best_val})
    return TrainResult(step, best_val, history)
