"""Skeleton decoding by beam search, then constant fitting and fitness-based
candidate selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import (EOS_ID, PAD_ID, SOS_ID, Expr, MalformedPrefix, Skeleton, ids_to_tokens, instantiate,
                   parse_prefix, print_prefix)
from .fitness import NEG_INF, ClfemConfig, FitnessResult, data_dims, draw_uniform
from .numopt import AllRestartsDegenerate, BfgsConfig, fit_constants

# (n, t) prefixes -> (n, vocab) next-token log-probabilities
StepFn = Callable[[np.ndarray], np.ndarray]


class NoViableCandidate(RuntimeError):
    pass


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 16
    max_len: int = 48

    def __post_init__(self):
        if self.beam_size < 1 or self.max_len < 1:
            raise ValueError("beam_size and max_len must be >= 1")


@dataclass
class Candidate:
    tokens: list[str]
    log_prob: float
    skeleton: Skeleton | None = None  # None when the tokens do not parse
    constants: list[float] = field(default_factory=list)
    value: float = NEG_INF
    result: FitnessResult | None = None
    error: str | None = None

    @property
    def expr(self) -> Expr | None:
        if self.skeleton is None or self.error:
            return None
        return instantiate(self.skeleton, self.constants)

    def to_dict(self) -> dict:
        e = self.expr
        return {
            "skeleton": list(self.tokens),
            "expr_prefix": print_prefix(e) if e is not None else None,
            "constants": list(self.constants),
            "fitness": self.value if math.isfinite(self.value) else None,
            "log_prob": self.log_prob,
            "error": self.error,
        }


def beam_search(step_fn: StepFn, cfg: BeamConfig = BeamConfig()) -> list[tuple[list[int], float]]:
    """Top ``beam_size`` sequences by total log-probability.

    Sequences exclude SOS; a finished sequence ends with EOS or reaches
    ``max_len`` tokens. Each step ranks every one-token extension of the
    live beams and keeps the best ``beam_size``; extensions that finish
    leave the beam. Search stops once no live prefix can beat the current
    ``beam_size``-th finished score (scores only decrease). Ties break on
    the token sequence, so results are deterministic.
    """
    alive: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    k = cfg.beam_size
    for t in range(cfg.max_len):
        if not alive:
            break
        prefixes = np.array([[SOS_ID] + seq for seq, _ in alive], dtype=np.int64)
        logp = np.asarray(step_fn(prefixes), dtype=np.float64)
        logp[:, PAD_ID] = -np.inf
        logp[:, SOS_ID] = -np.inf
        scores = np.array([s for _, s in alive])[:, None] + logp
        flat = np.flatnonzero(np.isfinite(scores.ravel()))
        cands = [(float(scores.flat[i]), alive[i // logp.shape[1]][0] + [int(i % logp.shape[1])]) for i in flat]
        cands.sort(key=lambda c: (-c[0], c[1]))
        alive = []
        for score, seq in cands[:k]:
            if seq[-1] == EOS_ID or len(seq) == cfg.max_len:
                finished.append((seq, score))
            else:
                alive.append((seq, score))
        finished.sort(key=lambda c: (-c[1], c[0]))
        finished = finished[:k]
        if len(finished) == k and alive and alive[0][1] < finished[-1][1]:
            break
    return finished


def model_step_fn(model, points: np.ndarray) -> StepFn:
    """Bind an encoded point set to the model's next-token distribution."""
    from .tensor import Tensor, no_grad

    with no_grad():
        z = model.encode(np.asarray(points)[None])

    def step(prefixes):
        zz = Tensor(np.broadcast_to(z.data, (len(prefixes),) + z.shape[1:]).copy())
        return model.next_log_probs(prefixes, zz)

    return step


def _tokens_of(seq: Sequence[int]) -> list[str]:
    body = list(seq[:-1]) if seq and seq[-1] == EOS_ID else list(seq)
    return ids_to_tokens(body)


def _select_key(c: Candidate):
    return (-c.value, len(c.tokens), -c.log_prob, c.tokens)


def score_candidates(sequences: Sequence[tuple[Sequence[int] | Sequence[str], float]], points: np.ndarray,
                     clfem_cfg: ClfemConfig = ClfemConfig(), bfgs_cfg: BfgsConfig = BfgsConfig(),
                     rng: np.random.Generator | None = None, fitness: str = "clfem") -> list[Candidate]:
    """Parse, fit constants and score decoded sequences.

    Sequences may be id lists (as returned by beam search) or token lists.
    All candidates share one pinned stochastic dataset. Returned best first:
    fitness descending, then shorter, then more probable.
    """
    if rng is None:
        rng = np.random.default_rng(clfem_cfg.rng_seed)
    points = np.asarray(points, dtype=np.float64)
    noise = draw_uniform(points.shape, clfem_cfg, rng)
    out = []
    seen = set()
    for seq, logp in sequences:
        tokens = _tokens_of(seq) if seq and not isinstance(seq[0], str) else list(seq)
        key = tuple(tokens)
        if key in seen:
            continue
        seen.add(key)
        cand = Candidate(tokens, float(logp))
        try:
            parsed = parse_prefix(tokens)
            skel = parsed if isinstance(parsed, Skeleton) else Skeleton(parsed)
        except (MalformedPrefix, ValueError) as exc:
            cand.error = f"parse: {exc}"
            out.append(cand)
            continue
        cand.skeleton = skel
        try:
            consts, res = fit_constants(skel, points, clfem_cfg, bfgs_cfg, rng, fitness=fitness, noise=noise)
            cand.constants, cand.result, cand.value = list(consts), res, res.value
        except AllRestartsDegenerate as exc:
            cand.error = f"degenerate: {exc}"
        out.append(cand)
    out.sort(key=_select_key)
    return out


def select_best(candidates: list[Candidate]) -> Candidate:
    viable = [c for c in candidates if c.error is None and c.value > NEG_INF]
    if not viable:
        raise NoViableCandidate(f"none of {len(candidates)} candidates parsed to a non-degenerate equation")
    return min(viable, key=_select_key)


@dataclass
class Discovery:
    best: Candidate
    candidates: list[Candidate]

    @property
    def expr(self) -> Expr:
        return self.best.expr

    def to_dict(self) -> dict:
        b = self.best.to_dict()
        return {
            "expr_prefix": b["expr_prefix"],
            "skeleton": b["skeleton"],
            "constants": b["constants"],
            "clfem": b["fitness"],
            "log_prob": b["log_prob"],
            "all_candidates": [c.to_dict() for c in self.candidates],
        }


def discover(points: np.ndarray, model, beam_cfg: BeamConfig = BeamConfig(),
             clfem_cfg: ClfemConfig = ClfemConfig(), bfgs_cfg: BfgsConfig = BfgsConfig(),
             rng: np.random.Generator | None = None, fitness: str = "clfem",
             extra: Sequence[tuple[Sequence[str], float]] = ()) -> Discovery:
    """Decode skeleton candidates for ``points`` and return the fittest.

    ``extra`` appends hand-supplied (tokens, log_prob) candidates to the beam.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or not data_dims(points):
        raise ValueError("points must be an N x D_max matrix with a non-zero column")
    seqs = beam_search(model_step_fn(model, points), beam_cfg)
    cands = score_candidates(list(seqs) + list(extra), points, clfem_cfg, bfgs_cfg, rng, fitness)
    return Discovery(select_best(cands), cands)
