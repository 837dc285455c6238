"""Expert-balanced self-sampling of calibration sequences.

A width-``w`` branch search over the model's own next-token distribution.
Each candidate extension ``S || v`` is scored by the average negative
log-probability of the extended sequence plus ``sigma(S) / tau``, where
``sigma(S)`` is the routed-expert imbalance of the prefix ``S`` alone. The
candidate token's own routing is never evaluated during pruning; it is
folded into the branch counters by the next forward pass, which is needed
anyway to score that branch's following extension.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from moeqlab.errors import ConfigError
from moeqlab.model import (
    ModelWeights,
    forward_batch,
    log_softmax,
    model_forward,
    sequence_nll,
    stats_from_counts,
    usage_counts,
)

log = logging.getLogger(__name__)

BOS_TOKEN = 0
DEFAULT_TAU = 1.2
DEFAULT_WIDTH = 4


@dataclass(frozen=True)
class EBSSConfig:
    w: int = DEFAULT_WIDTH
    target_len: int = 32
    n_sequences: int = 16
    tau: float = DEFAULT_TAU
    seed: int = 0

    def __post_init__(self):
        if self.w < 1:
            raise ConfigError("w must be >= 1")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if self.target_len < 2:
            raise ConfigError("target_len must be >= 2")
        if self.n_sequences < 1:
            raise ConfigError("n_sequences must be >= 1")


def counts_sigma(counts: np.ndarray) -> float:
    """Imbalance of per-layer routed counts; 0 before any token is committed."""
    if np.any(counts.sum(axis=1) == 0):
        return 0.0
    return stats_from_counts(counts).sigma


@dataclass
class Branch:
    tokens: tuple[int, ...]
    r_s: float
    usage_counters: np.ndarray  # (L, n_routed); routing of committed tokens only
    cached_sigma: float = 0.0

    @classmethod
    def seed(cls, token: int, n_layers: int, n_routed: int) -> "Branch":
        return cls((int(token),), 0.0, np.zeros((n_layers, n_routed), dtype=np.int64), 0.0)

    def commit_routing(self, topk_per_layer: np.ndarray) -> None:
        """Fold one token's routed selections, shape (L, k), into the counters."""
        for li, sel in enumerate(topk_per_layer):
            np.add.at(self.usage_counters[li], sel, 1)
        self.cached_sigma = counts_sigma(self.usage_counters)

    def extend(self, token: int, logp: float) -> "Branch":
        return Branch(self.tokens + (int(token),), extend_logprob(self, logp),
                      self.usage_counters.copy(), self.cached_sigma)


def extend_logprob(branch: Branch, logp_v: float) -> float:
    return branch.r_s + logp_v


def extension_ppl(branch: Branch, logp_v: float) -> float:
    return math.exp(-(branch.r_s + logp_v) / (len(branch.tokens) + 1))


def score_candidate(branch: Branch, logp_v, tau: float):
    """Average NLL of ``branch || v`` plus the prefix imbalance over ``tau``.

    ``logp_v`` may be a scalar or an array over candidate tokens.
    """
    if not tau > 0:
        raise ConfigError("tau must be > 0")
    return -(branch.r_s + logp_v) / (len(branch.tokens) + 1) + branch.cached_sigma / tau


class Candidate(NamedTuple):
    parent: int
    token: int
    score: float


class PruneResult(NamedTuple):
    selected: list[Candidate]
    short: bool  # fewer candidates than w were offered


def _lowest(parent: np.ndarray, token: np.ndarray, score: np.ndarray, w: int) -> np.ndarray:
    # lexsort sorts by the last key first
    return np.lexsort((parent, token, score))[:w]


def prune_topw(candidates: Sequence[Candidate], w: int) -> PruneResult:
    """Keep the ``w`` lowest-scoring candidates; ties go to the lower token, then lower parent."""
    if not candidates:
        return PruneResult([], True)
    parent = np.array([c[0] for c in candidates])
    token = np.array([c[1] for c in candidates])
    score = np.array([c[2] for c in candidates], dtype=np.float64)
    short = len(candidates) < w
    if short:
        log.warning("only %d candidates for width %d", len(candidates), w)
    idx = _lowest(parent, token, score, w)
    return PruneResult([Candidate(int(parent[i]), int(token[i]), float(score[i])) for i in idx], short)


@dataclass
class SearchStats:
    forward_passes: list[int] = field(default_factory=list)  # per search
    seed_passes: int = 0

    @property
    def total_passes(self) -> int:
        return sum(self.forward_passes) + self.seed_passes


@dataclass
class CalibrationSet:
    sequences: list[list[int]]
    provenance: EBSSConfig | str
    sigma: float | None = None
    mean_ppl: float | None = None
    stats: SearchStats | None = None
    branches: list[Branch] | None = None


def first_token_distribution(weights: ModelWeights) -> np.ndarray:
    logp, _ = model_forward(weights, [BOS_TOKEN])
    p = np.exp(logp[-1])
    return p / p.sum()


def run_search(weights: ModelWeights, seeds: Sequence[int], target_len: int, tau: float) -> tuple[list[Branch], int]:
    """One width-``len(seeds)`` search. Returns final branches (best first) and its pass count."""
    cfg = weights.config
    if target_len > cfg.max_seq_len:
        raise ConfigError(f"target_len {target_len} exceeds max_seq_len {cfg.max_seq_len}")
    w = len(seeds)
    branches = [Branch.seed(s, cfg.n_layers, cfg.n_routed) for s in seeds]
    passes = 0
    V = cfg.vocab_size
    token_ids = np.arange(V)
    while True:
        logits, traces = forward_batch(weights, np.array([b.tokens for b in branches]))
        passes += len(branches)
        last = np.stack([lt.topk[:, -1, :] for lt in traces], axis=1)  # (B, L, k)
        for b, sel in zip(branches, last):
            b.commit_routing(sel)
        if len(branches[0].tokens) == target_len:
            return branches, passes
        logp = log_softmax(logits[:, -1, :])
        scores = np.stack([score_candidate(b, logp[i], tau) for i, b in enumerate(branches)])
        parent = np.repeat(np.arange(len(branches)), V)
        token = np.tile(token_ids, len(branches))
        idx = _lowest(parent, token, scores.ravel(), w)
        branches = [branches[parent[i]].extend(token[i], logp[parent[i], token[i]]) for i in idx]


def ebss_generate(weights: ModelWeights, config: EBSSConfig) -> CalibrationSet:
    cfg = weights.config
    if cfg.vocab_size < config.w:
        raise ConfigError(f"vocab_size {cfg.vocab_size} is smaller than width {config.w}")
    rng = np.random.default_rng(config.seed)
    p0 = first_token_distribution(weights)
    stats = SearchStats(seed_passes=1)
    n_searches = math.ceil(config.n_sequences / config.w)
    finals: list[Branch] = []
    for _ in range(n_searches):
        seeds = rng.choice(cfg.vocab_size, size=config.w, replace=False, p=p0)
        branches, passes = run_search(weights, seeds, config.target_len, config.tau)
        stats.forward_passes.append(passes)
        finals.extend(branches)
    finals = finals[:config.n_sequences]
    counts = sum(b.usage_counters for b in finals)
    ppl = [math.exp(-b.r_s / (len(b.tokens) - 1)) for b in finals]
    return CalibrationSet(
        sequences=[list(b.tokens) for b in finals],
        provenance=config,
        sigma=stats_from_counts(counts).sigma,
        mean_ppl=float(np.mean(ppl)),
        stats=stats,
        branches=finals,
    )


def summarize(weights: ModelWeights, sequences: Sequence[Sequence[int]]) -> tuple[float, float]:
    """(sigma, mean PPL) of a token-sequence set, measured by forward passes."""
    counts = np.zeros((weights.config.n_layers, weights.config.n_routed), dtype=np.int64)
    ppl = []
    for seq in sequences:
        logp, trace = model_forward(weights, seq)
        counts += usage_counts(trace, weights.config.n_routed)
        if len(seq) >= 2:
            ppl.append(math.exp(np.mean(sequence_nll(logp, seq))))
    return stats_from_counts(counts).sigma, float(np.mean(ppl)) if ppl else float("nan")


def random_calibration(vocab_size: int, n_sequences: int, length: int, seed: int) -> list[list[int]]:
    """Uniform random token sequences, the data-free baseline calibration source."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab_size, size=(n_sequences, length)).tolist()


def sample_sequences(weights: ModelWeights, n_sequences: int, length: int, seed: int) -> list[list[int]]:
    """Ancestral samples from the model, starting after the begin-of-sequence token."""
    rng = np.random.default_rng(seed)
    p0 = first_token_distribution(weights)
    toks = rng.choice(weights.config.vocab_size, size=(n_sequences, 1), p=p0)
    while toks.shape[1] < length:
        logits, _ = forward_batch(weights, toks)
        p = np.exp(log_softmax(logits[:, -1, :]))
        u = rng.random((n_sequences, 1))
        nxt = np.minimum((p.cumsum(axis=1) < u).sum(axis=1), weights.config.vocab_size - 1)
        toks = np.concatenate([toks, nxt[:, None]], axis=1)
    return toks.tolist()
