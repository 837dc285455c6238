"""Affinity-guided quantization: capture gate-weighted expert inputs and weight the solvers.

Each token routed to an expert carries the router probability of that
(token, expert) pair. The same affinity is attached to the token's input at
all three linears of the expert; the down projection sees the real
intermediate activation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from moeqlab.errors import InputError
from moeqlab.model import ModelWeights, check_tokens, forward_batch
from moeqlab.quant import (
    DEFAULT_AWQ_GRID,
    DEFAULT_DAMPING,
    ActivationBatch,
    AWQResult,
    QuantizedTensor,
    QuantSpec,
    awq_scale_search,
    gptq_quantize,
    quant_loss,
)

LINEARS = ("up", "gate", "down")


@dataclass
class AffinityTrace:
    layer: int
    expert: int  # global index: shared experts first, then routed
    linear: str
    x: np.ndarray  # (tokens, in_dim)
    c: np.ndarray  # (tokens,)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.x.ndim != 2 or self.c.shape != (self.x.shape[0],):
            raise InputError(f"trace rows disagree: x {self.x.shape}, c {self.c.shape}")
        if self.linear not in LINEARS:
            raise InputError(f"unknown linear position {self.linear!r}")

    @property
    def n_tokens(self) -> int:
        return self.x.shape[0]

    def batch(self) -> ActivationBatch:
        return ActivationBatch(self.x, self.c)


TraceKey = tuple[int, int, str]


def capture_calibration(weights: ModelWeights, sequences: Iterable[Sequence[int]]) -> dict[TraceKey, AffinityTrace]:
    """One forward pass per sequence; returns traces keyed by (layer, expert, linear).

    Rows are ordered by (sequence index, position). Every expert gets an
    entry, possibly with zero rows.
    """
    cfg = weights.config
    m = cfg.n_shared
    rows: dict[tuple[int, int], list[np.ndarray]] = {}
    affs: dict[tuple[int, int], list[np.ndarray]] = {}
    for tokens in sequences:
        t = check_tokens(cfg, tokens)
        _, traces = forward_batch(weights, t[None, :])
        for li, lt in enumerate(traces):
            x, probs, topk = lt.inputs[0], lt.probs[0], lt.topk[0]
            for e in range(cfg.n_experts):
                if e < m:
                    sel = np.ones(len(x), dtype=bool)
                else:
                    sel = np.any(topk == e - m, axis=1)
                rows.setdefault((li, e), []).append(x[sel])
                affs.setdefault((li, e), []).append(probs[sel, e])

    out: dict[TraceKey, AffinityTrace] = {}
    for li, layer in enumerate(weights.layers):
        experts = layer.experts
        for e in range(cfg.n_experts):
            xs = rows.get((li, e), [])
            x = np.concatenate(xs) if xs else np.zeros((0, cfg.d_model))
            c = np.concatenate(affs[(li, e)]) if xs else np.zeros(0)
            out[(li, e, "up")] = AffinityTrace(li, e, "up", x, c)
            out[(li, e, "gate")] = AffinityTrace(li, e, "gate", x, c)
            out[(li, e, "down")] = AffinityTrace(li, e, "down", experts[e].intermediate(x), c)
    return out


def affinity_hessian(trace: AffinityTrace) -> np.ndarray:
    """Sum_i c_i x_i x_i^T, formed as the Gram matrix of sqrt(c)-scaled rows."""
    xs = trace.x * np.sqrt(trace.c)[:, None]
    return xs.T @ xs


class AffinityGram:
    """Streaming accumulator for the affinity-weighted Gram matrix."""

    def __init__(self, dim: int):
        self.matrix = np.zeros((dim, dim))
        self.n_tokens = 0

    def update(self, x, c) -> None:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        c = np.atleast_1d(np.asarray(c, dtype=np.float64))
        xs = x * np.sqrt(c)[:, None]
        self.matrix += xs.T @ xs
        self.n_tokens += x.shape[0]


def affinity_loss(w, w_hat, trace: AffinityTrace) -> float:
    """Sum_i c_i ||(w - w_hat) x_i||^2."""
    return quant_loss(w, w_hat, trace.batch())


def agq_gptq(w, trace: AffinityTrace, spec: QuantSpec, damping: float = DEFAULT_DAMPING) -> QuantizedTensor:
    return gptq_quantize(w, affinity_hessian(trace), spec, damping)


def agq_awq(w, trace: AffinityTrace, spec: QuantSpec, grid_size: int = DEFAULT_AWQ_GRID) -> AWQResult:
    return awq_scale_search(w, trace.batch(), spec, grid_size)
