"""Quantize a model's expert linears and measure the result.

Only expert FFN weights are quantized. Attention, norms, embedding, router
and head stay in full precision.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from moeqlab.agq import LINEARS, AffinityTrace, affinity_hessian, affinity_loss, capture_calibration
from moeqlab.errors import ConfigError, FactorizationError
from moeqlab.formats import QuantizedModel, QuantRecord
from moeqlab.ebss import summarize
from moeqlab.model import ModelWeights, forward_batch, log_softmax, sequence_nll
from moeqlab.quant import (
    DEFAULT_AWQ_GRID,
    DEFAULT_DAMPING,
    ActivationBatch,
    QuantSpec,
    awq_scale_search,
    gptq_quantize,
    hadamard_transform,
    is_power_of_two,
    quant_loss,
    rtn_quantize,
)

log = logging.getLogger(__name__)

METHODS = ("rtn", "gptq", "awq")
DAMPING_RETRIES = 3  # each retry multiplies the damping by 10


@dataclass(frozen=True)
class QuantOptions:
    method: str = "gptq"
    bits: int = 4
    agq: bool = False
    hadamard: bool = False
    damping: float = DEFAULT_DAMPING
    awq_grid: int = DEFAULT_AWQ_GRID

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.damping > 0:
            raise ConfigError("damping must be > 0")
        if self.awq_grid < 1:
            raise ConfigError("awq_grid must be >= 1")
        try:
            QuantSpec(self.bits)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def spec(self) -> QuantSpec:
        return QuantSpec(self.bits)

    @property
    def needs_calibration(self) -> bool:
        return self.method != "rtn" or self.agq


def expert_name(layer: int, expert: int, n_shared: int, linear: str) -> str:
    kind, idx = ("shared", expert) if expert < n_shared else ("routed", expert - n_shared)
    return f"layers.{layer}.{kind}.{idx}.{linear}"


def expert_weight(weights: ModelWeights, layer: int, expert: int, linear: str) -> np.ndarray:
    """Weight of one expert linear in (out, in) orientation."""
    ffn = weights.layers[layer].experts[expert]
    return ffn.linears()[linear].T


def check_hadamard(weights: ModelWeights) -> None:
    cfg = weights.config
    for dim in (cfg.d_model, cfg.d_ff):
        if not is_power_of_two(dim):
            raise ConfigError(f"hadamard needs power-of-two expert input dims, got {dim}")


def _gptq_with_retry(w, h, spec: QuantSpec, damping: float):
    for attempt in range(DAMPING_RETRIES + 1):
        try:
            return gptq_quantize(w, h, spec, damping * 10 ** attempt)
        except FactorizationError:
            if attempt == DAMPING_RETRIES:
                raise
            log.warning("Hessian not positive definite; retrying with damping %g", damping * 10 ** (attempt + 1))


def quantize_linear(w: np.ndarray, trace: AffinityTrace | None, opts: QuantOptions) -> QuantRecord:
    """Quantize one (out, in) weight against its captured inputs."""
    spec = opts.spec
    x = c = None
    if trace is not None:
        x, c = trace.x, trace.c
    if opts.hadamard:
        w = hadamard_transform(w)
        if x is not None:
            x = hadamard_transform(x) if len(x) else x
    if opts.method == "rtn":
        return QuantRecord(rtn_quantize(w, spec), None, opts.hadamard)
    if x is None:
        raise ConfigError(f"method {opts.method} needs calibration data")
    if opts.method == "gptq":
        h = affinity_hessian(AffinityTrace(trace.layer, trace.expert, trace.linear, x, c)) if opts.agq else x.T @ x
        return QuantRecord(_gptq_with_retry(w, h, spec, opts.damping), None, opts.hadamard)
    if len(x) == 0:
        # no routed tokens: nothing to search over
        return QuantRecord(rtn_quantize(w, spec), np.ones(w.shape[1]), opts.hadamard)
    res = awq_scale_search(w, ActivationBatch(x, c if opts.agq else None), spec, opts.awq_grid)
    return QuantRecord(res.tensor, res.scales, opts.hadamard)


def quantize_model(weights: ModelWeights, calibration: Sequence[Sequence[int]] | None,
                   opts: QuantOptions) -> QuantizedModel:
    cfg = weights.config
    if opts.hadamard:
        check_hadamard(weights)
    traces = None
    if opts.needs_calibration:
        if not calibration:
            raise ConfigError(f"method {opts.method} (agq={opts.agq}) needs a calibration source")
        traces = capture_calibration(weights, calibration)
    qm = QuantizedModel(cfg, opts.spec)
    for name, t in weights.named_tensors():
        qm.tensors[name] = t
    for li in range(cfg.n_layers):
        for e in range(cfg.n_experts):
            for lin in LINEARS:
                name = expert_name(li, e, cfg.n_shared, lin)
                trace = traces[(li, e, lin)] if traces is not None else None
                qm.records[name] = quantize_linear(expert_weight(weights, li, e, lin), trace, opts)
                del qm.tensors[name]
    return qm


def _logits(weights: ModelWeights, corpus: Sequence[Sequence[int]]) -> list[np.ndarray]:
    return [forward_batch(weights, np.asarray(seq)[None, :])[0][0] for seq in corpus]


def corpus_perplexity(weights: ModelWeights, corpus: Sequence[Sequence[int]]) -> float:
    """exp of the mean NLL over every scored token of the corpus."""
    nll = [sequence_nll(log_softmax(z), seq) for z, seq in zip(_logits(weights, corpus), corpus)]
    return math.exp(float(np.mean(np.concatenate(nll))))


def logit_mse(reference: ModelWeights, other: ModelWeights, corpus: Sequence[Sequence[int]]) -> float:
    """Mean squared difference of raw output logits over all positions and vocabulary entries."""
    a = np.concatenate(_logits(reference, corpus))
    b = np.concatenate(_logits(other, corpus))
    return float(np.mean((a - b) ** 2))


def expert_losses(weights: ModelWeights, deq: ModelWeights, corpus: Sequence[Sequence[int]]) -> list[dict]:
    """Plain and affinity-weighted reconstruction loss of every expert linear on the corpus inputs."""
    cfg = weights.config
    traces = capture_calibration(weights, corpus)
    rows = []
    for (li, e, lin), tr in sorted(traces.items()):
        w = expert_weight(weights, li, e, lin)
        w_hat = expert_weight(deq, li, e, lin)
        plain = quant_loss(w, w_hat, tr.x) if tr.n_tokens else 0.0
        weighted = affinity_loss(w, w_hat, tr) if tr.n_tokens else 0.0
        rows.append({"layer": li, "expert": e, "linear": lin, "tokens": tr.n_tokens,
                     "loss": plain, "affinity_loss": weighted})
    return rows


def routing_sigma(weights: ModelWeights, corpus: Sequence[Sequence[int]]) -> float:
    return summarize(weights, corpus)[0]
