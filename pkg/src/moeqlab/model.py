"""Tiny MoE transformer: forging, routing, forward passes and usage statistics.

Block layout per layer::

    h = h + attn(rmsnorm(h) * norm1)
    h = h + moe(rmsnorm(h) * norm2)

followed by a linear output head and log-softmax. Attention is single-head,
causal, with a rotary phase on queries and keys.

The router softmax spans all ``n_shared + n_routed`` experts, shared experts
first. Shared experts always fire; the ``top_k`` routed experts with the
largest probability fire as well. Every expert output is weighted by its raw
softmax probability (no renormalisation over the selected set).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from moeqlab.errors import ConfigError, InputError

RMS_EPS = 1e-6
ROPE_BASE = 10000.0

# forge init constants
EMBED_OFFSET = 1.0
ATTN_SCALE = 0.5
HEAD_SCALE = 0.5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    d_ff: int
    n_shared: int
    n_routed: int
    top_k: int
    max_seq_len: int

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "d_ff", "n_shared",
                     "n_routed", "top_k", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if min(self.d_model, self.d_ff, self.n_layers, self.max_seq_len) < 1:
            raise ConfigError("d_model, d_ff, n_layers and max_seq_len must be >= 1")
        if self.n_shared < 0:
            raise ConfigError("n_shared must be >= 0")
        if self.n_routed < 1:
            raise ConfigError("n_routed must be >= 1")
        if not 1 <= self.top_k <= self.n_routed:
            raise ConfigError(f"top_k must lie in [1, n_routed={self.n_routed}], got {self.top_k}")

    @property
    def n_experts(self) -> int:
        return self.n_shared + self.n_routed

    def to_dict(self) -> dict:
        return {k: int(getattr(self, k)) for k in self.__dataclass_fields__}


def silu(z: np.ndarray) -> np.ndarray:
    return z / (1.0 + np.exp(-z))


@dataclass
class ExpertFFN:
    w_up: np.ndarray    # d_model x d_ff
    w_gate: np.ndarray  # d_model x d_ff
    w_down: np.ndarray  # d_ff x d_model

    def intermediate(self, x: np.ndarray) -> np.ndarray:
        """Input of the down projection: ``(x W_up) * silu(x W_gate)``."""
        return (x @ self.w_up) * silu(x @ self.w_gate)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.intermediate(x) @ self.w_down

    def linears(self) -> dict[str, np.ndarray]:
        return {"up": self.w_up, "gate": self.w_gate, "down": self.w_down}


@dataclass
class LayerWeights:
    norm1: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    norm2: np.ndarray
    router: np.ndarray  # d_model x (n_shared + n_routed)
    shared: list[ExpertFFN]
    routed: list[ExpertFFN]
    _stack: tuple | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def experts(self) -> list[ExpertFFN]:
        return list(self.shared) + list(self.routed)

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self._stack is None:
            ex = self.experts
            self._stack = (
                np.stack([e.w_up for e in ex]),
                np.stack([e.w_gate for e in ex]),
                np.stack([e.w_down for e in ex]),
            )
        return self._stack


@dataclass
class ModelWeights:
    config: ModelConfig
    token_embedding: np.ndarray  # vocab x d_model
    layers: list[LayerWeights]
    head: np.ndarray  # d_model x vocab

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """All tensors in the fixed serialisation order."""
        yield "embedding", self.token_embedding
        for li, layer in enumerate(self.layers):
            p = f"layers.{li}."
            yield p + "norm1", layer.norm1
            yield p + "q", layer.wq
            yield p + "k", layer.wk
            yield p + "v", layer.wv
            yield p + "o", layer.wo
            yield p + "norm2", layer.norm2
            yield p + "router", layer.router
            for kind, group in (("shared", layer.shared), ("routed", layer.routed)):
                for ei, expert in enumerate(group):
                    for lin, w in expert.linears().items():
                        yield f"{p}{kind}.{ei}.{lin}", w
        yield "head", self.head

    def validate(self) -> None:
        for (name, t), (_, shape) in zip(self.named_tensors(), _tensor_layout(self.config)):
            if t.shape != shape:
                raise InputError(f"tensor {name} has shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise InputError(f"tensor {name} has non-finite entries")


def _tensor_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.d_ff
    out = [("embedding", (cfg.vocab_size, d))]
    for li in range(cfg.n_layers):
        p = f"layers.{li}."
        out += [(p + "norm1", (d,)), (p + "q", (d, d)), (p + "k", (d, d)),
                (p + "v", (d, d)), (p + "o", (d, d)), (p + "norm2", (d,)),
                (p + "router", (d, cfg.n_experts))]
        for kind, count in (("shared", cfg.n_shared), ("routed", cfg.n_routed)):
            for ei in range(count):
                out += [(f"{p}{kind}.{ei}.up", (d, f)), (f"{p}{kind}.{ei}.gate", (d, f)),
                        (f"{p}{kind}.{ei}.down", (f, d))]
    out.append(("head", (d, cfg.vocab_size)))
    return out


def tensor_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every tensor, in serialisation order."""
    return _tensor_layout(cfg)


def build_weights(cfg: ModelConfig, tensors: Sequence[np.ndarray]) -> ModelWeights:
    """Assemble :class:`ModelWeights` from tensors listed in serialisation order."""
    it = iter(tensors)
    emb = next(it)
    layers = []
    for _ in range(cfg.n_layers):
        norm1, wq, wk, wv, wo, norm2, router = (next(it) for _ in range(7))
        shared = [ExpertFFN(next(it), next(it), next(it)) for _ in range(cfg.n_shared)]
        routed = [ExpertFFN(next(it), next(it), next(it)) for _ in range(cfg.n_routed)]
        layers.append(LayerWeights(norm1, wq, wk, wv, wo, norm2, router, shared, routed))
    head = next(it)
    w = ModelWeights(cfg, emb, layers, head)
    w.validate()
    return w


def _f32(a: np.ndarray) -> np.ndarray:
    # weights are born float32-representable so the file format round-trips exactly
    return a.astype(np.float32).astype(np.float64)


def forge_model(config: ModelConfig, seed: int, router_skew: float = 0.0) -> ModelWeights:
    """Draw a random model. Deterministic in ``(config, seed, router_skew)``.

    Token embeddings share a common offset along a hidden unit direction
    ``u``. Router columns are drawn orthogonal to ``u``, so with
    ``router_skew == 0`` no expert is systematically favoured. A skew adds
    ``router_skew * ramp[e] * u`` to routed column ``e`` (ramp running from
    -1 to 1), which acts as a per-expert bias for the typical token and
    tilts traffic towards the high-ramp experts.
    """
    if router_skew < 0:
        raise ConfigError("router_skew must be >= 0")
    cfg = config
    rng = np.random.default_rng(seed)
    d, f, m, n = cfg.d_model, cfg.d_ff, cfg.n_shared, cfg.n_routed

    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    emb = rng.standard_normal((cfg.vocab_size, d)) + EMBED_OFFSET * u

    def expert() -> ExpertFFN:
        return ExpertFFN(
            _f32(rng.standard_normal((d, f)) / np.sqrt(d)),
            _f32(rng.standard_normal((d, f)) / np.sqrt(d)),
            _f32(rng.standard_normal((f, d)) / np.sqrt(f)),
        )

    ramp = np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
    layers = []
    for _ in range(cfg.n_layers):
        wq, wk, wv, wo = (_f32(ATTN_SCALE * rng.standard_normal((d, d)) / np.sqrt(d))
                          for _ in range(4))
        router = rng.standard_normal((d, m + n))
        router -= np.outer(u, u @ router)
        router[:, m:] += router_skew * np.outer(u, ramp)
        shared = [expert() for _ in range(m)]
        routed = [expert() for _ in range(n)]
        layers.append(LayerWeights(np.ones(d), wq, wk, wv, wo, np.ones(d),
                                   _f32(router), shared, routed))
    head = HEAD_SCALE * rng.standard_normal((d, cfg.vocab_size)) / np.sqrt(d)
    return ModelWeights(cfg, _f32(emb), layers, _f32(head))


# --- forward pass -----------------------------------------------------------

def rms_norm(h: np.ndarray, gain: np.ndarray) -> np.ndarray:
    return h / np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + RMS_EPS) * gain


def _rotary(x: np.ndarray) -> np.ndarray:
    """Rotate consecutive channel pairs by a position-dependent phase. x: (B, T, d)."""
    T, d = x.shape[-2], x.shape[-1]
    half = d // 2
    if half == 0:
        return x
    freqs = ROPE_BASE ** (-np.arange(half) / half)
    ang = np.arange(T)[:, None] * freqs[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    out = x.copy()
    a, b = x[..., 0:2 * half:2], x[..., 1:2 * half:2]
    out[..., 0:2 * half:2] = a * cos - b * sin
    out[..., 1:2 * half:2] = a * sin + b * cos
    return out


def _attention(layer: LayerWeights, x: np.ndarray) -> np.ndarray:
    T, d = x.shape[-2], x.shape[-1]
    q = _rotary(x @ layer.wq)
    k = _rotary(x @ layer.wk)
    v = x @ layer.wv
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(d)
    scores = np.where(np.tril(np.ones((T, T), dtype=bool)), scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    att = np.exp(scores)
    att /= att.sum(axis=-1, keepdims=True)
    return (att @ v) @ layer.wo


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def gate(weights: ModelWeights, layer: int, x: np.ndarray) -> np.ndarray:
    """Router probabilities over all experts (shared first) for input(s) ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != weights.config.d_model:
        raise InputError(f"expected {weights.config.d_model} input features, got {x.shape[-1]}")
    return softmax(x @ weights.layers[layer].router)


def select_topk(routed_probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest routed probabilities; ties go to the lower index."""
    return np.argsort(-routed_probs, axis=-1, kind="stable")[..., :k]


def _moe(layer: LayerWeights, cfg: ModelConfig, x: np.ndarray):
    """x: (N, d) -> (y (N, d), probs (N, E), topk (N, k))."""
    m = cfg.n_shared
    probs = softmax(x @ layer.router)
    topk = select_topk(probs[:, m:], cfg.top_k)
    mix = np.zeros_like(probs)
    mix[:, :m] = probs[:, :m]
    rows = np.arange(x.shape[0])[:, None]
    mix[rows, m + topk] = probs[rows, m + topk]
    up, gt, down = layer.stacked()
    hidden = (x @ up) * silu(x @ gt)  # (E, N, d_ff)
    y = np.sum((hidden @ down) * mix.T[:, :, None], axis=0)
    return y, probs, topk


@dataclass
class MoEStep:
    """Routing record of one token through one MoE layer."""
    topk: np.ndarray   # (k,) routed expert indices, 0-based within the routed set
    probs: np.ndarray  # (n_shared + n_routed,) router probabilities
    x: np.ndarray      # (d_model,) expert input

    def selected_probs(self, n_shared: int) -> np.ndarray:
        return self.probs[n_shared + self.topk]


def moe_forward(weights: ModelWeights, layer: int, x: np.ndarray) -> tuple[np.ndarray, MoEStep]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (weights.config.d_model,):
        raise InputError(f"expected a vector of {weights.config.d_model} entries, got {x.shape}")
    y, probs, topk = _moe(weights.layers[layer], weights.config, x[None, :])
    return y[0], MoEStep(topk[0], probs[0], x.copy())


@dataclass
class LayerTrace:
    topk: np.ndarray    # (T, k)
    probs: np.ndarray   # (T, E)
    inputs: np.ndarray  # (T, d)


@dataclass
class RoutingTrace:
    layers: list[LayerTrace]

    @property
    def n_tokens(self) -> int:
        return self.layers[0].topk.shape[0] if self.layers else 0

    def step(self, layer: int, position: int) -> MoEStep:
        lt = self.layers[layer]
        return MoEStep(lt.topk[position], lt.probs[position], lt.inputs[position])


def check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    t = np.asarray(tokens)
    if t.size and not np.issubdtype(t.dtype, np.integer):
        raise InputError("token ids must be integers")
    t = t.astype(np.int64)
    if t.shape[-1] < 1 or t.shape[-1] > cfg.max_seq_len:
        raise InputError(f"sequence length must lie in [1, {cfg.max_seq_len}], got {t.shape[-1]}")
    if np.any(t < 0) or np.any(t >= cfg.vocab_size):
        bad = t[(t < 0) | (t >= cfg.vocab_size)].flat[0]
        raise InputError(f"token id {bad} outside vocabulary of size {cfg.vocab_size}")
    return t


def forward_batch(weights: ModelWeights, tokens) -> tuple[np.ndarray, list[LayerTrace]]:
    """Logits for a batch of equal-length sequences.

    Returns ``(logits (B, T, V), per-layer traces with leading (B, T) axes)``.
    """
    cfg = weights.config
    t = check_tokens(cfg, tokens)
    if t.ndim != 2:
        raise InputError("forward_batch expects a (batch, length) array")
    B, T = t.shape
    h = weights.token_embedding[t]
    traces = []
    for layer in weights.layers:
        h = h + _attention(layer, rms_norm(h, layer.norm1))
        x = rms_norm(h, layer.norm2).reshape(B * T, cfg.d_model)
        y, probs, topk = _moe(layer, cfg, x)
        h = h + y.reshape(B, T, cfg.d_model)
        traces.append(LayerTrace(topk.reshape(B, T, -1), probs.reshape(B, T, -1),
                                 x.reshape(B, T, -1)))
    return h @ weights.head, traces


def model_forward(weights: ModelWeights, tokens) -> tuple[np.ndarray, RoutingTrace]:
    """Next-token log-probabilities ``(T, V)`` for one sequence, plus its routing trace."""
    t = check_tokens(weights.config, tokens)
    if t.ndim != 1:
        raise InputError("model_forward expects a 1-D token sequence")
    logits, traces = forward_batch(weights, t[None, :])
    trace = RoutingTrace([LayerTrace(lt.topk[0], lt.probs[0], lt.inputs[0]) for lt in traces])
    return log_softmax(logits[0]), trace


def sequence_nll(logprobs: np.ndarray, tokens) -> np.ndarray:
    """Per-position negative log-likelihood of tokens[1:] under logprobs[:-1]."""
    tokens = np.asarray(tokens)
    return -logprobs[np.arange(len(tokens) - 1), tokens[1:]]


def perplexity_from_logprobs(logprobs: np.ndarray, tokens) -> float:
    if len(tokens) < 2:
        raise InputError("perplexity needs at least two tokens")
    return float(np.exp(np.mean(sequence_nll(logprobs, tokens))))


def perplexity(weights: ModelWeights, tokens) -> float:
    """exp of the mean NLL over positions 2..N; the first token only conditions."""
    tokens = check_tokens(weights.config, tokens)
    if tokens.ndim != 1 or len(tokens) < 2:
        raise InputError("perplexity needs at least two tokens")
    logprobs, _ = model_forward(weights, tokens)
    return perplexity_from_logprobs(logprobs, tokens)


# --- expert usage -----------------------------------------------------------

@dataclass
class ExpertUsageStats:
    frequencies: np.ndarray  # (L, n_routed)
    sigma_per_layer: np.ndarray  # (L,)
    sigma: float


def usage_counts(trace: RoutingTrace, n_routed: int) -> np.ndarray:
    """Routed-assignment counts, shape (L, n_routed)."""
    return np.stack([np.bincount(lt.topk.ravel(), minlength=n_routed) for lt in trace.layers])


def stats_from_counts(counts: np.ndarray) -> ExpertUsageStats:
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    if counts.ndim != 2 or np.any(totals <= 0):
        raise InputError("every layer needs at least one routed assignment")
    freq = counts / totals
    if freq.shape[1] > 1:
        sig = np.std(freq, axis=1, ddof=1)
    else:
        sig = np.zeros(freq.shape[0])
    return ExpertUsageStats(freq, sig, float(np.mean(sig)))


def expert_usage(traces: RoutingTrace | Sequence[RoutingTrace], n_routed: int) -> ExpertUsageStats:
    if isinstance(traces, RoutingTrace):
        traces = [traces]
    traces = [t for t in traces if t.n_tokens]
    if not traces:
        raise InputError("no routing assignments to aggregate")
    return stats_from_counts(sum(usage_counts(t, n_routed) for t in traces))
