"""Per-channel symmetric weight quantization: RTN, GPTQ-style and AWQ-style solvers.

Weights use the ``(out_channels, in_channels)`` orientation, activations are
``(tokens, in_channels)``, so a layer output is ``w @ x.T``. Steps are
per output channel (one per row of ``w``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from moeqlab.errors import InputError, UnsupportedShapeError
from moeqlab.linalg import as_matrix, cholesky, invert_spd

DEFAULT_DAMPING = 0.01
DEFAULT_AWQ_GRID = 20
AWQ_SCALE_MIN, AWQ_SCALE_MAX = 1e-4, 1e4


@dataclass(frozen=True)
class QuantSpec:
    bits: int

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or not 2 <= self.bits <= 8:
            raise InputError(f"bits must be an integer in [2, 8], got {self.bits!r}")

    @property
    def q_max(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def q_min(self) -> int:
        return -self.q_max


@dataclass
class QuantizedTensor:
    codes: np.ndarray  # int (o, c)
    steps: np.ndarray  # float (o,)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        self.steps = np.asarray(self.steps, dtype=np.float64)
        if self.codes.ndim != 2 or self.steps.shape != (self.codes.shape[0],):
            raise InputError(f"codes {self.codes.shape} and steps {self.steps.shape} disagree")
        if not np.all(np.isfinite(self.steps)) or np.any(self.steps <= 0):
            raise InputError("quantization steps must be positive and finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def in_range(self, spec: QuantSpec) -> bool:
        return bool(np.all((self.codes >= spec.q_min) & (self.codes <= spec.q_max)))


def compute_steps(w, spec: QuantSpec) -> np.ndarray:
    """Row step = max |w[r]| / q_max; all-zero rows get step 1."""
    w = as_matrix(w)
    amax = np.max(np.abs(w), axis=1) if w.shape[1] else np.zeros(w.shape[0])
    return np.where(amax > 0, amax / spec.q_max, 1.0)


def quantize(w, steps, spec: QuantSpec) -> QuantizedTensor:
    w = as_matrix(w)
    s = np.asarray(steps, dtype=np.float64)
    if s.shape != (w.shape[0],):
        raise InputError(f"need {w.shape[0]} steps, got shape {s.shape}")
    if np.any(~(s > 0)) or not np.all(np.isfinite(s)):
        raise InputError("quantization steps must be positive and finite")
    # np.rint rounds half to even
    codes = np.clip(np.rint(w / s[:, None]), spec.q_min, spec.q_max)
    return QuantizedTensor(codes.astype(np.int64), s)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.codes * q.steps[:, None]


@dataclass
class ActivationBatch:
    """Calibration inputs of one linear layer, with optional per-token weights."""

    x: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.x = as_matrix(self.x)
        if self.x.shape[0] < 1:
            raise InputError("activation batch needs at least one token")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (self.x.shape[0],):
                raise InputError("need one weight per token")
            if np.any(self.weights < 0):
                raise InputError("token weights must be nonnegative")

    @property
    def n_tokens(self) -> int:
        return self.x.shape[0]

    @property
    def n_channels(self) -> int:
        return self.x.shape[1]


def _batch(x) -> ActivationBatch:
    return x if isinstance(x, ActivationBatch) else ActivationBatch(x)


def quant_loss(w, w_hat, x) -> float:
    """||(w - w_hat) X^T||_F^2, each token's term scaled by its weight if present."""
    batch = _batch(x)
    diff = as_matrix(w) - as_matrix(w_hat)
    if diff.shape[1] != batch.n_channels:
        raise InputError(f"weight has {diff.shape[1]} inputs, activations have {batch.n_channels}")
    per_token = np.sum((batch.x @ diff.T) ** 2, axis=1)
    if batch.weights is not None:
        per_token = per_token * batch.weights
    return float(np.sum(per_token))


def hessian(x) -> np.ndarray:
    """Input Gram matrix X^T X, shape (c, c)."""
    X = _batch(x).x
    return X.T @ X


def rtn_quantize(w, spec: QuantSpec) -> QuantizedTensor:
    return quantize(w, compute_steps(w, spec), spec)


def gptq_quantize(w, h, spec: QuantSpec, damping: float = DEFAULT_DAMPING) -> QuantizedTensor:
    """Column-sweep quantization with inverse-Hessian error compensation.

    Steps come from the original ``w`` and stay fixed during the sweep.
    Input channels that never fire (zero Hessian diagonal) get a unit
    diagonal so the damped matrix stays invertible. After damping, the
    upper Cholesky factor ``U`` of ``H^-1`` supplies, row by row, the
    inverse Hessian restricted to the not-yet-quantized columns:
    ``U[j, j]**2 == [H_F^-1]_jj`` and ``U[j, j:] * U[j, j]`` is that row.
    """
    W = as_matrix(w).copy()
    H = as_matrix(h).copy()
    o, c = W.shape
    if H.shape != (c, c):
        raise InputError(f"Hessian shape {H.shape} does not match {c} input channels")
    steps = compute_steps(W, spec)

    dead = np.diag(H) == 0
    H[dead, dead] = 1.0
    H[np.diag_indices(c)] += damping * np.mean(np.diag(H))
    U = cholesky(invert_spd(H)).T  # upper, U^T U = H^-1

    codes = np.zeros((o, c), dtype=np.int64)
    for j in range(c):
        col = W[:, j]
        q = np.clip(np.rint(col / steps), spec.q_min, spec.q_max)
        codes[:, j] = q
        err = (col - q * steps) / U[j, j]
        W[:, j + 1:] -= np.outer(err, U[j, j + 1:])
    return QuantizedTensor(codes, steps)


@dataclass
class AWQResult:
    scales: np.ndarray  # per input channel; effective weight is dequantize(tensor) / scales
    tensor: QuantizedTensor
    alpha: float
    loss: float

    def effective_weight(self) -> np.ndarray:
        return dequantize(self.tensor) / self.scales[None, :]


def awq_candidate_scales(x, alpha: float) -> np.ndarray:
    """Per-channel scales mean|x_j| ** alpha, clamped; dead channels get 1."""
    act = np.mean(np.abs(_batch(x).x), axis=0)
    s = np.clip(np.power(act, alpha, where=act > 0, out=np.ones_like(act)),
                AWQ_SCALE_MIN, AWQ_SCALE_MAX)
    return np.where(act > 0, s, 1.0)


def awq_grid(grid_size: int) -> np.ndarray:
    if grid_size < 1:
        raise InputError("grid_size must be >= 1")
    return np.linspace(0.0, 1.0, grid_size) if grid_size > 1 else np.zeros(1)


def awq_loss_at(w, x, spec: QuantSpec, alpha: float) -> tuple[float, np.ndarray, QuantizedTensor]:
    batch = _batch(x)
    W = as_matrix(w)
    s = awq_candidate_scales(batch, alpha)
    q = rtn_quantize(W * s[None, :], spec)
    scaled = ActivationBatch(batch.x / s[None, :], batch.weights)
    return quant_loss(W * s[None, :], dequantize(q), scaled), s, q


def awq_scale_search(w, x, spec: QuantSpec, grid_size: int = DEFAULT_AWQ_GRID) -> AWQResult:
    """Grid search over the exponent alpha in [0, 1]; ties go to the smaller alpha.

    If ``x`` carries per-token weights the search minimises the weighted loss.
    """
    best = None
    for alpha in awq_grid(grid_size):
        loss, s, q = awq_loss_at(w, x, spec, float(alpha))
        if best is None or loss < best.loss:
            best = AWQResult(s, q, float(alpha), loss)
    return best


def _fwht_rows(a: np.ndarray) -> np.ndarray:
    """Unnormalised Walsh-Hadamard transform along the last axis (Sylvester order)."""
    out = a.copy()
    n = out.shape[-1]
    h = 1
    while h < n:
        v = out.reshape(*out.shape[:-1], n // (2 * h), 2, h)
        top, bot = v[..., 0, :].copy(), v[..., 1, :].copy()
        v[..., 0, :] = top + bot
        v[..., 1, :] = top - bot
        h *= 2
    return out


def is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def hadamard_transform(a) -> np.ndarray:
    """``a @ T`` with ``T = H_c / sqrt(c)``; symmetric and orthogonal, so it is its own inverse.

    Applies to weights (``w -> w T``) and, identically, to activations
    (``x -> x T``) so that ``(w T)(x T)^T == w x^T``.
    """
    a = as_matrix(a)
    c = a.shape[1]
    if not is_power_of_two(c):
        raise UnsupportedShapeError(f"Hadamard transform needs a power-of-two width, got {c}")
    return _fwht_rows(a) / np.sqrt(c)


def hadamard_preprocess(w) -> np.ndarray:
    return hadamard_transform(w)
