"""Dense float64 matrix primitives.

Matrices are plain 2-D ``numpy.ndarray`` values in row-major (C) order.
Every function returns a fresh array and never mutates its inputs.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from moeqlab.errors import FactorizationError, InputError

SYMMETRY_TOL = 1e-10


def as_matrix(a) -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise InputError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise InputError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def scale_rows(a, factors) -> np.ndarray:
    """Multiply row ``i`` of ``a`` by ``factors[i]``."""
    a = as_matrix(a)
    f = np.asarray(factors, dtype=np.float64)
    if f.shape != (a.shape[0],):
        raise InputError(f"need {a.shape[0]} row factors, got shape {f.shape}")
    return a * f[:, None]


def _check_symmetric(h: np.ndarray) -> None:
    if h.shape[0] != h.shape[1]:
        raise InputError(f"matrix must be square, got {h.shape}")
    scale = max(1.0, float(np.max(np.abs(h))) if h.size else 1.0)
    if h.size and np.max(np.abs(h - h.T)) > SYMMETRY_TOL * scale:
        raise InputError("matrix is not symmetric")


def cholesky(h) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == h``.

    Left-looking column algorithm. Raises :class:`FactorizationError`
    naming the first pivot that is not strictly positive.
    """
    h = as_matrix(h)
    _check_symmetric(h)
    n = h.shape[0]
    L = np.zeros_like(h)
    for j in range(n):
        d = h[j, j] - L[j, :j] @ L[j, :j]
        if not d > 0.0:
            raise FactorizationError(j, float(d))
        ljj = np.sqrt(d)
        L[j, j] = ljj
        if j + 1 < n:
            L[j + 1:, j] = (h[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / ljj
    return L


def invert_spd(h) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via its Cholesky factor."""
    L = cholesky(h)
    n = L.shape[0]
    l_inv = solve_triangular(L, np.eye(n), lower=True)
    inv = l_inv.T @ l_inv
    return 0.5 * (inv + inv.T)
