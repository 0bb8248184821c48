"""Dense linear algebra used by the attribution code.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and shape
``(rows, cols)``.  Gradients follow the column-per-output convention: the
Jacobian of ``f: R^d -> R^k`` is stored as a ``(d, k)`` matrix whose entry
``(i, j)`` is ``d f_j / d x_i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput

#: Multiplier on ``max(rows, cols)`` giving the default relative cutoff.
DEFAULT_RCOND_SCALE = 1e-10


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate ``a`` as a nonempty finite 2-D float64 array.

    1-D input is promoted to a single column.
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise InvalidInput(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInput(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(sigma) @ v.T``.

    ``u`` is ``(rows, r)``, ``v`` is ``(cols, r)`` and ``sigma`` holds the
    ``r = min(rows, cols)`` singular values in descending order.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def svd(a) -> SvdResult:
    """Thin singular value decomposition of a finite matrix."""
    arr = as_matrix(a)
    u, s, vt = np.linalg.svd(arr, full_matrices=False)
    return SvdResult(u=u, sigma=s, v=vt.T)


def default_rel_tol(shape: tuple[int, int]) -> float:
    return DEFAULT_RCOND_SCALE * max(shape)


def pinv(a, rel_tol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudo-inverse ``V diag(1/sigma) U^T``.

    Singular values ``sigma_i <= rel_tol * sigma_max`` are treated as zero.

    Parameters
    ----------
    a : array_like, shape (rows, cols)
        Matrix to invert.  A 1-D input is treated as a column vector.
    rel_tol : float, optional
        Relative cutoff.  Defaults to ``1e-10 * max(rows, cols)``.

    Returns
    -------
    numpy.ndarray, shape (cols, rows)
        The pseudo-inverse.  The all-zero matrix maps to the all-zero
        matrix of transposed shape.
    """
    arr = as_matrix(a)
    if rel_tol is None:
        rel_tol = default_rel_tol(arr.shape)
    if not rel_tol > 0:
        raise InvalidInput(f"rel_tol must be positive, got {rel_tol}")
    dec = svd(arr)
    if dec.sigma.size == 0 or dec.sigma[0] == 0.0:
        return np.zeros(arr.shape[::-1])
    keep = dec.sigma > rel_tol * dec.sigma[0]
    inv_sigma = np.zeros_like(dec.sigma)
    inv_sigma[keep] = 1.0 / dec.sigma[keep]
    return (dec.v * inv_sigma) @ dec.u.T
