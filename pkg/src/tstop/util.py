"""Small linear-algebra helpers shared across modules."""

from __future__ import annotations

import numpy as np


def sym(M: np.ndarray) -> np.ndarray:
    """Symmetrize the last two axes: 0.5 * (M + M^T)."""
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def min_eigenvalue(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(sym(M)).min())


def assert_psd(M: np.ndarray, tol: float = 1e-10, what: str = "matrix") -> None:
    lo = min_eigenvalue(M)
    if lo < -tol:
        raise ValueError(f"{what} is not positive semidefinite (min eig {lo:.3e})")


def psd_factor(Sigma: np.ndarray) -> np.ndarray:
    """A factor L with L @ L.T = Sigma for a (possibly singular) PSD matrix."""
    Sigma = sym(np.asarray(Sigma, dtype=float))
    w, V = np.linalg.eigh(Sigma)
    w = np.clip(w, 0.0, None)
    return V * np.sqrt(w)


def clip_psd_blocks(H: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Project a stack (..., d, d) of symmetric blocks onto eigenvalues >= floor."""
    Hs = sym(H)
    w, V = np.linalg.eigh(Hs)
    w = np.clip(w, floor, None)
    return V @ (w[..., :, None] * np.swapaxes(V, -1, -2))
