"""Dense linear algebra kernel: Jacobi SVD, rank-k factors, norms.

All computation is float64. Matrices are plain 2-D numpy arrays; ``as_matrix``
is the single validation point (2-D, nonempty, finite).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import _backend
from .errors import InvalidRank, NonConvergence, NonFiniteInput

JACOBI_TOL = 1e-12
MAX_SWEEPS = 60


class SvdResult(NamedTuple):
    u: np.ndarray  # m x d
    sigma: np.ndarray  # d, nonincreasing
    v: np.ndarray  # n x d


def as_matrix(m, *, allow_empty: bool = False) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    if not allow_empty and a.size == 0:
        raise ValueError("matrix must be nonempty")
    if not np.all(np.isfinite(a)):
        raise NonFiniteInput("matrix contains NaN or Inf")
    return a


def _complete_basis(q: np.ndarray, bad: np.ndarray) -> None:
    """Replace columns ``bad`` of ``q`` by unit vectors orthogonal to the rest.

    Candidates are standard basis vectors tried in index order, so the
    completion is deterministic (the zero matrix gets the identity).
    """
    good = [j for j in range(q.shape[1]) if not bad[j]]
    rows = q.shape[0]
    cand = 0
    for j in np.flatnonzero(bad):
        while True:
            if cand >= rows:
                raise RuntimeError("basis completion ran out of candidates")
            e = np.zeros(rows)
            e[cand] = 1.0
            cand += 1
            for _ in range(2):
                for g in good:
                    e -= (q[:, g] @ e) * q[:, g]
            nrm = np.linalg.norm(e)
            if nrm > 0.5:
                q[:, j] = e / nrm
                good.append(j)
                break


def _tall_svd(a: np.ndarray, max_sweeps: int) -> SvdResult:
    # a is m x n with m >= n
    n = a.shape[1]
    # power-of-two prescale keeps squared norms in range; exact in binary fp
    top = np.max(np.abs(a))
    exp = int(np.frexp(top)[1]) if top > 0 else 0
    a = np.ldexp(a, -exp)
    cols = np.array(a.T, order="C", copy=True)
    vcols = np.eye(n)
    # columns at roundoff level relative to the whole matrix count as zero
    zero_tol = np.finfo(float).eps * max(a.shape) * np.sqrt(np.sum(a * a))
    sweeps, converged, off = _backend.jacobi_sweeps(cols, vcols, JACOBI_TOL, max_sweeps, zero_tol * zero_tol)
    if not converged:
        raise NonConvergence(sweeps, off)
    sigma = np.sqrt(np.einsum("ij,ij->i", cols, cols))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    cols = cols[order]
    v = vcols[order].T.copy()

    bad = sigma <= zero_tol
    u = np.zeros((a.shape[0], n))
    ok = ~bad
    u[:, ok] = cols[ok].T / sigma[ok]
    if bad.any():
        _complete_basis(u, bad)
    return SvdResult(u, np.ldexp(sigma, exp), v)


def svd(m, max_sweeps: int = MAX_SWEEPS) -> SvdResult:
    """Thin SVD ``m = u @ diag(sigma) @ v.T`` by one-sided cyclic Jacobi.

    Deterministic: fixed sweep order, singular values sorted nonincreasing
    (stable on ties), and each left singular vector's largest-magnitude entry
    made nonnegative (first index wins ties).

    Raises
    ------
    NonConvergence
        If the sweeps exceed ``max_sweeps``.
    """
    a = as_matrix(m)
    if a.shape[0] >= a.shape[1]:
        u, sigma, v = _tall_svd(a, max_sweeps)
    else:
        v, sigma, u = _tall_svd(a.T, max_sweeps)
    idx = np.argmax(np.abs(u), axis=0)
    flip = u[idx, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0
    return SvdResult(u, sigma, v)


def rank_k_factors(m, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Factors ``a`` (m x k), ``b`` (n x k) with ``a @ b.T`` the best rank-k fit.

    The singular values are split evenly: column i of each factor carries
    ``sqrt(sigma_i)``.
    """
    a = as_matrix(m)
    d = min(a.shape)
    if not isinstance(k, (int, np.integer)) or k < 1 or k > d:
        raise InvalidRank(f"rank {k} outside [1, {d}] for a {a.shape[0]}x{a.shape[1]} matrix")
    u, sigma, v = svd(a)
    root = np.sqrt(sigma[:k])
    return u[:, :k] * root, v[:, :k] * root


def frobenius_norm(m) -> float:
    a = as_matrix(m, allow_empty=True)
    return float(np.sqrt(np.sum(a * a)))
