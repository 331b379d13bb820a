"""Eigenpairs of the discrete Laplacian and the separable decay solutions built on them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse.linalg as spla

from .discretization import assemble_laplacian
from .errors import NonConvergenceError, PreconditionError
from .geometry import Grid
from .parabolic import TimeGrid

DENSE_EIG_LIMIT = 2000
RESIDUAL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class EigenPair:
    """``-Lap y = (mu / nu) y`` with ``y`` unit in the area-weighted L2 norm.

    ``y`` is a full active-node field (zero on Dirichlet nodes).
    """

    mu: float
    nu: float
    y: np.ndarray
    bc: str
    grid: Grid

    @property
    def eigenvalue(self) -> float:
        return self.mu / self.nu

    def residual(self) -> float:
        op = assemble_laplacian(self.grid, self.bc)
        r = op.apply(self.y) - self.eigenvalue * self.y[op.unknowns]
        return float(np.sqrt(np.sum(op.mass * r**2)))


def l2_inner(grid: Grid, a, b) -> float:
    return float(np.sum(grid.area_weights * np.asarray(a) * np.asarray(b)))


def _fix_sign(vecs):
    for col in range(vecs.shape[1]):
        v = vecs[:, col]
        nz = np.flatnonzero(np.abs(v) > 1e-12 * np.abs(v).max())
        if nz.size and v[nz[0]] < 0:
            vecs[:, col] = -v
    return vecs


def _block_inverse_iteration(op, k, tol=1e-12, maxiter=500, seed=0):
    """Subspace iteration on ``K^{-1} M`` with Rayleigh-Ritz in the M inner product."""
    n = op.n
    block = min(n, 2 * k + 4)
    lu = spla.splu(op.stiffness.tocsc())
    mass = op.mass
    X = np.random.default_rng(seed).standard_normal((n, block))
    prev = None
    for _ in range(maxiter):
        Y = lu.solve(mass[:, None] * X)
        # M-orthonormalize via Cholesky of the Gram matrix
        gram = Y.T @ (mass[:, None] * Y)
        Y = Y @ np.linalg.inv(np.linalg.cholesky(gram)).T
        Kr = Y.T @ (op.stiffness @ Y)
        vals, rot = la.eigh(0.5 * (Kr + Kr.T))
        X = Y @ rot
        if prev is not None and np.max(np.abs(vals[:k] - prev[:k]) / vals[:k]) < tol:
            return vals[:k], X[:, :k]
        prev = vals
    raise NonConvergenceError("block inverse iteration did not converge")


def eigenpairs(grid: Grid, bc: str, count: int, nu: float = 1.0) -> list[EigenPair]:
    """The ``count`` smallest eigenpairs of ``-Lap`` under ``bc``, ascending.

    Decay rates are ``mu = nu * eigenvalue``; eigenfunctions are orthonormal in
    the area-weighted inner product and signed so their first nonzero entry is
    positive.
    """
    op = assemble_laplacian(grid, bc)
    if count < 1 or count > grid.n_active // 4:
        raise PreconditionError(f"eigenpair count must lie in [1, {grid.n_active // 4}], got {count}")
    if op.n <= DENSE_EIG_LIMIT:
        vals, vecs = la.eigh(op.stiffness.toarray(), np.diag(op.mass), subset_by_index=(0, count - 1))
    else:
        vals, vecs = _block_inverse_iteration(op, count)
    vecs = _fix_sign(np.array(vecs))
    pairs = []
    for lam, v in zip(vals, vecs.T):
        y = np.zeros(grid.n_active)
        y[op.unknowns] = v
        y /= np.sqrt(l2_inner(grid, y, y))
        pairs.append(EigenPair(nu * max(float(lam), 0.0), nu, y, bc, grid))
    return pairs


def separable_solution(pair: EigenPair, tg: TimeGrid, decay: str = "exact") -> np.ndarray:
    """``W[k] = d_k * y`` with ``d_k = exp(-mu t_k)`` (``decay='exact'``) or the
    implicit-Euler factor ``(1 + dt mu)^{-k}`` (``decay='discrete'``), which is
    what the discrete heat solver reproduces to round-off."""
    k = np.arange(tg.nt + 1)
    if decay == "exact":
        d = np.exp(-pair.mu * tg.times)
    elif decay == "discrete":
        d = (1.0 + tg.dt * pair.mu) ** (-k.astype(float))
    else:
        raise PreconditionError(f"unknown decay {decay!r}")
    return np.outer(d, pair.y)
