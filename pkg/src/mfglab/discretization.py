"""Finite-volume operators on the classified lattice.

Everything is built from one face structure: each face joins two axis
neighbours, carries a gradient ``(u_q - u_p) / h`` and a volume
``length * h`` (edge-aligned faces on the outer boundary have half length).
With ``M`` the dual-cell areas and ``G`` the face gradient,

    K = G^T W G,     -Laplacian = M^{-1} K,     div(m grad u) = -M^{-1} G^T W (avg(m) * G u)

so summation by parts holds exactly in the area-weighted inner product.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, GeometryError, PreconditionError, SolverError
from .geometry import EDGES, BoundaryPatch, Grid, NodeClass

BC_TAGS = ("DD", "DN")
DENSE_LIMIT = 4000


class FaceStructure(NamedTuple):
    p: np.ndarray  # lower node of each face (active index)
    q: np.ndarray  # upper node
    axis: np.ndarray  # 0 for x-faces, 1 for y-faces
    volume: np.ndarray  # face length times normal spacing
    grad: sp.csr_matrix  # faces x active
    avg: sp.csr_matrix  # faces x active, arithmetic mean
    node_avg: sp.csr_matrix  # active x faces, 1/2 per touching face
    area: np.ndarray


class FaceField(NamedTuple):
    """Face-centred vector field: ``gx`` on x-faces, ``gy`` on y-faces."""

    gx: np.ndarray
    gy: np.ndarray

    def stacked(self):
        return np.concatenate([self.gx, self.gy])


@lru_cache(maxsize=64)
def faces(grid: Grid) -> FaceStructure:
    ps, qs, axes, vols = [], [], [], []
    for axis, (di, dj) in enumerate(((1, 0), (0, 1))):
        i, j = grid.i, grid.j
        ni, nj = i + di, j + dj
        ok = (ni < grid.nx) & (nj < grid.ny)
        p = np.flatnonzero(ok)
        q = grid.active_index(ni[ok], nj[ok])
        keep = q >= 0
        p, q = p[keep], q[keep]
        if axis == 0:
            along = (grid.j[p] == 0) | (grid.j[p] == grid.ny - 1)
            vol = np.where(along, 0.5, 1.0) * grid.hy * grid.hx
        else:
            along = (grid.i[p] == 0) | (grid.i[p] == grid.nx - 1)
            vol = np.where(along, 0.5, 1.0) * grid.hx * grid.hy
        ps.append(p)
        qs.append(q)
        axes.append(np.full(p.size, axis))
        vols.append(vol)
    p = np.concatenate(ps)
    q = np.concatenate(qs)
    axis = np.concatenate(axes)
    volume = np.concatenate(vols)
    nf, n = p.size, grid.n_active
    h = np.where(axis == 0, grid.hx, grid.hy)
    rows = np.concatenate([np.arange(nf), np.arange(nf)])
    cols = np.concatenate([p, q])
    grad = sp.csr_matrix((np.concatenate([-1.0 / h, 1.0 / h]), (rows, cols)), shape=(nf, n))
    avg = sp.csr_matrix((np.full(2 * nf, 0.5), (rows, cols)), shape=(nf, n))
    node_avg = sp.csr_matrix((np.full(2 * nf, 0.5), (cols, rows)), shape=(n, nf))
    for mat in (grad, avg, node_avg):
        mat.sum_duplicates()
    return FaceStructure(p, q, axis, volume, grad, avg, node_avg, grid.area_weights)


def _check_field(grid, f, name="field"):
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != grid.n_active:
        raise PreconditionError(f"{name} has {f.shape[-1]} values, grid has {grid.n_active} active nodes")
    return f


@dataclass(eq=False)
class LaplaceOperator:
    """Negative Laplacian restricted to the unknowns of a boundary regime.

    ``stiffness`` is symmetric; ``matrix = diag(mass)^{-1} stiffness`` is the
    operator acting on nodal values. ``coupling`` maps Dirichlet-node values into
    unknown rows (move it to the right-hand side with a minus sign).
    """

    grid: Grid
    bc: str
    unknowns: np.ndarray
    dirichlet: np.ndarray
    stiffness: sp.csr_matrix
    coupling: sp.csr_matrix
    mass: np.ndarray
    _factors: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.unknowns.size

    @property
    def matrix(self) -> sp.csr_matrix:
        return sp.diags(1.0 / self.mass) @ self.stiffness

    @property
    def coupling_matrix(self) -> sp.csr_matrix:
        return sp.diags(1.0 / self.mass) @ self.coupling

    def apply(self, f):
        """Discrete -Laplacian on unknown nodes of a full active-node field."""
        f = np.asarray(f, dtype=float)
        out = self.stiffness @ f[..., self.unknowns].T + self.coupling @ f[..., self.dirichlet].T
        return (out.T / self.mass)

    def step_factor(self, coef: float):
        """Cached sparse LU of ``I + coef * matrix`` for implicit time stepping."""
        key = float(coef)
        lu = self._factors.get(key)
        if lu is None:
            mat = (sp.identity(self.n, format="csc") + key * self.matrix).tocsc()
            lu = spla.splu(mat)
            self._factors[key] = lu
        return lu


@lru_cache(maxsize=64)
def assemble_laplacian(grid: Grid, bc: str) -> LaplaceOperator:
    """Five-point -Laplacian. ``DD``: Dirichlet on both boundaries; ``DN``: Dirichlet
    on the obstacle, Neumann (ghost elimination) on the outer edge."""
    if bc not in BC_TAGS:
        raise ConfigurationError(f"unknown boundary tag {bc!r}; expected one of {BC_TAGS}")
    fs = faces(grid)
    K = (fs.grad.T @ sp.diags(fs.volume) @ fs.grad).tocsr()
    cls = grid.classes
    if bc == "DD":
        is_unknown = cls == NodeClass.INTERIOR
    else:
        is_unknown = (cls == NodeClass.INTERIOR) | (cls == NodeClass.OUTER)
    unknowns = np.flatnonzero(is_unknown)
    dirichlet = np.flatnonzero(~is_unknown)
    K_uu = K[unknowns][:, unknowns].tocsr()
    K_ub = K[unknowns][:, dirichlet].tocsr()
    K_uu = ((K_uu + K_uu.T) * 0.5).tocsr()
    return LaplaceOperator(grid, bc, unknowns, dirichlet, K_uu, K_ub, fs.area[unknowns])


def gradient(grid: Grid, u) -> FaceField:
    """Face differences; exact for linear fields, centred (second order) at face midpoints."""
    u = _check_field(grid, u, "u")
    fs = faces(grid)
    g = (fs.grad @ u.T).T
    sel = fs.axis == 0
    return FaceField(g[..., sel], g[..., ~sel])


def _stack(grid, grad_u):
    if isinstance(grad_u, FaceField):
        return np.concatenate([grad_u.gx, grad_u.gy], axis=-1)
    return np.asarray(grad_u)


def divergence_flux(grid: Grid, m, grad_u) -> np.ndarray:
    """Conservative ``div(m grad u)``: face flux = mean(m) * face gradient."""
    m = _check_field(grid, m, "m")
    fs = faces(grid)
    g = _stack(grid, grad_u)
    flux = (fs.avg @ m.T).T * g * fs.volume
    return -((fs.grad.T @ flux.T).T) / fs.area


def grad_dot(grid: Grid, ga, gb) -> np.ndarray:
    """Nodal ``grad a . grad b``: per axis, mean of the products on the two touching
    faces (a missing ghost face counts as zero)."""
    fs = faces(grid)
    prod = _stack(grid, ga) * _stack(grid, gb)
    return (fs.node_avg @ prod.T).T


def _inward(edge):
    return {"left": (1, 0), "right": (-1, 0), "bottom": (0, 1), "top": (0, -1)}[edge]


def normal_derivative_matrix(grid: Grid, patch: BoundaryPatch) -> sp.csr_matrix:
    """Rows of the 3-point one-sided outward derivative ``(3 f0 - 4 f1 + f2) / (2h)``."""
    if patch.grid is not grid:
        raise PreconditionError("patch belongs to a different grid")
    rows, cols, vals = [], [], []
    for r, (node, edge) in enumerate(zip(patch.nodes, patch.edges)):
        if edge not in EDGES or grid.classes[node] != NodeClass.OUTER:
            raise GeometryError("normal derivative requested off the outer boundary")
        di, dj = _inward(edge)
        h = grid.hx if di else grid.hy
        i, j = grid.i[node], grid.j[node]
        n1 = grid.active_index(i + di, j + dj)
        n2 = grid.active_index(i + 2 * di, j + 2 * dj)
        if n1 < 0 or n2 < 0:
            raise GeometryError("normal stencil reaches an excluded node")
        rows += [r, r, r]
        cols += [node, int(n1), int(n2)]
        vals += [1.5 / h, -2.0 / h, 0.5 / h]
    return sp.csr_matrix((vals, (rows, cols)), shape=(patch.size, grid.n_active))


def trace_matrix(grid: Grid, patch: BoundaryPatch) -> sp.csr_matrix:
    if patch.grid is not grid:
        raise PreconditionError("patch belongs to a different grid")
    n = patch.size
    return sp.csr_matrix((np.ones(n), (np.arange(n), patch.nodes)), shape=(n, grid.n_active))


def observation_matrix(grid: Grid, patch: BoundaryPatch, kind: str) -> sp.csr_matrix:
    """``kind='flux'`` gives outward normal derivatives, ``kind='value'`` the trace."""
    if kind == "flux":
        return normal_derivative_matrix(grid, patch)
    if kind == "value":
        return trace_matrix(grid, patch)
    raise ConfigurationError(f"unknown observation kind {kind!r}")


def normal_derivative(grid: Grid, f, patch: BoundaryPatch) -> np.ndarray:
    f = _check_field(grid, f, "f")
    return (normal_derivative_matrix(grid, patch) @ f.T).T


def solve_linear(op, rhs, tol: float = 1e-10, method: str = "auto", maxiter: int | None = None):
    """Solve ``op x = rhs`` to relative residual ``tol``.

    ``op`` is a sparse matrix or a LaplaceOperator. ``method``: ``cg`` (Jacobi
    preconditioned, SPD only), ``direct`` (sparse LU) or ``auto`` (direct up to
    DENSE_LIMIT unknowns, CG above).
    """
    if not (0.0 < tol <= 1e-6):
        raise PreconditionError(f"tol must lie in (0, 1e-6], got {tol}")
    A = op.matrix if isinstance(op, LaplaceOperator) else sp.csr_matrix(op)
    b = np.asarray(rhs, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    if method == "auto":
        method = "direct" if A.shape[0] <= DENSE_LIMIT else "cg"
    if method == "direct":
        x = spla.spsolve(A.tocsc(), b)
    elif method == "cg":
        diag = A.diagonal()
        if np.any(diag <= 0):
            raise SolverError("CG path needs a positive diagonal")
        precond = spla.LinearOperator(A.shape, matvec=lambda v: v / diag)
        x, info = spla.cg(A, b, rtol=tol * 0.1, atol=0.0, M=precond, maxiter=maxiter or 10 * A.shape[0])
        if info != 0:
            res = np.linalg.norm(A @ x - b) / bnorm
            raise SolverError(f"conjugate gradient did not converge (info={info})", residual=res)
    else:
        raise ConfigurationError(f"unknown solver method {method!r}")
    res = np.linalg.norm(A @ x - b) / bnorm
    if not np.isfinite(res) or res > tol:
        raise SolverError(f"linear solve residual {res:.3e} above tolerance {tol:.1e}", residual=res)
    return x
