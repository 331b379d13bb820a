"""Implicit-Euler heat solves forward and backward in time, and adjoint probes.

Space-time fields are arrays of shape ``(nt + 1, n_active)``; row ``k`` is time
``k * dt``. Forward steps solve ``(I + dt nu A) m[k+1] = m[k] + dt s[k+1]`` with
the boundary lifting; backward steps are the same scheme under ``t -> T - t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discretization import LaplaceOperator, assemble_laplacian, observation_matrix
from .errors import ConfigurationError, PreconditionError, ValidationError
from .geometry import Grid

MIN_STEPS = 8


@dataclass(frozen=True)
class TimeGrid:
    T: float
    nt: int

    def __post_init__(self):
        if self.nt < MIN_STEPS:
            raise PreconditionError(f"time grid needs nt >= {MIN_STEPS}, got {self.nt}")
        if not self.T > 0:
            raise PreconditionError(f"final time must be positive, got {self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.nt + 1) * self.dt


def _operator(grid_or_op, bc) -> LaplaceOperator:
    if isinstance(grid_or_op, LaplaceOperator):
        return grid_or_op
    return assemble_laplacian(grid_or_op, bc)


def _levels(values, tg, n, name):
    """Broadcast scalar / per-node / per-level data to ``(nt + 1, n)``."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim <= 1:
        return np.broadcast_to(arr, (tg.nt + 1, n))
    if arr.shape != (tg.nt + 1, n):
        raise PreconditionError(f"{name} has shape {arr.shape}, expected {(tg.nt + 1, n)}")
    return arr


def _neumann_load(op, neumann, tg):
    """Area-normalized boundary load from flux data ``(patch, values[nt+1, n_patch])``."""
    patch, values = neumann
    if op.bc != "DN":
        raise ConfigurationError("Neumann data need the DN operator")
    values = _levels(values, tg, patch.size, "neumann flux")
    area = op.grid.area_weights
    load = np.zeros((tg.nt + 1, op.grid.n_active))
    np.add.at(load, (slice(None), patch.nodes), values * (patch.lengths / area[patch.nodes]))
    return load[:, op.unknowns]


def solve_heat_forward(grid, tg: TimeGrid, nu: float, initial, source=None, bc="DD", dirichlet=0.0, neumann=None):
    """March ``m_t - nu Lap m = source`` from ``initial``.

    ``dirichlet``: value(s) on the Dirichlet nodes (scalar, per node, or per level).
    ``neumann``: ``(patch, flux)`` outward-flux data on part of a Neumann edge.
    """
    if nu <= 0:
        raise PreconditionError(f"diffusion must be positive, got {nu}")
    op = _operator(grid, bc)
    n = op.grid.n_active
    initial = np.asarray(initial, dtype=float)
    if initial.shape != (n,):
        raise PreconditionError(f"initial field has shape {initial.shape}, expected {(n,)}")
    dt = tg.dt
    lu = op.step_factor(dt * nu)
    bvals = _levels(dirichlet, tg, op.dirichlet.size, "dirichlet data")
    rhs_extra = np.zeros((tg.nt + 1, op.n))
    if op.dirichlet.size:
        rhs_extra -= dt * nu * (op.coupling_matrix @ bvals.T).T
    if source is not None:
        src = _levels(source, tg, n, "source")
        rhs_extra += dt * src[:, op.unknowns]
    if neumann is not None:
        rhs_extra += dt * nu * _neumann_load(op, neumann, tg)
    out = np.empty((tg.nt + 1, n))
    out[0] = initial
    out[:, op.dirichlet] = bvals
    cur = initial[op.unknowns]
    for k in range(tg.nt):
        cur = lu.solve(cur + rhs_extra[k + 1])
        out[k + 1, op.unknowns] = cur
    return out


def solve_backward(grid, tg: TimeGrid, nu: float, terminal, source=None, bc="DD", dirichlet=0.0, neumann=None):
    """March ``-u_t - nu Lap u = source`` backward from ``terminal`` at time T."""
    src = None if source is None else _levels(source, tg, _operator(grid, bc).grid.n_active, "source")[::-1]
    dvals = np.asarray(dirichlet, dtype=float)
    if dvals.ndim == 2:
        dvals = dvals[::-1]
    if neumann is not None:
        patch, flux = neumann
        flux = np.asarray(flux, dtype=float)
        neumann = (patch, flux[::-1] if flux.ndim == 2 else flux)
    rev = solve_heat_forward(grid, tg, nu, terminal, src, bc=bc, dirichlet=dvals, neumann=neumann)
    return rev[::-1].copy()


def probe_kind(regime: str) -> str:
    """Measurement family of a boundary regime: ``D`` (flux of u) or ``N`` (value of u)."""
    tag = regime[0].upper()
    if tag not in ("D", "N"):
        raise ConfigurationError(f"unknown measurement regime {regime!r}")
    return tag


def flux_functional_rows(grid: Grid, tg: TimeGrid, patch, weights, regime: str) -> np.ndarray:
    """Coefficients ``c[k]`` with ``functional(u) = sum_k c[k] . u[k]`` (full active fields).

    D: sum over levels 1..nt of dt * length * weight * outward normal derivative;
    N: the same with the boundary value in place of the derivative.
    """
    kind = "flux" if probe_kind(regime) == "D" else "value"
    obs = observation_matrix(grid, patch, kind)
    w = np.asarray(weights, dtype=float)
    if w.shape != (tg.nt + 1, patch.size):
        raise PreconditionError(f"weight has shape {w.shape}, expected {(tg.nt + 1, patch.size)}")
    c = (obs.T @ (w * patch.lengths).T).T * tg.dt
    c[0] = 0.0
    return c


def adjoint_probe_b(grid: Grid, tg: TimeGrid, nu: float, h, regime: str = "D") -> np.ndarray:
    """Adjoint probe for the weight ``h`` (an object with ``patch`` and ``values``).

    Built by transposed implicit-Euler stepping of the backward solver, so that
    for every source ``S`` the backward solution ``w`` satisfies exactly

        sum_{k<nt} dt <S[k], b[k]>_area = sign * nu * functional(w),

    with ``sign = -1`` for the flux functional (D) and ``+1`` for the value
    functional (N). In the continuum this is the heat solution with zero initial
    state driven by ``h`` on the observed patch.
    """
    values = np.asarray(h.values, dtype=float)
    if np.any(values < 0):
        raise ValidationError("weight function must be nonnegative")
    if not np.any(values > 0):
        raise ValidationError("weight function must not vanish identically")
    kind = probe_kind(regime)
    op = assemble_laplacian(grid, "DD" if kind == "D" else "DN")
    c = flux_functional_rows(grid, tg, h.patch, values, kind)[:, op.unknowns]
    lu = op.step_factor(tg.dt * nu)
    sign = -1.0 if kind == "D" else 1.0
    area = op.mass
    b = np.zeros((tg.nt + 1, grid.n_active))
    lam = np.zeros(op.n)
    for k in range(tg.nt + 1):
        if k == 0 and not np.any(c[0]):
            continue
        lam = lu.solve(c[k] + lam, trans="T")
        b[k, op.unknowns] = sign * nu * lam / area
    return b


def space_time_inner(grid: Grid, tg: TimeGrid, a, b, levels=None) -> float:
    """``sum_k dt sum_p area_p a[k,p] b[k,p]`` over levels ``0..nt-1`` by default."""
    if levels is None:
        levels = slice(0, tg.nt)
    prod = np.asarray(a)[levels] * np.asarray(b)[levels]
    return float(tg.dt * np.sum(prod @ grid.area_weights))
