"""Running costs, boundary regimes and the nonlinear forward-backward solve.

Discrete system on levels ``k`` (``dt`` step, ``A`` the regime's -Laplacian):

    (u[k] - u[k+1]) / dt + nu A u[k] = F(x, m[k]) - 1/2 |grad u[k]|^2,   k < nt,  u[nt] = 0
    (m[k] - m[k-1]) / dt + nu A m[k] = div(m[k] grad u[k]),              k >= 1,  m[0] = m0

The density is carried as a deviation from the regime's constant base state
(0 or g0), which keeps small perturbations free of cancellation error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .discretization import assemble_laplacian, divergence_flux, grad_dot, gradient
from .errors import ConfigurationError, DivergenceError, NonConvergenceError, PreconditionError
from .geometry import Grid
from .parabolic import TimeGrid, solve_backward, solve_heat_forward

REGIME_TAGS = ("DH", "NH", "DI", "NI")
GROWTH_LIMIT = 3


@dataclass(frozen=True)
class BoundaryRegime:
    """``DH``/``NH``: homogeneous Dirichlet/Neumann outer edge. ``DI``: Dirichlet
    ``m = g0`` on both boundaries. ``NI``: zero Neumann flux outside, ``m = g0`` on
    the obstacle. ``u`` vanishes on every Dirichlet boundary."""

    tag: str
    g0: float = 0.0

    def __post_init__(self):
        if self.tag not in REGIME_TAGS:
            raise ConfigurationError(f"unknown regime {self.tag!r}; expected one of {REGIME_TAGS}")
        if self.inhomogeneous and not self.g0 > 0:
            raise ConfigurationError(f"regime {self.tag} needs g0 > 0, got {self.g0}")
        if not self.inhomogeneous and self.g0 != 0:
            raise ConfigurationError(f"regime {self.tag} forces g0 = 0, got {self.g0}")

    @property
    def inhomogeneous(self) -> bool:
        return self.tag[1] == "I"

    @property
    def bc(self) -> str:
        return "DD" if self.tag[0] == "D" else "DN"

    @property
    def kind(self) -> str:
        """Measurement family: ``D`` (flux of u, normal derivative of m) or ``N`` (values)."""
        return self.tag[0]

    @property
    def base_density(self) -> float:
        return float(self.g0)


@dataclass(frozen=True, eq=False)
class RunningCost:
    """Truncated series ``sum_i coeffs[i-1](x) (m - expansion_point)^i / i!``."""

    expansion_point: float
    coeffs: tuple

    def __post_init__(self):
        coeffs = tuple(np.asarray(c, dtype=float) for c in self.coeffs)
        if not coeffs:
            raise ConfigurationError("running cost needs at least one coefficient")
        if any(c.shape != coeffs[0].shape for c in coeffs):
            raise ConfigurationError("all cost coefficients must live on the same grid")
        object.__setattr__(self, "coeffs", coeffs)
        if self.expansion_point != 0 and np.any(coeffs[0] != 0):
            raise ConfigurationError("a cost expanded about g0 > 0 must have a vanishing first coefficient")

    @classmethod
    def zero(cls, grid: Grid, order: int = 3, expansion_point: float = 0.0):
        return cls(expansion_point, tuple(np.zeros(grid.n_active) for _ in range(order)))

    @property
    def order(self) -> int:
        return len(self.coeffs)

    @property
    def cost_class(self) -> str:
        return "A" if self.expansion_point == 0 else "B"

    def coefficient(self, i: int) -> np.ndarray:
        """``F^(i)``; zero beyond the truncation order."""
        if i < 1:
            raise PreconditionError("coefficient index starts at 1")
        if i > self.order:
            return np.zeros_like(self.coeffs[0])
        return self.coeffs[i - 1]

    def derivative(self, j: int, at: float) -> np.ndarray:
        """``d^j F / dm^j`` at the constant density ``at``."""
        shift = at - self.expansion_point
        out = np.zeros_like(self.coeffs[0])
        for i in range(max(j, 1), self.order + 1):
            out = out + self.coeffs[i - 1] * shift ** (i - j) / math.factorial(i - j)
        return out

    def evaluate(self, deviation, base: float = 0.0):
        """Cost at ``m = base + deviation``; exact in ``deviation`` when ``base`` is
        the expansion point."""
        s = (base - self.expansion_point) + np.asarray(deviation, dtype=float)
        out = np.zeros(np.broadcast_shapes(s.shape, self.coeffs[0].shape))
        # Horner in s / i
        for i in range(self.order, 0, -1):
            out = (out + self.coeffs[i - 1]) * s / i
        return out

    def with_coefficient(self, i: int, values):
        coeffs = list(self.coeffs) + [np.zeros_like(self.coeffs[0])] * max(0, i - self.order)
        coeffs[i - 1] = np.asarray(values, dtype=float)
        return RunningCost(self.expansion_point, tuple(coeffs))

    def to_dict(self):
        return {"expansion_point": self.expansion_point, "coeffs": [c.tolist() for c in self.coeffs]}


def eval_cost(cost: RunningCost, m) -> np.ndarray:
    """``F(x, m)`` for a density field (or stack of levels)."""
    return cost.evaluate(m)


def check_compatible(cost: RunningCost, regime: BoundaryRegime):
    if regime.inhomogeneous:
        if cost.cost_class != "B" or cost.expansion_point != regime.g0:
            raise ConfigurationError(f"regime {regime.tag} needs a cost expanded about g0 = {regime.g0}")
    elif cost.cost_class != "A":
        raise ConfigurationError(f"regime {regime.tag} needs a cost expanded about 0")


@dataclass(eq=False)
class MFGSolution:
    grid: Grid
    tg: TimeGrid
    nu: float
    regime: BoundaryRegime
    u: np.ndarray
    m_dev: np.ndarray
    m0: np.ndarray
    iterations: int
    final_update: float
    history: list = field(default_factory=list)

    @property
    def m(self) -> np.ndarray:
        return self.regime.base_density + self.m_dev


def hamiltonian_term(grid: Grid, a, b) -> np.ndarray:
    """Nodal ``grad a . grad b`` for stacks of levels."""
    return grad_dot(grid, gradient(grid, a), gradient(grid, b))


def drift_term(grid: Grid, m, u) -> np.ndarray:
    """``div(m grad u)`` for stacks of levels."""
    return divergence_flux(grid, m, gradient(grid, u))


def _hjb_source(grid, cost, regime, u, m_dev):
    return cost.evaluate(m_dev, regime.base_density) - 0.5 * hamiltonian_term(grid, u, u)


def solve_mfg(
    grid: Grid,
    tg: TimeGrid,
    nu: float,
    cost: RunningCost,
    m0,
    regime: BoundaryRegime,
    tol: float = 1e-10,
    max_iter: int = 200,
    initial_guess=None,
    rtol: float = 0.0,
    deviation: bool = False,
) -> MFGSolution:
    """Picard iteration: backward HJB with lagged cost and Hamiltonian, then
    forward FP with the fresh drift and lagged density.

    ``initial_guess``: optional ``(u, m)`` level stacks to start from.
    Stops when the sup-norm update of ``(u, m)`` drops to
    ``tol + rtol * (|u|_inf + |m - base|_inf)``; the relative part lets tiny
    perturbation runs converge to round-off. With ``deviation=True`` the
    argument ``m0`` is read as ``m0 - base`` (no cancellation for tiny data).
    """
    check_compatible(cost, regime)
    if tol <= 0 or max_iter < 1:
        raise PreconditionError("tol must be positive and max_iter at least 1")
    bc = regime.bc
    base = regime.base_density
    if deviation:
        p0 = np.asarray(m0, dtype=float)
        m0 = base + p0
    else:
        m0 = np.asarray(m0, dtype=float)
        p0 = m0 - base
    shape = (tg.nt + 1, grid.n_active)
    if initial_guess is None:
        u = np.zeros(shape)
        p = np.zeros(shape)
    else:
        u = np.array(initial_guess[0], dtype=float)
        p = np.array(initial_guess[1], dtype=float) - base
    zero = np.zeros(grid.n_active)
    history = []
    growth = 0
    for it in range(1, max_iter + 1):
        u_new = solve_backward(grid, tg, nu, zero, _hjb_source(grid, cost, regime, u, p), bc=bc)
        p_new = solve_heat_forward(grid, tg, nu, p0, drift_term(grid, base + p, u_new), bc=bc)
        update = max(np.abs(u_new - u).max(), np.abs(p_new - p).max())
        u, p = u_new, p_new
        if not np.isfinite(update):
            raise DivergenceError("Picard iteration produced non-finite values; reduce the data size", residual=update)
        growth = growth + 1 if history and update > history[-1] else 0
        history.append(float(update))
        if update <= tol + rtol * (np.abs(u).max() + np.abs(p).max()):
            return MFGSolution(grid, tg, nu, regime, u, p, m0, it, float(update), history)
        if growth >= GROWTH_LIMIT:
            raise DivergenceError(
                f"Picard update grew {GROWTH_LIMIT} times in a row (last {update:.3e}); reduce the data size",
                residual=update,
            )
    raise NonConvergenceError(f"Picard iteration hit max_iter={max_iter} with update {update:.3e}", residual=update)


def pde_residual(sol: MFGSolution, cost: RunningCost, regime: BoundaryRegime | None = None):
    """Sup-norm residuals ``(r_hjb, r_fp)`` of the discrete equations on unknown nodes."""
    regime = regime or sol.regime
    op = assemble_laplacian(sol.grid, regime.bc)
    dt, nu, grid = sol.tg.dt, sol.nu, sol.grid
    u, m = sol.u, sol.regime.base_density + sol.m_dev
    unk = op.unknowns
    hjb = (u[:-1, unk] - u[1:, unk]) / dt + nu * op.apply(u[:-1])
    hjb -= (eval_cost(cost, m[:-1]) - 0.5 * hamiltonian_term(grid, u[:-1], u[:-1]))[:, unk]
    fp = (m[1:, unk] - m[:-1, unk]) / dt + nu * op.apply(m[1:]) - drift_term(grid, m[1:], u[1:])[:, unk]
    return float(np.abs(hjb).max()), float(np.abs(fp).max())
