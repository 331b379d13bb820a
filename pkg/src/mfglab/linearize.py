"""Higher-order linearization about the base state and difference-quotient extraction.

Orders are tuples of distinct direction labels, e.g. ``(0,)``, ``(0, 1)``,
``(0, 1, 2)``. The derivative systems are the exact derivatives of the discrete
nonlinear system in :mod:`mfglab.mfg`, so difference quotients of the nonlinear
solver converge to them at the stencil's rate.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import PreconditionError, SolverError
from .geometry import Grid
from .mfg import BoundaryRegime, RunningCost, check_compatible, drift_term, hamiltonian_term, solve_mfg
from .parabolic import TimeGrid, solve_backward, solve_heat_forward

MAX_ORDER = 4
DEFAULT_LADDER = (1e-2, 3e-3, 1e-3)


@dataclass(frozen=True, eq=False)
class PerturbationBasis:
    """Initial-density directions ``g_l``; ``positive[l]`` demands ``g_l > 0`` on every active node."""

    fields: tuple
    positive: tuple = ()

    def __post_init__(self):
        fields = tuple(np.asarray(f, dtype=float) for f in self.fields)
        positive = tuple(self.positive) or (False,) * len(fields)
        if len(positive) != len(fields):
            raise PreconditionError("one positivity flag per direction")
        for f, pos in zip(fields, positive):
            if f.shape != fields[0].shape:
                raise PreconditionError("all directions must live on the same grid")
            if pos and not np.all(f > 0):
                raise PreconditionError("a direction flagged positive has non-positive entries")
        object.__setattr__(self, "fields", fields)
        object.__setattr__(self, "positive", positive)

    def __len__(self):
        return len(self.fields)

    def combine(self, labels, eps) -> np.ndarray:
        return sum(e * self.fields[l] for l, e in zip(labels, eps))


@dataclass(eq=False)
class LinearizedSolution:
    order: tuple
    u: np.ndarray
    m: np.ndarray
    tg: TimeGrid | None = None


def _normalize(order) -> tuple:
    order = tuple(sorted(int(o) for o in order))
    if not order:
        raise PreconditionError("order must name at least one direction")
    if len(set(order)) != len(order):
        raise PreconditionError(f"directions in an order must be distinct, got {order}")
    if len(order) > MAX_ORDER:
        raise PreconditionError(f"orders above {MAX_ORDER} are not supported")
    return order


def set_partitions(items: Sequence) -> list[list[tuple]]:
    """All partitions of ``items`` into nonempty blocks (blocks keep input order)."""
    items = list(items)
    if not items:
        return [[]]
    head, rest = items[0], items[1:]
    out = []
    for part in set_partitions(rest):
        out.append([(head,)] + part)
        for i, block in enumerate(part):
            out.append(part[:i] + [(head,) + block] + part[i + 1 :])
    return out


def splits(order: tuple):
    """Ordered pairs ``(A, B)`` of disjoint subsets with union ``order``, ``B`` nonempty."""
    n = len(order)
    for mask in range(2**n - 1):
        a = tuple(order[i] for i in range(n) if mask >> i & 1)
        b = tuple(order[i] for i in range(n) if not mask >> i & 1)
        yield a, b


def hjb_source(grid, cost, regime, order, lower, m_top):
    """Right-hand side of the order-``order`` HJB equation.

    Cost part: sum over set partitions of ``F^(|pi|)`` times the product of the
    block densities (``m_top`` stands in for the full-order density). Hamiltonian
    part: minus the sum over unordered two-block splits of ``grad u_A . grad u_B``.
    """
    base = regime.base_density
    shape = m_top.shape
    src = np.zeros(shape)
    for part in set_partitions(order):
        coef = cost.derivative(len(part), base)
        if not np.any(coef):
            continue
        prod = np.ones(shape)
        for block in part:
            prod = prod * (m_top if block == order else lower[block].m)
        src += coef * prod
    first = order[0]
    for a, b in splits(order):
        if a and first in a:
            src -= hamiltonian_term(grid, lower[a].u, lower[b].u)
    return src


def fp_source(grid, regime, order, lower, u_top):
    """Right-hand side of the order-``order`` FP equation: sum over ordered splits of
    ``div(m_A grad u_B)`` with ``m_{}`` the base density."""
    base = regime.base_density
    src = None
    for a, b in splits(order):
        if not a and base == 0:
            continue
        m_a = np.full_like(u_top, base) if not a else lower[a].m
        u_b = u_top if b == order else lower[b].u
        term = drift_term(grid, m_a, u_b)
        src = term if src is None else src + term
    return src


def _solve_order(grid, tg, nu, cost, regime, order, lower, initial):
    check_compatible(cost, regime)
    missing = [s for s in _proper_subsets(order) if s not in lower]
    if missing:
        raise PreconditionError(f"order {order} needs lower-order solutions for {missing}")
    bc = regime.bc
    zero = np.zeros(grid.n_active)
    levels = np.zeros((tg.nt + 1, grid.n_active))
    # base 0: the density equation is free of u at this order, so solve it first;
    # base g0: the cost's first derivative vanishes, so u comes first
    if regime.inhomogeneous:
        u = solve_backward(grid, tg, nu, zero, hjb_source(grid, cost, regime, order, lower, levels), bc=bc)
        m = solve_heat_forward(grid, tg, nu, initial, fp_source(grid, regime, order, lower, u), bc=bc)
    else:
        src = fp_source(grid, regime, order, lower, levels) if len(order) > 1 else None
        m = solve_heat_forward(grid, tg, nu, initial, src, bc=bc)
        u = solve_backward(grid, tg, nu, zero, hjb_source(grid, cost, regime, order, lower, m), bc=bc)
    return LinearizedSolution(order, u, m, tg)


def _proper_subsets(order):
    return [tuple(c) for r in range(1, len(order)) for c in itertools.combinations(order, r)]


def first_order(grid: Grid, tg: TimeGrid, nu: float, cost: RunningCost, g, regime: BoundaryRegime, label: int = 0):
    """First-order system for the initial direction ``g``."""
    return _solve_order(grid, tg, nu, cost, regime, (label,), {}, np.asarray(g, dtype=float))


def second_order(grid, tg, nu, cost, first_a: LinearizedSolution, first_b: LinearizedSolution, regime):
    """Mixed second-order system for two first-order solutions with distinct labels."""
    order = _normalize(first_a.order + first_b.order)
    lower = {first_a.order: first_a, first_b.order: first_b}
    return _solve_order(grid, tg, nu, cost, regime, order, lower, np.zeros(grid.n_active))


def nth_order(grid, tg, nu, cost, lower: dict, order, regime):
    """Order ``len(order)`` system given every lower-order solution indexed by label tuple."""
    order = _normalize(order)
    if len(order) == 1:
        raise PreconditionError("use first_order for single directions")
    return _solve_order(grid, tg, nu, cost, regime, order, lower, np.zeros(grid.n_active))


def linearize_all(grid, tg, nu, cost, basis: PerturbationBasis, regime, max_order: int, labels=None) -> dict:
    """Every derivative over subsets of ``labels`` up to ``max_order``."""
    labels = tuple(range(len(basis))) if labels is None else tuple(labels)
    out = {}
    for r in range(1, max_order + 1):
        for order in itertools.combinations(labels, r):
            if r == 1:
                out[order] = first_order(grid, tg, nu, cost, basis.fields[order[0]], regime, label=order[0])
            else:
                out[order] = nth_order(grid, tg, nu, cost, out, order, regime)
    return out


# difference quotients ---------------------------------------------------------


def _tree(fn, *xs):
    if isinstance(xs[0], (tuple, list)):
        return type(xs[0])(_tree(fn, *parts) for parts in zip(*xs))
    return fn(*xs)


def frechet_extract(fmap: Callable, basis: PerturbationBasis, order, eps):
    """Mixed derivative of ``fmap`` (perturbation field -> array or tuple of arrays)
    along the labelled directions by the central ``2^N``-point tensor stencil."""
    order = _normalize(order)
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (len(order),))
    total = None
    # fixed summation order for bitwise-reproducible output
    for signs in itertools.product((1.0, -1.0), repeat=len(order)):
        point = np.asarray(signs) * eps
        try:
            val = fmap(basis.combine(order, point))
        except SolverError as exc:
            raise type(exc)(f"{exc} (at eps={point.tolist()})", residual=exc.residual) from exc
        w = float(np.prod(signs))
        total = _tree(lambda v: w * np.asarray(v, dtype=float), val) if total is None else _tree(
            lambda t, v: t + w * np.asarray(v, dtype=float), total, val
        )
    scale = 2.0 ** len(order) * float(np.prod(eps))
    return _tree(lambda t: t / scale, total)


@dataclass
class FrechetLadder:
    """Estimates along an ``eps`` ladder plus a Richardson value from the two finest."""

    eps: tuple
    estimates: list
    extrapolated: object
    spread: float = field(default=0.0)


def frechet_ladder(fmap, basis, order, ladder=DEFAULT_LADDER) -> FrechetLadder:
    ests = [frechet_extract(fmap, basis, order, e) for e in ladder]
    r2 = (ladder[-2] / ladder[-1]) ** 2
    extrap = _tree(lambda a, b: (r2 * b - a) / (r2 - 1.0), ests[-2], ests[-1])
    spread = max(_flatten(_tree(lambda a, b: float(np.abs(a - b).max()), extrap, ests[-1])))
    return FrechetLadder(tuple(ladder), ests, extrap, spread)


def _flatten(x):
    if isinstance(x, (tuple, list)):
        return [v for part in x for v in _flatten(part)]
    return [x]


def solution_map(grid, tg, nu, cost, regime, tol=1e-30, rtol=1e-14, max_iter=200):
    """Perturbation ``delta`` -> ``(u, m - base)`` of the nonlinear solve with ``m0 = base + delta``."""

    def fmap(delta):
        sol = solve_mfg(grid, tg, nu, cost, delta, regime, tol=tol, max_iter=max_iter, rtol=rtol, deviation=True)
        return (sol.u, sol.m_dev)

    return fmap
