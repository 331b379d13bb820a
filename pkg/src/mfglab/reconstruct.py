"""Inverse pipeline: obstacle identification from first-order density traces, then
order-by-order recovery of the cost coefficients from adjoint moments."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .discretization import observation_matrix
from .eigen import eigenpairs
from .errors import AmbiguityError, ConfigurationError, MFGLabError, PreconditionError, StageError
from .geometry import ObstacleSpec, boundary_patch, build_grid
from .linearize import DEFAULT_LADDER, PerturbationBasis, hjb_source, linearize_all
from .measurement import (
    MeasurementRecord,
    WeightFunction,
    linearized_measurement,
    measure,
    measurement_pipeline,
    moment_identity,
    perturb_record,
)
from .mfg import BoundaryRegime, RunningCost
from .parabolic import TimeGrid, adjoint_probe_b, solve_heat_forward, space_time_inner

TIE_FACTOR = 2.0
GAP_LIMIT = 1e-6
DEFAULT_REG = 1e-8
DEFAULT_SEGMENTS = (("bottom", 0.0, 1.0), ("right", 0.0, 1.0), ("top", 0.0, 1.0))


def default_detection_direction(x, y):
    """Positive first-order direction used for obstacle matching."""
    return 0.05 + np.sin(np.pi * x) * np.sin(np.pi * y)


# obstacle ---------------------------------------------------------------------


@dataclass
class ObstacleVerdict:
    chosen: ObstacleSpec | None
    index: int
    residuals: np.ndarray
    margin: float
    candidates: list

    def to_dict(self):
        return {
            "chosen": None if self.chosen is None else self.chosen.to_dict(),
            "index": self.index,
            "margin": _finite_or_str(self.margin),
            "residuals": [float(r) for r in self.residuals],
            "candidates": [c.to_dict() if c is not None else None for c in self.candidates],
        }


def _finite_or_str(v):
    return float(v) if np.isfinite(v) else "inf"


def _sample(func, grid):
    return np.asarray(func(grid.x, grid.y), dtype=float) * np.ones(grid.n_active)


def first_order_trace(obstacle, g1: Callable, regime: BoundaryRegime, tg: TimeGrid, nu: float,
                      domain_size=(1.0, 1.0), resolution=(33, 33), segments=DEFAULT_SEGMENTS):
    """Simulated first-order density trace on the patch for a candidate obstacle.

    At first order the density solves the source-free heat equation in every
    regime (the drift term vanishes with the first-order value function).
    """
    grid = build_grid(domain_size, resolution, obstacle)
    patch = boundary_patch(grid, segments)
    m = solve_heat_forward(grid, tg, nu, _sample(g1, grid), bc=regime.bc)
    obs = observation_matrix(grid, patch, "flux" if regime.kind == "D" else "value")
    return (obs @ m.T).T, patch


def trace_mismatch(a, b, patch, tg: TimeGrid) -> float:
    """Space-time L2 distance on the patch over levels ``1..nt``."""
    d = np.asarray(a)[1:] - np.asarray(b)[1:]
    return float(np.sqrt(tg.dt * np.sum(d**2 * patch.lengths)))


def detect_obstacle(measured_trace, g1: Callable, candidates: Sequence[ObstacleSpec], regime: BoundaryRegime,
                    tg: TimeGrid, nu: float, domain_size=(1.0, 1.0), resolution=(33, 33),
                    segments=DEFAULT_SEGMENTS, tie_factor: float = TIE_FACTOR) -> ObstacleVerdict:
    """Pick the candidate whose simulated trace is closest to the measured one.

    Every candidate within ``tie_factor`` of the best residual is a tie; more than
    one tie raises :class:`AmbiguityError` carrying the tie set.
    """
    candidates = list(candidates)
    if not candidates:
        raise ConfigurationError("candidate set is empty")
    probe_grid = build_grid(domain_size, resolution, candidates[0])
    if not np.all(_sample(g1, probe_grid) > 0):
        raise PreconditionError("the detection direction must be strictly positive")
    residuals = []
    for spec in candidates:
        trace, patch = first_order_trace(spec, g1, regime, tg, nu, domain_size, resolution, segments)
        if trace.shape != np.shape(measured_trace):
            raise PreconditionError("measured trace does not match the observed patch")
        residuals.append(trace_mismatch(trace, measured_trace, patch, tg))
    residuals = np.array(residuals)
    order = np.argsort(residuals, kind="stable")
    best = int(order[0])
    ties = [int(i) for i in order if residuals[i] <= tie_factor * residuals[best]]
    if len(ties) > 1:
        raise AmbiguityError(
            f"{len(ties)} candidates lie within {tie_factor:g}x of the best residual",
            tie_set=[candidates[i] for i in ties],
            residuals=residuals,
        )
    if len(candidates) == 1:
        margin = np.inf
    else:
        runner = residuals[order[1]]
        margin = np.inf if residuals[best] == 0 else float(runner / residuals[best])
    return ObstacleVerdict(candidates[best], best, residuals, margin, candidates)


# coefficients -------------------------------------------------------------------


@dataclass
class CoefficientEstimate:
    """Field ``basis.T @ coefficients`` with the least-squares diagnostics."""

    order: int
    field: np.ndarray
    coefficients: np.ndarray
    basis: np.ndarray
    residual: float
    condition: float
    rank: int
    regularization: float
    noise_floor: float = 0.0
    bias: float = 0.0
    warnings: list = field(default_factory=list)
    error_field: np.ndarray | None = None

    def to_dict(self):
        return {
            "order": self.order,
            "coefficients": self.coefficients.tolist(),
            "residual": self.residual,
            "condition": _finite_or_str(self.condition),
            "rank": self.rank,
            "regularization": self.regularization,
            "noise_floor": self.noise_floor,
            "bias": self.bias,
            "sup_norm": float(np.abs(self.field).max()),
            "warnings": list(self.warnings),
        }


def expansion_basis(grid, bc: str, count: int, nu: float = 1.0) -> np.ndarray:
    """Constant function followed by the ``count`` lowest eigenfunctions, one per row."""
    pairs = eigenpairs(grid, bc, count, nu)
    return np.vstack([np.ones(grid.n_active)] + [p.y for p in pairs])


def moment_kernel(density_product, b, tg: TimeGrid) -> np.ndarray:
    """``sum_{k<nt} dt * product[k] * b[k]`` per node."""
    return tg.dt * np.sum(np.asarray(density_product)[:-1] * np.asarray(b)[:-1], axis=0)


def recover_coefficient(order: int, kernels, data, basis, grid, reg: float = DEFAULT_REG,
                        data_uncertainty=None, gaps=None) -> CoefficientEstimate:
    """Tikhonov least squares for ``sum_j c_j <basis_j, kernel_r> = data_r``.

    Rows are scaled to unit norm first (the probes decay at very different
    rates); ``reg`` is relative to the largest eigenvalue of the scaled normal
    matrix. The noise floor bounds the field error caused by ``data_uncertainty``
    and the least-squares residual plus the estimated regularization shift;
    ``error_field`` is that shift as a signed field (estimate minus truth).
    """
    if gaps is not None and np.any(np.asarray(gaps) > GAP_LIMIT):
        raise PreconditionError(f"adjoint duality gap {np.max(gaps):.2e} exceeds {GAP_LIMIT:g}")
    kernels = np.atleast_2d(np.asarray(kernels, dtype=float))
    data = np.asarray(data, dtype=float)
    basis = np.asarray(basis, dtype=float)
    A = (kernels * grid.area_weights) @ basis.T
    scale = np.linalg.norm(A, axis=1)
    keep = scale > 0
    As = A[keep] / scale[keep, None]
    ds = data[keep] / scale[keep]
    nb = basis.shape[0]
    warnings = []
    if As.shape[0] == 0:
        c = np.zeros(nb)
        return CoefficientEstimate(order, c @ basis, c, basis, 0.0, np.inf, 0, reg, warnings=["all kernels vanish"],
                                  error_field=np.zeros(grid.n_active))
    sv = np.linalg.svd(As, compute_uv=False)
    rank = int(np.sum(sv > sv[0] * max(As.shape) * np.finfo(float).eps))
    condition = float(sv[0] / sv[-1]) if rank == nb else np.inf
    if rank < nb:
        warnings.append(f"rank deficient: rank {rank} below basis size {nb}")
    normal = As.T @ As
    lam = reg * float(np.linalg.eigvalsh(normal).max())
    reg_normal = normal + lam * np.eye(nb)
    c = np.linalg.solve(reg_normal, As.T @ ds)
    fieldv = c @ basis
    res_vec = As @ c - ds
    ginv = np.linalg.solve(reg_normal, As.T)  # coefficients per scaled datum
    field_map = basis.T @ ginv
    gain = float(np.sqrt((field_map**2).sum(axis=1)).max())
    delta = np.zeros(As.shape[0])
    if data_uncertainty is not None:
        delta = np.asarray(data_uncertainty, dtype=float)[keep] / scale[keep]
    bias_field = -(basis.T @ np.linalg.solve(reg_normal, lam * c))
    bias = float(np.abs(bias_field).max())
    floor = gain * (float(np.linalg.norm(delta)) + float(np.linalg.norm(res_vec))) + bias
    return CoefficientEstimate(order, fieldv, c, basis, float(np.linalg.norm(res_vec)), condition, rank, lam,
                               floor, bias, warnings, bias_field)


# planted experiments --------------------------------------------------------------


@dataclass(eq=False)
class PlantedModel:
    """Forward model with a hidden cost; only linearized records leave it.

    ``mode='oracle'`` measures the directly solved linearized systems;
    ``mode='measurement'`` takes difference quotients of the nonlinear solver.
    """

    grid: object
    tg: TimeGrid
    nu: float
    cost: RunningCost
    regime: BoundaryRegime
    weights: list
    mode: str = "measurement"
    ladder: tuple = DEFAULT_LADDER
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("oracle", "measurement"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        self._rng = np.random.default_rng(self.seed)
        self._pipeline = measurement_pipeline(self.grid, self.tg, self.nu, self.cost, self.regime, self.weights)
        self._cache = {}

    def clean_records(self, basis: PerturbationBasis, order) -> list[MeasurementRecord]:
        """Noise-free records, memoized on the directions and the order."""
        order = tuple(order)
        key = (order, tuple(f.tobytes() for f in basis.fields))
        if key not in self._cache:
            if self.mode == "oracle":
                lin = linearize_all(self.grid, self.tg, self.nu, self.cost, basis, self.regime, len(order),
                                    labels=order)
                self._cache[key] = [measure(lin[order], w, self.regime) for w in self.weights]
            else:
                self._cache[key] = linearized_measurement(self._pipeline, basis, order, self.ladder)
        return self._cache[key]

    def linearized_records(self, basis: PerturbationBasis, order) -> list[MeasurementRecord]:
        recs = self.clean_records(basis, order)
        if self.noise:
            recs = [perturb_record(r, self.noise, self._rng) for r in recs]
        return recs

    def first_order_trace(self, g1) -> np.ndarray:
        basis = PerturbationBasis((_sample(g1, self.grid),), (True,))
        return self.linearized_records(basis, (0,))[0].trace


@dataclass
class ProbeDesign:
    """Probe catalogue: eigen probes, auxiliary positive directions for higher
    orders, expansion-basis size, regularization and difference ladder."""

    n_probes: int = 16
    basis_size: int = 16
    aux: tuple = ()
    reg: float = DEFAULT_REG


@dataclass
class CostEstimate:
    cost: RunningCost
    estimates: dict
    moments: dict
    gaps: dict

    def to_dict(self):
        return {
            "expansion_point": self.cost.expansion_point,
            "orders": {str(i): e.to_dict() for i, e in self.estimates.items()},
            "moments": {str(i): np.asarray(m).tolist() for i, m in self.moments.items()},
            "max_gap": {str(i): float(np.max(g)) for i, g in self.gaps.items()},
        }


def aux_fields(design, grid, count):
    aux = [np.asarray(a, dtype=float) * np.ones(grid.n_active) for a in design.aux]
    while len(aux) < count:
        aux.append(np.ones(grid.n_active))
    return aux[:count]


def probe_basis(y, aux, order: int) -> PerturbationBasis:
    """Directions of an order-``order`` probe: the eigen probe then ``order - 1`` auxiliaries."""
    return PerturbationBasis(tuple([y] + list(aux[: order - 1])))


def fetch_records(model, probes, aux, order: int) -> list:
    """Linearized records (one list per probe, one record per weight)."""
    labels = tuple(range(order))
    return [model.linearized_records(probe_basis(y, aux, order), labels) for y in probes]


def order_moments(grid, tg, nu, regime, est_cost, probes, aux, weights, b_fields, records, order: int):
    """Kernels, data, uncertainties and duality gaps for all order-``order`` probes.

    The known part of each source is simulated with ``est_cost`` (whose
    coefficients from ``order`` upward are zero) and subtracted from the data.
    """
    labels = tuple(range(order))
    sign = -1.0 if regime.kind == "D" else 1.0
    kernels, data, delta, gaps = [], [], [], []
    for y, recs in zip(probes, records):
        lin = linearize_all(grid, tg, nu, est_cost, probe_basis(y, aux, order), regime, order)
        prod = np.ones_like(lin[(0,)].m)
        for l in labels:
            prod = prod * lin[(l,)].m
        known = hjb_source(grid, est_cost, regime, labels, lin, lin[labels].m)
        for w, b, rec in zip(weights, b_fields, recs):
            kernels.append(moment_kernel(prod, b, tg))
            data.append(sign * nu * rec.flux_functional - space_time_inner(grid, tg, known, b))
            delta.append(nu * rec.uncertainty)
            interior, boundary, gap = moment_identity(known, b, measure(lin[labels], w, regime), nu, grid, tg)
            gaps.append(gap / max(abs(interior), 1.0))
    return np.array(kernels), np.array(data), np.array(delta), np.array(gaps)


def recover_cost(grid, tg: TimeGrid, nu: float, regime: BoundaryRegime, model: PlantedModel,
                 weights: list[WeightFunction], max_order: int, design: ProbeDesign = ProbeDesign()) -> CostEstimate:
    """Recover ``F^(i)`` for ``i = 1..P`` (expansion about 0) or ``2..P`` (about g0).

    Lower-order densities and the known part of each source are simulated from
    the probe data and the coefficients recovered so far; the hidden cost is only
    reached through ``model.linearized_records``. Errors are propagated to first
    order: each estimate is redone with the lower coefficients corrected by their
    error fields, and the change joins the order's error field and noise floor.
    """
    if max_order < 1:
        raise ConfigurationError("max_order must be at least 1")
    first = 2 if regime.inhomogeneous else 1
    est = RunningCost.zero(grid, max_order, regime.base_density)
    corrected = est
    probes = [p.y for p in eigenpairs(grid, regime.bc, design.n_probes, nu)]
    basis = expansion_basis(grid, regime.bc, design.basis_size, nu)
    aux = aux_fields(design, grid, max_order - 1)
    b_fields = [adjoint_probe_b(grid, tg, nu, w, regime.kind) for w in weights]
    estimates, moments, gaps_all = {}, {}, {}
    for i in range(first, max_order + 1):
        try:
            records = fetch_records(model, probes, aux, i)
            args = (grid, tg, nu, regime)
            kernels, data, delta, gaps = order_moments(*args, est, probes, aux, weights, b_fields, records, i)
            estimate = recover_coefficient(i, kernels, data, basis, grid, design.reg, delta, gaps)
            if i > first:
                _, data_c, _, _ = order_moments(*args, corrected, probes, aux, weights, b_fields, records, i)
                shifted = recover_coefficient(i, kernels, data_c, basis, grid, design.reg)
                propagated = estimate.field - shifted.field
                estimate.error_field = estimate.error_field + propagated
                estimate.noise_floor += float(np.abs(propagated).max())
        except MFGLabError as exc:
            raise StageError(f"order {i} failed: {exc}", partial=CostEstimate(est, estimates, moments, gaps_all)) from exc
        estimates[i], moments[i], gaps_all[i] = estimate, data, gaps
        est = est.with_coefficient(i, estimate.field)
        corrected = corrected.with_coefficient(i, estimate.field - estimate.error_field)
    return CostEstimate(est, estimates, moments, gaps_all)


def moment_gap_table(model_a: PlantedModel, model_b: PlantedModel, probes, aux, orders) -> dict:
    """Per order, the largest difference of the flux moments ``nu * flux`` between
    two models' noise-free records over all probes and weights."""
    table = {}
    for i in orders:
        worst, scale = 0.0, 0.0
        for y in probes:
            basis = probe_basis(y, aux, i)
            labels = tuple(range(i))
            for ra, rb in zip(model_a.clean_records(basis, labels), model_b.clean_records(basis, labels)):
                worst = max(worst, abs(ra.flux_functional - rb.flux_functional))
                scale = max(scale, abs(rb.flux_functional))
        table[i] = {"abs": model_a.nu * worst, "rel": worst / scale if scale > 0 else 0.0}
    return table


def relative_l2_error(grid, estimate, truth) -> float:
    w = grid.area_weights
    num = np.sqrt(np.sum(w * (np.asarray(estimate) - truth) ** 2))
    den = np.sqrt(np.sum(w * np.asarray(truth) ** 2))
    return float(num / den) if den > 0 else float(num)
