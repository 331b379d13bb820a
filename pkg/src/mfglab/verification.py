"""Invariant checks shared by ``mfglab verify`` and the acceptance tests.

Each check returns a :class:`CheckResult` holding the measured quantity, the
threshold it is compared against and a small table of supporting numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .eigen import eigenpairs, l2_inner
from .errors import AmbiguityError
from .geometry import NodeClass, build_grid
from .linearize import DEFAULT_LADDER, PerturbationBasis, frechet_extract, frechet_ladder, hjb_source, linearize_all, solution_map
from .measurement import MeasurementRecord, measure, moment_identity, perturb_record
from .mfg import BoundaryRegime, RunningCost, solve_mfg
from .parabolic import TimeGrid, adjoint_probe_b, solve_heat_forward
from .reconstruct import PlantedModel, detect_obstacle, probe_basis


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3e} (threshold {self.threshold:.3e})"

    def to_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "value": _num(self.value),
                "threshold": _num(self.threshold), "details": _clean(self.details)}


def _num(v):
    v = float(v)
    return v if np.isfinite(v) else str(v)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return _num(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def green_identity(grid, tg: TimeGrid, nu, cost: RunningCost, regime: BoundaryRegime, weights, probes, aux,
                   orders=(1, 2), threshold=1e-8) -> CheckResult:
    """Duality gap between the backward source paired with the adjoint probe and
    the measured flux, relative to ``max(|interior|, 1)``, over every probe, order
    and weight."""
    b_fields = [adjoint_probe_b(grid, tg, nu, w, regime.kind) for w in weights]
    worst, table = 0.0, {}
    for order in orders:
        labels = tuple(range(order))
        gmax = 0.0
        for y in probes:
            lin = linearize_all(grid, tg, nu, cost, probe_basis(y, aux, order), regime, order)
            src = hjb_source(grid, cost, regime, labels, lin, lin[labels].m)
            for w, b in zip(weights, b_fields):
                interior, _, gap = moment_identity(src, b, measure(lin[labels], w, regime), nu, grid, tg)
                gmax = max(gmax, gap / max(abs(interior), 1.0))
        table[f"order {order}"] = gmax
        worst = max(worst, gmax)
    return CheckResult(f"green identity [{regime.tag}]", worst <= threshold, worst, threshold, table)


def frechet_consistency(grid, tg, nu, cost, regime, basis: PerturbationBasis, ladder=DEFAULT_LADDER,
                        max_order=3, slope_min=1.9, gap_max=1e-5, tol=1e-30, rtol=1e-14) -> CheckResult:
    """Difference quotients of the nonlinear solve against the direct linearized
    solves: fitted log-log slope over the ladder and the gap at its finest step."""
    max_order = min(max_order, len(basis))
    lin = linearize_all(grid, tg, nu, cost, basis, regime, max_order, labels=tuple(range(max_order)))
    fmap = solution_map(grid, tg, nu, cost, regime, tol=tol, rtol=rtol)
    ok, worst_gap, worst_slope, table = True, 0.0, np.inf, {}
    for r in range(1, max_order + 1):
        order = tuple(range(r))
        gaps = []
        for eps in ladder:
            u, m = frechet_extract(fmap, basis, order, eps)
            gaps.append(max(float(np.abs(u - lin[order].u).max()), float(np.abs(m - lin[order].m).max())))
        slope = float(np.polyfit(np.log(ladder), np.log(np.maximum(gaps, 1e-300)), 1)[0])
        table[f"order {r}"] = {"eps": list(ladder), "gaps": gaps, "slope": slope}
        worst_gap = max(worst_gap, gaps[-1])
        worst_slope = min(worst_slope, slope)
        ok &= slope >= slope_min and gaps[-1] <= gap_max
    table["slope_min"] = worst_slope
    return CheckResult(f"frechet consistency [{regime.tag}]", bool(ok), worst_gap, gap_max, table)


def scaling(grid, tg, nu, cost, regime, direction, eps=(1e-1, 1e-2, 1e-3, 1e-4), band=0.2, max_iter=30,
            tol=1e-12, rtol=1e-12) -> CheckResult:
    """``(|u| + |m - base|) / eps`` stays within ``band`` of its small-data value and
    every Picard run converges within ``max_iter`` iterations."""
    ratios, iters = [], []
    for e in eps:
        sol = solve_mfg(grid, tg, nu, cost, e * np.asarray(direction), regime, tol=tol * e, rtol=rtol,
                        max_iter=max_iter, deviation=True)
        ratios.append((np.abs(sol.u).max() + np.abs(sol.m_dev).max()) / e)
        iters.append(sol.iterations)
    ref = ratios[-1]
    spread = float(max(abs(r / ref - 1.0) for r in ratios))
    ok = spread <= band and max(iters) <= max_iter
    return CheckResult(f"well-posedness scaling [{regime.tag}]", bool(ok), spread, band,
                       {"eps": list(eps), "ratio": ratios, "iterations": iters})


def maximum_principle(grid, tg, nu, cost, regime, direction, amplitude=0.1, floor=-1e-10) -> CheckResult:
    """Nonnegative data keep the density above ``floor``; a positive first-order
    direction gives a strictly positive first-order density at interior nodes for t > 0."""
    direction = np.asarray(direction, dtype=float)
    sol = solve_mfg(grid, tg, nu, cost, amplitude * direction, regime, tol=1e-12, deviation=True)
    m_min = float(sol.m.min())
    lin = linearize_all(grid, tg, nu, cost, PerturbationBasis((direction,), (True,)), regime, 1)
    interior = grid.classes == NodeClass.INTERIOR
    m1_min = float(lin[(0,)].m[1:, interior].min())
    ok = m_min >= floor and m1_min > 0
    return CheckResult(f"maximum principle [{regime.tag}]", bool(ok), m_min, floor,
                       {"min_density": m_min, "min_first_order_interior": m1_min})


def decoupling(grid, tg, nu, cost, regime, direction, ladder=DEFAULT_LADDER, threshold=1e-9) -> CheckResult:
    """First-order value function vanishes (direct solve and extracted derivative)
    and the first-order density equals the pure heat solution."""
    basis = PerturbationBasis((np.asarray(direction, dtype=float),), (True,))
    lin = linearize_all(grid, tg, nu, cost, basis, regime, 1)[(0,)]
    extracted = frechet_ladder(solution_map(grid, tg, nu, cost, regime), basis, (0,), ladder).extrapolated
    heat = solve_heat_forward(grid, tg, nu, basis.fields[0], bc=regime.bc)
    vals = {
        "direct_u1": float(np.abs(lin.u).max()),
        "extracted_u1": float(np.abs(extracted[0]).max()),
        "reduced_vs_full_m1": float(np.abs(lin.m - heat).max()),
    }
    worst = max(vals.values())
    return CheckResult(f"first-order decoupling [{regime.tag}]", worst <= threshold, worst, threshold, vals)


def eigen_quality(grid, bc, count=16, nu=1.0, threshold=1e-8, rel_tol=0.01) -> CheckResult:
    """Residuals and orthonormality of ``count`` pairs; without an obstacle and with
    Dirichlet data the leading eigenvalues are compared with the continuum ones."""
    pairs = eigenpairs(grid, bc, count, nu)
    resid = max(p.residual() for p in pairs)
    gram = np.array([[l2_inner(grid, a.y, b.y) for b in pairs] for a in pairs])
    ortho = float(np.abs(gram - np.eye(count)).max())
    details = {"max_residual": resid, "orthonormality_defect": ortho,
               "eigenvalues": [p.eigenvalue for p in pairs]}
    ok = resid <= threshold and ortho <= threshold
    if grid.obstacle is None and bc == "DD":
        exact = sorted(np.pi**2 * ((i / grid.lx) ** 2 + (j / grid.ly) ** 2) for i in range(1, 6) for j in range(1, 6))
        rel = [abs(p.eigenvalue / e - 1.0) for p, e in zip(pairs[:3], exact[:3])]
        details["continuum_rel_error"] = rel
        ok &= max(rel) <= rel_tol
    return CheckResult(f"eigenpairs [{bc}, K={count}]", bool(ok), max(resid, ortho), threshold, details)


def obstacle_identification(truth, candidates, regime, cost_for_grid, g1, tg, nu, domain, resolution, segments,
                            weights_for, noise=0.0, seed=0, margin_min=10.0, mode="oracle"):
    """Detection on the planted truth; returns the result and the verdict (or the ambiguity error)."""
    grid = build_grid(domain, resolution, truth)
    model = PlantedModel(grid, tg, nu, cost_for_grid(grid), regime, weights_for(grid), mode=mode)
    record = MeasurementRecord(regime.kind, 0.0, model.first_order_trace(g1), "", "")
    if noise:
        record = perturb_record(record, noise, np.random.default_rng(seed))
    name = f"obstacle identification [{regime.tag}, noise {noise:g}]"
    try:
        verdict = detect_obstacle(record.trace, g1, candidates, regime, tg, nu, domain, resolution, segments)
    except AmbiguityError as exc:
        return CheckResult(name, False, 1.0, margin_min, {"ambiguous": len(exc.tie_set)}), exc
    found = verdict.chosen == truth
    ok = found and verdict.margin >= margin_min and len(candidates) >= 8
    return CheckResult(name, bool(ok), verdict.margin, margin_min,
                       {"found": found, "candidates": len(candidates), "index": verdict.index}), verdict


def distinguishability(records_a, records_b, tol, factor=100.0, name="distinguishability") -> CheckResult:
    """Largest record distance over a probe set against ``factor * tol``."""
    dist = max(a.distance(b) for a, b in zip(records_a, records_b))
    return CheckResult(name, dist >= factor * tol, dist, factor * tol)


def default_probes(grid, regime, nu, count, aux_exprs=None, max_order=2):
    """Eigen probes and auxiliary directions of the default catalogue."""
    probes = [p.y for p in eigenpairs(grid, regime.bc, count, nu)]
    aux = [np.asarray(a, dtype=float) * np.ones(grid.n_active) for a in (aux_exprs or [])]
    while len(aux) < max_order - 1:
        aux.append(np.ones(grid.n_active))
    return probes, aux
