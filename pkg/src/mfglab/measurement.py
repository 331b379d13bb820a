"""Partial-boundary measurements, the discrete duality identity and linearized records."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .discretization import observation_matrix
from .errors import ConfigurationError, PreconditionError, ValidationError
from .geometry import BoundaryPatch, Grid
from .linearize import DEFAULT_LADDER, frechet_extract, frechet_ladder
from .mfg import BoundaryRegime, solve_mfg
from .parabolic import TimeGrid, probe_kind, space_time_inner


def _bump(a, b, x):
    x = np.asarray(x, dtype=float)
    return np.where((x > a) & (x < b), 4.0 * (x - a) * (b - x) / (b - a) ** 2, 0.0)


@dataclass(frozen=True, eq=False)
class WeightFunction:
    """Nonnegative weight on the observed patch, one row per time level."""

    patch: BoundaryPatch
    values: np.ndarray
    name: str = "weight"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 2 or values.shape[1] != self.patch.size:
            raise PreconditionError(f"weight needs shape (levels, {self.patch.size}), got {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValidationError("weight hypothesis violated: the weight must be finite and nonnegative")
        if not np.any(values > 0):
            raise ValidationError("weight hypothesis violated: a nonnegative weight must not vanish identically")

    @property
    def compactly_supported(self) -> bool:
        v = self.values
        return bool(not v[0].any() and not v[-1].any() and not v[:, 0].any() and not v[:, -1].any())


def bump_weight(patch: BoundaryPatch, tg: TimeGrid, arc=(0.0, 1.0), window=(0.1, 0.9), name=None) -> WeightFunction:
    """Quadratic bump in normalized arclength on ``arc`` times a quadratic bump in
    ``t / T`` on ``window``; peak value 1."""
    s = patch.arclength / patch.arclength[-1]
    tau = tg.times / tg.T
    values = np.outer(_bump(*window, tau), _bump(*arc, s))
    return WeightFunction(patch, values, name or f"bump[{arc[0]:g},{arc[1]:g}]x[{window[0]:g},{window[1]:g}]")


def weight_family(patch: BoundaryPatch, tg: TimeGrid, count: int = 1, window=(0.1, 0.9)) -> list[WeightFunction]:
    """``count`` bumps on consecutive equal arcs of the patch."""
    if count < 1:
        raise ConfigurationError("weight count must be at least 1")
    edges = np.linspace(0.0, 1.0, count + 1)
    return [bump_weight(patch, tg, (edges[i], edges[i + 1]), window) for i in range(count)]


@dataclass(eq=False)
class MeasurementRecord:
    """Weighted flux functional of ``u`` and the density trace on the patch.

    ``kind='D'``: functional of the outward normal derivative of ``u``, trace of
    the normal derivative of ``m``. ``kind='N'``: values instead of derivatives.
    """

    kind: str
    flux_functional: float
    trace: np.ndarray
    patch_id: str
    weight_id: str
    order: tuple = ()
    uncertainty: float = 0.0

    def to_dict(self):
        return {
            "regime": self.kind,
            "patch": self.patch_id,
            "weight": self.weight_id,
            "order": list(self.order),
            "flux": self.flux_functional,
            "uncertainty": self.uncertainty,
            "levels": int(self.trace.shape[0]),
            "trace": self.trace.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        trace = np.asarray(data["trace"], dtype=float).reshape(data["levels"], -1)
        return cls(data["regime"], float(data["flux"]), trace, data["patch"], data["weight"],
                   tuple(data.get("order", ())), float(data.get("uncertainty", 0.0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str):
        return cls.from_dict(json.loads(text))

    def to_csv(self, tg: TimeGrid, patch: BoundaryPatch) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "s", "value"])
        for k, t in enumerate(tg.times):
            for s, v in zip(patch.arclength, self.trace[k]):
                writer.writerow([repr(float(t)), repr(float(s)), repr(float(v))])
        return buf.getvalue()

    def distance(self, other) -> float:
        """Sup-norm difference over the flux value and the trace."""
        return max(abs(self.flux_functional - other.flux_functional), float(np.abs(self.trace - other.trace).max()))


def _fields(sol, part):
    if hasattr(sol, "m_dev"):
        return sol.u, (sol.m_dev if part == "deviation" else sol.m)
    return sol.u, sol.m


def measure(sol, weight: WeightFunction, regime, part: str = "full") -> MeasurementRecord:
    """Record of a solution (nonlinear or linearized) on the weight's patch.

    ``part='deviation'`` measures ``m - base`` instead of ``m``; the two differ by
    a constant trace in the value family and not at all in the flux family.
    """
    kind = probe_kind(regime.kind if isinstance(regime, BoundaryRegime) else regime)
    patch = weight.patch
    grid = patch.grid
    u, m = _fields(sol, part)
    u = np.asarray(u)
    if u.shape[0] != weight.values.shape[0] or u.shape[-1] != grid.n_active:
        raise PreconditionError("solution and weight live on different grids or time grids")
    obs = observation_matrix(grid, patch, "flux" if kind == "D" else "value")
    dt = _dt_of(sol)
    u_obs = (obs @ u.T).T
    flux = float(dt * np.sum(u_obs[1:] * weight.values[1:] * patch.lengths))
    trace = (obs @ np.asarray(m).T).T
    return MeasurementRecord(kind, flux, trace, patch.key, weight.name, tuple(getattr(sol, "order", ())))


def _dt_of(sol):
    tg = getattr(sol, "tg", None)
    if tg is None:
        raise PreconditionError("solution carries no time grid; attach one as `tg`")
    return tg.dt


def moment_identity(source, b, record: MeasurementRecord, nu: float, grid: Grid, tg: TimeGrid):
    """``(interior, boundary, gap)`` for the duality between a backward source and
    the adjoint probe: ``interior = sum_{k<nt} dt <source[k], b[k]>`` and
    ``boundary = -nu * flux`` (flux family) or ``+nu * flux`` (value family)."""
    source = np.asarray(source)
    b = np.asarray(b)
    if source.shape != b.shape or source.shape != (tg.nt + 1, grid.n_active):
        raise PreconditionError("source and probe must share the grid and time grid")
    interior = space_time_inner(grid, tg, source, b)
    sign = -1.0 if record.kind == "D" else 1.0
    boundary = sign * nu * record.flux_functional
    return interior, boundary, abs(interior - boundary)


def measurement_pipeline(grid, tg, nu, cost, regime: BoundaryRegime, weights,
                         tol=1e-30, rtol=1e-14, max_iter=200):
    """Initial perturbation ``delta`` (``m0 = base + delta``) -> deviation record(s).

    ``weights`` may be a single weight or a list; one nonlinear solve serves all.
    """
    single = isinstance(weights, WeightFunction)
    weights = [weights] if single else list(weights)

    def pipeline(delta):
        sol = solve_mfg(grid, tg, nu, cost, delta, regime, tol=tol, rtol=rtol, max_iter=max_iter, deviation=True)
        recs = [measure(sol, w, regime, part="deviation") for w in weights]
        return recs[0] if single else recs

    return pipeline


def linearized_measurement(pipeline, basis, order, eps=DEFAULT_LADDER):
    """Difference-quotient derivative of a measurement pipeline, component-wise.

    A scalar ``eps`` gives one stencil; a ladder gives the Richardson value of the
    two finest, with ``uncertainty`` set to the flux distance from the finest
    estimate. Returns one record, or a list if the pipeline yields a list.
    """
    template = {}

    def fmap(delta):
        recs = pipeline(delta)
        single = isinstance(recs, MeasurementRecord)
        recs = [recs] if single else recs
        template.setdefault("recs", (single, recs))
        return tuple((np.array(r.flux_functional), r.trace) for r in recs)

    if np.ndim(eps) == 0:
        values = frechet_extract(fmap, basis, order, eps)
        spreads = [0.0] * len(values)
    else:
        ladder = frechet_ladder(fmap, basis, order, tuple(eps))
        values = ladder.extrapolated
        spreads = [abs(float(v[0] - f[0])) for v, f in zip(values, ladder.estimates[-1])]
    single, recs = template["recs"]
    out = [
        MeasurementRecord(r.kind, float(v[0]), np.asarray(v[1]), r.patch_id, r.weight_id, tuple(sorted(order)), sp)
        for r, v, sp in zip(recs, values, spreads)
    ]
    return out[0] if single else out


def perturb_record(record: MeasurementRecord, sigma: float, rng, mode: str = "multiplicative") -> MeasurementRecord:
    """Gaussian noise on the trace: ``trace * (1 + sigma xi)`` or ``trace + sigma xi``."""
    xi = rng.standard_normal(record.trace.shape)
    if mode == "multiplicative":
        trace = record.trace * (1.0 + sigma * xi)
    elif mode == "additive":
        trace = record.trace + sigma * xi
    else:
        raise ConfigurationError(f"unknown noise mode {mode!r}")
    return MeasurementRecord(record.kind, record.flux_functional, trace, record.patch_id, record.weight_id,
                             record.order, record.uncertainty)
