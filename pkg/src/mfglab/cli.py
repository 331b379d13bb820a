"""Config-driven command line: ``mfglab <command> --config FILE [--mode M] [--out DIR]``.

Exit codes: 0 ok, 1 a check failed (or the obstacle verdict is ambiguous or
wrong), 2 configuration or precondition error, 3 solver error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .config import ExperimentConfig, load_config
from .eigen import eigenpairs
from .errors import AmbiguityError, ConfigurationError, PreconditionError, SolverError, StageError
from .geometry import candidate_obstacles
from .linearize import PerturbationBasis, frechet_extract, linearize_all, solution_map
from .measurement import linearized_measurement, measure, measurement_pipeline
from .mfg import pde_residual, solve_mfg
from .reconstruct import (
    PlantedModel,
    ProbeDesign,
    aux_fields,
    detect_obstacle,
    moment_gap_table,
    recover_cost,
    relative_l2_error,
)
from . import verification as checks

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3
COMMANDS = ("forward", "linearize", "measure", "verify", "reconstruct")


# artifacts --------------------------------------------------------------------


def _plain(obj):
    """Recursively convert numpy scalars/arrays; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


class ArtifactWriter:
    """Sole writer of a run directory; records what it wrote for the manifest."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files = {}
        self.figures = []

    def _text(self, name, text):
        path = self.out / name
        path.write_text(text)
        self.files[name] = hashlib.sha256(text.encode()).hexdigest()
        return name

    def json(self, name, obj):
        return self._text(name, json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n")

    def field_csv(self, name, grid, values):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["x", "y", "value"])
        for x, y, v in zip(grid.x, grid.y, np.asarray(values, dtype=float)):
            writer.writerow([repr(float(x)), repr(float(y)), repr(float(v))])
        return self._text(name, buf.getvalue())

    def csv_text(self, name, text):
        return self._text(name, text)

    def figure(self, name, fn, *args, **kwargs):
        fn(*args, path=self.out / name, **kwargs)
        self.figures.append(name)
        return name

    def manifest(self, command, config: ExperimentConfig, mode, status):
        body = {
            "command": command,
            "mode": mode,
            "status": status,
            "package_version": __version__,
            "config_hash": config.hash(),
            "config": config.to_dict(),
            "files": dict(sorted(self.files.items())),
            "figures": sorted(self.figures),
        }
        text = json.dumps(_plain(body), sort_keys=True, indent=2) + "\n"
        (self.out / "manifest.json").write_text(text)


def _header(command, config, mode):
    return {"command": command, "mode": mode, "config_hash": config.hash(), "package_version": __version__}


# commands -----------------------------------------------------------------------


def cmd_forward(config: ExperimentConfig, mode: str, writer: ArtifactWriter) -> int:
    grid = config.grid()
    tg, regime = config.time, config.regime
    cost = config.cost(grid)
    delta = config.sample(config.initial, grid)
    solver = config.raw["solver"]
    sol = solve_mfg(grid, tg, config.nu, cost, delta, regime, tol=solver["tol"], max_iter=solver["max_iter"],
                    deviation=True)
    r_hjb, r_fp = pde_residual(sol, cost)
    levels = sorted({0, tg.nt // 2, tg.nt})
    snaps = {}
    for k in levels:
        snaps[f"u_level{k:03d}"] = writer.field_csv(f"u_level{k:03d}.csv", grid, sol.u[k])
        snaps[f"m_level{k:03d}"] = writer.field_csv(f"m_level{k:03d}.csv", grid, sol.m[k])
    report = _header("forward", config, mode) | {
        "grid": grid.describe(),
        "regime": {"tag": regime.tag, "g0": regime.g0},
        "solve": {"provenance": "mfg.solve_mfg", "iterations": sol.iterations, "final_update": sol.final_update,
                  "history": sol.history},
        "residuals": {"provenance": "mfg.pde_residual", "hjb": r_hjb, "fp": r_fp},
        "norms": {"provenance": "mfg.solve_mfg", "u_sup": float(np.abs(sol.u).max()),
                  "m_sup": float(np.abs(sol.m).max()), "m_min": float(sol.m.min()),
                  "m_deviation_sup": float(np.abs(sol.m_dev).max())},
        "snapshots": {"levels": levels, "times": [float(tg.times[k]) for k in levels], "files": snaps},
    }
    writer.json("forward.json", report)
    writer.figure("u_initial.png", plotting.field_figure, grid, sol.u[0], title="value function at t = 0")
    writer.figure("m_final.png", plotting.field_figure, grid, sol.m[-1], title="density at t = T")
    writer.figure("picard_history.png", plotting.history_figure, sol.history)
    print(f"forward: {sol.iterations} Picard iterations, residuals hjb {r_hjb:.2e} fp {r_fp:.2e}")
    return EXIT_OK


def _direction_basis(config, grid, count):
    fields = [config.sample(e, grid) for e in config.directions[:count]]
    return PerturbationBasis(tuple(fields), tuple(bool(np.all(f > 0)) for f in fields))


def cmd_linearize(config: ExperimentConfig, mode: str, writer: ArtifactWriter) -> int:
    grid = config.grid()
    tg, nu, regime = config.time, config.nu, config.regime
    cost = config.cost(grid)
    order = config.lin_order
    basis = _direction_basis(config, grid, order)
    lin = linearize_all(grid, tg, nu, cost, basis, regime, order)
    norms = {
        ",".join(map(str, key)): {"u_sup": float(np.abs(s.u).max()), "m_sup": float(np.abs(s.m).max())}
        for key, s in sorted(lin.items())
    }
    top = tuple(range(order))
    report = _header("linearize", config, mode) | {
        "order": order,
        "solutions": {"provenance": "linearize.linearize_all", "norms": norms},
    }
    if mode == "measurement":
        fmap = solution_map(grid, tg, nu, cost, regime)
        table, series = {}, {}
        for r in range(1, order + 1):
            key = tuple(range(r))
            gaps = []
            for eps in config.ladder:
                u, m = frechet_extract(fmap, basis, key, eps)
                gaps.append(max(float(np.abs(u - lin[key].u).max()), float(np.abs(m - lin[key].m).max())))
            slope = float(np.polyfit(np.log(config.ladder), np.log(np.maximum(gaps, 1e-300)), 1)[0])
            table[str(r)] = {"eps": list(config.ladder), "gaps": gaps, "slope": slope}
            series[f"order {r}"] = gaps
        report["difference_quotients"] = {"provenance": "linearize.frechet_extract", "orders": table}
        writer.figure("frechet_convergence.png", plotting.convergence_figure, config.ladder, series)
    writer.field_csv("u_top_level000.csv", grid, lin[top].u[0])
    writer.field_csv(f"m_top_level{tg.nt:03d}.csv", grid, lin[top].m[-1])
    writer.json("linearize.json", report)
    writer.figure("m_top_final.png", plotting.field_figure, grid, lin[top].m[-1],
                  title=f"order-{order} density at t = T")
    print(f"linearize: solved {len(lin)} derivative systems up to order {order}")
    return EXIT_OK


def cmd_measure(config: ExperimentConfig, mode: str, writer: ArtifactWriter) -> int:
    grid = config.grid()
    tg, nu, regime = config.time, config.nu, config.regime
    cost = config.cost(grid)
    weights = config.weights(grid)
    patch = weights[0].patch
    solver = config.raw["solver"]
    sol = solve_mfg(grid, tg, nu, cost, config.sample(config.initial, grid), regime, tol=solver["tol"],
                    max_iter=solver["max_iter"], deviation=True)
    nonlinear = [measure(sol, w, regime) for w in weights]
    order = config.lin_order
    basis = _direction_basis(config, grid, order)
    top = tuple(range(order))
    if mode == "oracle":
        lin = linearize_all(grid, tg, nu, cost, basis, regime, order)
        linear = [measure(lin[top], w, regime) for w in weights]
        prov = "measurement.measure(linearize.linearize_all)"
    else:
        pipeline = measurement_pipeline(grid, tg, nu, cost, regime, weights)
        linear = linearized_measurement(pipeline, basis, top, config.ladder)
        prov = "measurement.linearized_measurement"
    report = _header("measure", config, mode) | {
        "patch": patch.key,
        "nonlinear": {"provenance": "measurement.measure", "records": [r.to_dict() for r in nonlinear]},
        "linearized": {"provenance": prov, "order": list(top), "records": [r.to_dict() for r in linear]},
    }
    writer.csv_text("trace_nonlinear.csv", nonlinear[0].to_csv(tg, patch))
    writer.csv_text("trace_linearized.csv", linear[0].to_csv(tg, patch))
    writer.json("measure.json", report)
    writer.figure("trace_nonlinear.png", plotting.trace_figure, tg.times, patch.arclength, nonlinear[0].trace,
                  title="density trace on the observed patch")
    writer.figure("trace_linearized.png", plotting.trace_figure, tg.times, patch.arclength, linear[0].trace,
                  title=f"order-{order} density trace")
    print(f"measure: {len(weights)} weights, nonlinear and order-{order} records written")
    return EXIT_OK


def run_checks(config: ExperimentConfig) -> list:
    grid = config.grid()
    tg, nu, regime = config.time, config.nu, config.regime
    cost = config.cost(grid)
    weights = config.weights(grid)
    p = config.raw["probes"]
    probes, aux = checks.default_probes(grid, regime, nu, int(p["count"]),
                                        [config.sample(a, grid) for a in config.aux], max_order=2)
    basis = _direction_basis(config, grid, min(3, len(config.directions)))
    g = basis.fields[0]
    results = [
        checks.eigen_quality(grid, regime.bc, int(p["count"]), nu),
        checks.green_identity(grid, tg, nu, cost, regime, weights, probes, aux),
        checks.frechet_consistency(grid, tg, nu, cost, regime, basis, config.ladder),
        checks.scaling(grid, tg, nu, cost, regime, g),
        checks.maximum_principle(grid, tg, nu, cost, regime, g),
    ]
    if regime.inhomogeneous:
        results.append(checks.decoupling(grid, tg, nu, cost, regime, g, config.ladder))
    return results


def cmd_verify(config: ExperimentConfig, mode: str, writer: ArtifactWriter) -> int:
    results = run_checks(config)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    writer.json("verify.json", _header("verify", config, mode) | {
        "provenance": "verification",
        "passed": ok,
        "checks": [r.to_dict() for r in results],
    })
    return EXIT_OK if ok else EXIT_CHECK


def cmd_reconstruct(config: ExperimentConfig, mode: str, writer: ArtifactWriter) -> int:
    tg, nu, regime = config.time, config.nu, config.regime
    truth = config.obstacle
    grid = config.grid()
    cost = config.cost(grid)
    model = PlantedModel(grid, tg, nu, cost, regime, config.weights(grid), mode=mode, ladder=config.ladder,
                         noise=config.noise, seed=config.seed)
    report = _header("reconstruct", config, mode) | {
        "truth": {"note": "planted truth, used only for the error tables",
                  "obstacle": None if truth is None else truth.to_dict(),
                  "coefficients": {str(i): e.text for i, e in sorted(config.coefficients.items())}},
    }

    # obstacle
    if truth is None:
        report["obstacle"] = {"provenance": "reconstruct.detect_obstacle", "skipped": "no obstacle planted"}
    else:
        candidates = candidate_obstacles(config.candidates, config.domain, config.resolution)
        g1 = config.detection
        measured = model.first_order_trace(g1)
        try:
            verdict = detect_obstacle(measured, g1, candidates, regime, tg, nu, config.domain, config.resolution,
                                      config.patch_segments, float(config.raw["detection"]["tie_factor"]))
        except AmbiguityError as exc:
            report["obstacle"] = {"provenance": "reconstruct.detect_obstacle", "ambiguous": True,
                                  "message": str(exc), "tie_set": [c.to_dict() for c in exc.tie_set],
                                  "residuals": exc.residuals}
            writer.json("reconstruct.json", report)
            print(f"reconstruct: {exc}", file=sys.stderr)
            return EXIT_CHECK
        found = verdict.chosen == truth
        report["obstacle"] = {"provenance": "reconstruct.detect_obstacle", "found_truth": found} | verdict.to_dict()
        writer.figure("obstacle_residuals.png", plotting.residual_figure, verdict.residuals, verdict.index)
        print(f"reconstruct: obstacle candidate {verdict.index} chosen, margin {verdict.margin:.3g}, "
              f"{'matches' if found else 'DIFFERS FROM'} the planted obstacle")
        if not found:
            report["coefficients"] = {"skipped": "obstacle misidentified; coefficients not attempted"}
            writer.json("reconstruct.json", report)
            return EXIT_CHECK

    # coefficients
    p = config.raw["probes"]
    design = ProbeDesign(int(p["count"]), int(p["basis_size"]),
                         tuple(config.sample(a, grid) for a in config.aux), float(config.raw["regularization"]))
    weights = config.weights(grid)
    try:
        est = recover_cost(grid, tg, nu, regime, model, weights, config.order, design)
    except StageError as exc:
        report["coefficients"] = {"provenance": "reconstruct.recover_cost", "failed": str(exc),
                                  "partial": exc.partial.to_dict() if exc.partial else None}
        writer.json("reconstruct.json", report)
        raise
    orders = {}
    for i, e in est.estimates.items():
        truth_i = cost.coefficient(i)
        err_sup = float(np.abs(e.field - truth_i).max())
        orders[str(i)] = e.to_dict() | {
            "provenance": "reconstruct.recover_coefficient",
            "relative_l2_error": relative_l2_error(grid, e.field, truth_i),
            "sup_error": err_sup,
            "truth_sup": float(np.abs(truth_i).max()),
            "error_over_floor": err_sup / e.noise_floor if e.noise_floor > 0 else float("inf"),
        }
        writer.field_csv(f"coefficient_{i}_estimate.csv", grid, e.field)
        writer.field_csv(f"coefficient_{i}_truth.csv", grid, truth_i)
        writer.figure(f"coefficient_{i}.png", plotting.comparison_figure, grid, e.field, truth_i,
                      title=f"coefficient of order {i}")
        print(f"reconstruct: order {i} relative L2 error {orders[str(i)]['relative_l2_error']:.3e}, "
              f"sup error {err_sup:.3e}, noise floor {e.noise_floor:.3e}, condition {e.condition:.3e}")
    # moment agreement between the two record paths; in oracle mode only the lowest order is compared
    other = PlantedModel(grid, tg, nu, cost, regime, weights, mode="oracle" if mode == "measurement" else "measurement",
                         ladder=config.ladder)
    probes = [pair.y for pair in eigenpairs(grid, regime.bc, design.n_probes, nu)]
    gap_orders = sorted(est.estimates) if mode == "measurement" else [min(est.estimates)]
    aux = aux_fields(design, grid, max(config.order - 1, 1))
    gaps = moment_gap_table(model, other, probes, aux, gap_orders)
    report["coefficients"] = {"provenance": "reconstruct.recover_cost", "orders": orders,
                              "max_duality_gap": {str(i): float(np.max(g)) for i, g in est.gaps.items()}}
    report["moment_gaps"] = {"provenance": "reconstruct.moment_gap_table",
                             "compared": f"{mode} vs {other.mode}", "orders": gaps}
    writer.json("reconstruct.json", report)
    return EXIT_OK


HANDLERS = {
    "forward": cmd_forward,
    "linearize": cmd_linearize,
    "measure": cmd_measure,
    "verify": cmd_verify,
    "reconstruct": cmd_reconstruct,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfglab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mfglab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment file")
        p.add_argument("--mode", choices=("oracle", "measurement"), default="measurement",
                       help="record path: direct linearized solves or difference quotients of the nonlinear solver")
        p.add_argument("--out", default=None, help="output directory (overrides the config's 'output')")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    writer = ArtifactWriter(Path(args.out or config.output))
    start = time.perf_counter()
    status = EXIT_SOLVER
    try:
        status = HANDLERS[args.command](config, args.mode, writer)
    except (ConfigurationError, PreconditionError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        status = EXIT_CONFIG
    except (SolverError, StageError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        status = EXIT_SOLVER
    finally:
        writer.manifest(args.command, config, args.mode, status)
    print(f"{args.command}: exit {status} after {time.perf_counter() - start:.1f}s; artifacts in {writer.out}")
    return status


if __name__ == "__main__":
    sys.exit(main())
