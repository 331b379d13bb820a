"""Acceptance criteria at desk scale: unit square, 33x33 grid, nt = 64, nu = 0.2.

Each test prints one ``CRITERION n: PASS|FAIL`` line; the lines are repeated in the
terminal summary under "acceptance criteria".
"""

import time

import numpy as np
import pytest

from mfglab.cli import main
from mfglab.config import config_from_dict
from mfglab.geometry import build_grid, candidate_obstacles
from mfglab.linearize import PerturbationBasis
from mfglab.measurement import measurement_pipeline
from mfglab.reconstruct import PlantedModel, ProbeDesign, recover_cost, relative_l2_error
from mfglab.verification import (
    decoupling,
    default_probes,
    distinguishability,
    eigen_quality,
    frechet_consistency,
    green_identity,
    maximum_principle,
    obstacle_identification,
    scaling,
)

from conftest import record_criterion

REGIMES = ("DH", "NH", "DI", "NI")
OBSTACLE = {"shape": "rectangle", "center": [0.5, 0.35], "half_extents": [0.1, 0.1]}


def setup(tag, obstacle=True, **extra):
    """Default-catalogue configuration for one regime, as the CLI would build it."""
    data = {"regime": {"tag": tag, "g0": 0.5 if tag[1] == "I" else 0.0}}
    if obstacle:
        data["geometry"] = {"obstacle": OBSTACLE}
    data.update(extra)
    return config_from_dict(data)


def planted(cfg, grid):
    """Default planted cost with a nonzero cubic term so order-3 sources are exercised."""
    cost = cfg.cost(grid)
    return cost.with_coefficient(3, 0.3 + 0.2 * grid.x)


def report(n, results, extra=""):
    ok = all(r.passed for r in results)
    worst = "; ".join(r.line() for r in results)
    record_criterion(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {extra}{worst}")
    return ok


def test_criterion_1_green_identity():
    results = []
    for tag in REGIMES:
        cfg = setup(tag)
        grid = cfg.grid()
        probes, aux = default_probes(grid, cfg.regime, cfg.nu, 16, [cfg.sample(a, grid) for a in cfg.aux])
        results.append(green_identity(grid, cfg.time, cfg.nu, planted(cfg, grid), cfg.regime, cfg.weights(grid),
                                      probes, aux, orders=(1, 2), threshold=1e-8))
    assert report(1, results)


def test_criterion_2_frechet_consistency():
    results = []
    for tag in REGIMES:
        cfg = setup(tag)
        grid = cfg.grid()
        basis = PerturbationBasis(tuple(cfg.sample(d, grid) for d in cfg.directions), (True,) * 3)
        results.append(frechet_consistency(grid, cfg.time, cfg.nu, planted(cfg, grid), cfg.regime, basis,
                                           ladder=(1e-2, 3e-3, 1e-3), max_order=3, slope_min=1.9, gap_max=1e-5))
    slopes = ", ".join(f"{r.details['slope_min']:.2f}" for r in results)
    assert report(2, results, f"(slopes {slopes}) ")


def test_criterion_3_scaling():
    results = []
    for tag in REGIMES:
        cfg = setup(tag)
        grid = cfg.grid()
        g = cfg.sample(cfg.directions[0], grid)
        results.append(scaling(grid, cfg.time, cfg.nu, planted(cfg, grid), cfg.regime, g,
                               eps=(1e-1, 1e-2, 1e-3, 1e-4), band=0.2, max_iter=30))
    iters = max(max(r.details["iterations"]) for r in results)
    assert report(3, results, f"(max Picard iterations {iters}) ")


def test_criterion_4_maximum_principle():
    results = []
    for tag in REGIMES:
        for obstacle in (True, False):
            cfg = setup(tag, obstacle)
            grid = cfg.grid()
            g = cfg.sample(cfg.directions[0], grid)
            results.append(maximum_principle(grid, cfg.time, cfg.nu, planted(cfg, grid), cfg.regime, g,
                                             amplitude=0.1, floor=-1e-10))
    assert report(4, results)


def test_criterion_5_decoupling():
    results = []
    for tag in ("DI", "NI"):
        cfg = setup(tag)
        grid = cfg.grid()
        g = cfg.sample(cfg.directions[0], grid)
        results.append(decoupling(grid, cfg.time, cfg.nu, planted(cfg, grid), cfg.regime, g, threshold=1e-9))
    assert report(5, results)


def test_criterion_6_eigen_quality():
    results = [eigen_quality(build_grid((1.0, 1.0), (33, 33), None), "DD", 16, 0.2, threshold=1e-8, rel_tol=0.01)]
    for tag in ("DH", "NH"):
        cfg = setup(tag)
        results.append(eigen_quality(cfg.grid(), cfg.regime.bc, 16, 0.2, threshold=1e-8))
    eig = results[0].details["eigenvalues"]
    ratios = f"(lambda_1 / pi^2 = {eig[0] / np.pi**2:.4f}, lambda_2 / pi^2 = {eig[1] / np.pi**2:.4f}) "
    assert report(6, results, ratios)


def test_criterion_7_obstacle_identification():
    results = []
    for tag in REGIMES:
        cfg = setup(tag)
        truth = cfg.obstacle
        cands = candidate_obstacles(cfg.candidates, cfg.domain, cfg.resolution)
        assert truth in cands and len(cands) >= 8
        common = (truth, cands, cfg.regime, lambda grid: cfg.cost(grid), cfg.detection, cfg.time, cfg.nu,
                  cfg.domain, cfg.resolution, cfg.patch_segments, cfg.weights)
        clean, _ = obstacle_identification(*common, noise=0.0, margin_min=10.0, mode="measurement")
        noisy, _ = obstacle_identification(*common, noise=0.01, seed=11, margin_min=2.0, mode="measurement")
        results += [clean, noisy]
    assert report(7, results, f"({len(cands)} candidates) ")


def recovery_run(cfg):
    grid = cfg.grid()
    cost = cfg.cost(grid)
    weights = cfg.weights(grid)
    model = PlantedModel(grid, cfg.time, cfg.nu, cost, cfg.regime, weights, mode="measurement", ladder=cfg.ladder)
    design = ProbeDesign(16, 16, tuple(cfg.sample(a, grid) for a in cfg.aux), 1e-8)
    start = time.perf_counter()
    est = recover_cost(grid, cfg.time, cfg.nu, cfg.regime, model, weights, cfg.order, design)
    return grid, cost, est, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_8_coefficient_recovery():
    lines, ok = [], True
    # class A, order-3 closed loop with a planted-zero cubic term
    grid, cost, est, elapsed = recovery_run(setup("DH", obstacle=False))
    e1 = relative_l2_error(grid, est.estimates[1].field, cost.coefficient(1))
    e2 = relative_l2_error(grid, est.estimates[2].field, cost.coefficient(2))
    f3 = est.estimates[3]
    sup3, floor3 = float(np.abs(f3.field).max()), f3.noise_floor
    ok &= e1 <= 0.05 and e2 <= 0.10 and sup3 < 3 * floor3 and elapsed <= 600
    lines.append(f"DH F1 {e1:.2e} (<= 5e-2), F2 {e2:.2e} (<= 1e-1), |F3| {sup3:.2e} < 3 x floor {floor3:.2e}, "
                 f"order-3 loop {elapsed:.0f}s (<= 600s)")
    # class B
    grid, cost, est, elapsed = recovery_run(setup("DI", obstacle=False, cost={"order": 2}))
    e2b = relative_l2_error(grid, est.estimates[2].field, cost.coefficient(2))
    ok &= e2b <= 0.10
    lines.append(f"DI F2 {e2b:.2e} (<= 1e-1, {elapsed:.0f}s)")
    # class B around an obstacle, with a smooth coefficient the eigen basis can represent
    grid, cost, est, elapsed = recovery_run(setup("NI", cost={"order": 2, "coefficients": {2: "1 + 0.3*x"}}))
    e2o = relative_l2_error(grid, est.estimates[2].field, cost.coefficient(2))
    ok &= e2o <= 0.10
    lines.append(f"NI with obstacle F2 {e2o:.2e} (<= 1e-1, {elapsed:.0f}s)")
    record_criterion(f"CRITERION 8: {'PASS' if ok else 'FAIL'} " + "; ".join(lines))
    assert ok


def records_for(cfg, grid, cost, eps=0.1):
    pipe = measurement_pipeline(grid, cfg.time, cfg.nu, cost, cfg.regime, cfg.weights(grid), tol=1e-10, rtol=0.0)
    recs = []
    for d in cfg.directions[:2]:
        recs += pipe(eps * cfg.sample(d, grid))
    return recs


def test_criterion_9_distinguishability():
    tol = 1e-10
    results = []
    other_obstacle = {"shape": "rectangle", "center": [0.5, 0.65], "half_extents": [0.1, 0.1]}
    pairs = {
        "F1 differs [DH]": ("DH", None, None, lambda g: 0.3 * np.sin(np.pi * g.x) * np.sin(np.pi * g.y), 1),
        "obstacle differs [NH]": ("NH", OBSTACLE, other_obstacle, None, None),
        "F2 differs [DI]": ("DI", None, None, lambda g: 0.5 + 0.3 * g.x, 2),
        "obstacle and F2 differ [NI]": ("NI", OBSTACLE, other_obstacle, lambda g: 1.0 + 0.3 * g.y, 2),
    }
    for name, (tag, obs_a, obs_b, new_coeff, index) in pairs.items():
        cfg_a = setup(tag, obstacle=False, geometry={"obstacle": obs_a})
        cfg_b = setup(tag, obstacle=False, geometry={"obstacle": obs_b})
        ga, gb = cfg_a.grid(), cfg_b.grid()
        ca, cb = cfg_a.cost(ga), cfg_b.cost(gb)
        if new_coeff is not None:
            cb = cb.with_coefficient(index, cb.coefficient(index) + new_coeff(gb))
        results.append(distinguishability(records_for(cfg_a, ga, ca), records_for(cfg_b, gb, cb), tol,
                                          factor=100.0, name=name))
    assert report(9, results)


SMALL_NOISY = """\
geometry:
  resolution: [17, 17]
  obstacle: {shape: rectangle, center: [0.5, 0.35], half_extents: [0.13, 0.13]}
time: {T: 0.5, nt: 16}
regime: {tag: NI, g0: 0.5}
cost: {order: 2, coefficients: {2: "1 + 0.3*x"}}
probes: {count: 6, basis_size: 6}
weights: {count: 4}
candidates: {shape: rectangle, centers_x: [0.35, 0.5, 0.65], centers_y: [0.35, 0.5, 0.65], sizes: [0.13]}
noise: {level: 0.01, seed: 7}
"""


def test_criterion_10_determinism(tmp_path):
    cfg = tmp_path / "noisy.yaml"
    cfg.write_text(SMALL_NOISY)
    outs = []
    for name in ("first", "second"):
        status = main(["reconstruct", "--config", str(cfg), "--out", str(tmp_path / name)])
        assert status == 0
        outs.append(tmp_path / name)
    names = sorted(p.name for p in outs[0].iterdir())
    same = names == sorted(p.name for p in outs[1].iterdir()) and all(
        (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names)
    record_criterion(f"CRITERION 10: {'PASS' if same else 'FAIL'} {len(names)} artifacts byte-identical "
                     f"across two seeded runs")
    assert same
