"""Experiment configuration: one YAML file, validated into plain dataclasses.

Every key is optional; missing keys take the desk-scale defaults below. Errors
name the offending field and, when the file has one, its line.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigurationError, MFGLabError
from .expr import Expression, parse_expression
from .geometry import EDGES, CandidateFamily, ObstacleSpec, boundary_patch, build_grid
from .measurement import WeightFunction, weight_family
from .mfg import REGIME_TAGS, BoundaryRegime, RunningCost
from .parabolic import TimeGrid

DEFAULTS = {
    "geometry": {
        "domain": [1.0, 1.0],
        "resolution": [33, 33],
        "obstacle": None,
        "patch": [["bottom", 0.0, 1.0], ["right", 0.0, 1.0], ["top", 0.0, 1.0]],
    },
    "time": {"T": 0.5, "nt": 64},
    "nu": 0.2,
    "regime": {"tag": "DH", "g0": 0.0},
    "cost": {"class": None, "order": 3, "coefficients": None},
    "forward": {"initial": "0.1*(0.05 + sin(pi*x)*sin(pi*y))"},
    "linearize": {"directions": ["0.05 + sin(pi*x)*sin(pi*y)", "1 + 0.5*x", "1"], "order": 2},
    "probes": {"count": 16, "basis_size": 16, "aux": ["1", "1 + 0.5*x"]},
    "weights": {"count": 8, "window": [0.1, 0.9], "amplitude": 1.0},
    "ladder": [1e-2, 3e-3, 1e-3],
    "regularization": 1e-8,
    "detection": {"direction": "0.05 + sin(pi*x)*sin(pi*y)", "tie_factor": 2.0},
    "candidates": {
        "shape": "rectangle",
        "centers_x": [0.35, 0.5, 0.65],
        "centers_y": [0.35, 0.5, 0.65],
        "sizes": [0.1, 0.15],
    },
    "solver": {"tol": 1e-10, "max_iter": 200},
    "noise": {"level": 0.0, "seed": 0},
    "output": "mfglab-out",
}


# planted coefficients used when the file gives none, per admissible class
DEFAULT_COEFFICIENTS = {
    "A": {1: "1 + 0.5*sin(pi*x)*sin(pi*y)", 2: "0.5 + 0.4*sin(pi*x)*sin(2*pi*y)"},
    "B": {2: "0.5 + 0.4*sin(pi*x)*sin(2*pi*y)"},
}


class ConfigError(ConfigurationError):
    """Configuration problem at ``path`` (dotted key) and optional ``line``."""

    def __init__(self, message, path="", line=None):
        where = path or "<root>"
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        key = str(key)
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError("unknown key", here)
        if isinstance(base[key], dict) and key not in ("coefficients",) and base[key] and isinstance(value, dict):
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def _line_map(text: str) -> dict:
    """Dotted key path -> 1-based line number, from the YAML node tree."""
    lines = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for knode, vnode in node.value:
                here = f"{path}.{knode.value}" if path else str(knode.value)
                lines[here] = knode.start_mark.line + 1
                walk(vnode, here)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                here = f"{path}.{i}"
                lines[here] = item.start_mark.line + 1
                walk(item, here)

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return lines


@dataclass
class ExperimentConfig:
    """Validated experiment description; ``raw`` is the merged key tree."""

    raw: dict
    obstacle: ObstacleSpec | None
    patch_segments: tuple
    time: TimeGrid
    nu: float
    regime: BoundaryRegime
    cost_class: str
    order: int
    coefficients: dict  # index -> Expression
    initial: Expression
    directions: list
    lin_order: int
    aux: list
    detection: Expression
    candidates: CandidateFamily
    source: str = "<dict>"
    lines: dict = field(default_factory=dict, repr=False)

    # derived objects ---------------------------------------------------------

    @property
    def domain(self) -> tuple:
        return tuple(self.raw["geometry"]["domain"])

    @property
    def resolution(self) -> tuple:
        return tuple(self.raw["geometry"]["resolution"])

    @property
    def seed(self) -> int:
        return int(self.raw["noise"]["seed"])

    @property
    def noise(self) -> float:
        return float(self.raw["noise"]["level"])

    @property
    def ladder(self) -> tuple:
        return tuple(float(e) for e in self.raw["ladder"])

    @property
    def output(self) -> str:
        return str(self.raw["output"])

    def grid(self, obstacle="truth"):
        obs = self.obstacle if obstacle == "truth" else obstacle
        return build_grid(self.domain, self.resolution, obs)

    def patch(self, grid):
        return boundary_patch(grid, self.patch_segments)

    def sample(self, expr: Expression, grid) -> np.ndarray:
        return np.asarray(expr(grid.x, grid.y), dtype=float)

    def weights(self, grid):
        """Weight family on the observed patch, scaled by the configured amplitude."""
        w = self.raw["weights"]
        family = weight_family(self.patch(grid), self.time, int(w["count"]), tuple(w["window"]))
        amp = float(w["amplitude"])
        return [WeightFunction(f.patch, amp * f.values, f.name) for f in family]

    def cost(self, grid) -> RunningCost:
        coeffs = []
        for i in range(1, self.order + 1):
            expr = self.coefficients.get(i)
            coeffs.append(np.zeros(grid.n_active) if expr is None else self.sample(expr, grid))
        return RunningCost(self.regime.base_density if self.cost_class == "B" else 0.0, tuple(coeffs))

    def to_dict(self) -> dict:
        return _jsonable(self.raw)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def load_config(path) -> ExperimentConfig:
    """Read and validate a YAML configuration file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, source=str(path))


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          line=mark.line + 1 if mark else None) from None
    return config_from_dict(data or {}, source=source, lines=_line_map(text))


def config_from_dict(data: dict, source: str = "<dict>", lines: dict | None = None) -> ExperimentConfig:
    lines = lines or {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping")
    try:
        raw = _merge(DEFAULTS, data)
    except ConfigError as exc:
        raise ConfigError("unknown key", exc.path, lines.get(exc.path)) from None
    return _Validator(raw, lines, source).run()


class _Validator:
    def __init__(self, raw, lines, source):
        self.raw = raw
        self.lines = lines
        self.source = source

    def fail(self, path, message):
        raise ConfigError(message, path, self.lines.get(path))

    def get(self, path):
        node = self.raw
        for part in path.split("."):
            node = node[int(part)] if isinstance(node, list) else node[part]
        return node

    def number(self, path, positive=False, integer=False, minimum=None):
        value = self.get(path)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path, f"expected a number, got {value!r}")
        if integer and int(value) != value:
            self.fail(path, f"expected an integer, got {value!r}")
        if not np.isfinite(value):
            self.fail(path, "must be finite")
        if positive and value <= 0:
            self.fail(path, f"must be positive, got {value!r}")
        if minimum is not None and value < minimum:
            self.fail(path, f"must be at least {minimum}, got {value!r}")
        return int(value) if integer else float(value)

    def expr(self, path, value=None):
        value = self.get(path) if value is None else value
        try:
            return parse_expression(value)
        except ConfigurationError as exc:
            self.fail(path, str(exc))

    def pair(self, path, integer=False):
        value = self.get(path)
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            self.fail(path, f"expected two entries, got {value!r}")
        for i in range(2):
            v = value[i]
            if isinstance(v, bool) or not isinstance(v, (int, float)) or v <= 0 or (integer and int(v) != v):
                self.fail(f"{path}.{i}", f"expected a positive {'integer' if integer else 'number'}, got {v!r}")
        return tuple(int(v) if integer else float(v) for v in value)

    def run(self) -> ExperimentConfig:
        raw = self.raw
        self.pair("geometry.domain")
        res = self.pair("geometry.resolution", integer=True)
        if min(res) < 9:
            self.fail("geometry.resolution", f"need at least 9 nodes per axis, got {list(res)}")
        obstacle = None
        if raw["geometry"]["obstacle"] is not None:
            try:
                obstacle = ObstacleSpec.from_dict(raw["geometry"]["obstacle"])
            except (ConfigurationError, TypeError, ValueError) as exc:
                self.fail("geometry.obstacle", str(exc))
        try:
            build_grid(self.pair("geometry.domain"), res, obstacle)
        except ConfigurationError as exc:
            self.fail("geometry.obstacle" if obstacle is not None else "geometry", str(exc))
        segments = []
        patch = raw["geometry"]["patch"]
        if not isinstance(patch, list) or not patch:
            self.fail("geometry.patch", "expected a nonempty list of edge segments")
        for i, seg in enumerate(patch):
            here = f"geometry.patch.{i}"
            if isinstance(seg, str):
                seg = [seg, 0.0, 1.0]
            if not isinstance(seg, list) or len(seg) != 3 or seg[0] not in EDGES:
                self.fail(here, f"expected [edge, start, stop] with edge in {EDGES}, got {seg!r}")
            try:
                a, b = float(seg[1]), float(seg[2])
            except (TypeError, ValueError):
                self.fail(here, "segment bounds must be numbers")
            if not 0.0 <= a < b <= 1.0:
                self.fail(here, f"segment bounds must satisfy 0 <= start < stop <= 1, got {(a, b)}")
            segments.append((seg[0], a, b))

        T = self.number("time.T", positive=True)
        nt = self.number("time.nt", integer=True, minimum=1)
        try:
            tg = TimeGrid(T, nt)
        except MFGLabError as exc:
            self.fail("time.nt", str(exc))
        nu = self.number("nu", positive=True)

        tag = raw["regime"]["tag"]
        if tag not in REGIME_TAGS:
            self.fail("regime.tag", f"unknown regime {tag!r}; expected one of {list(REGIME_TAGS)}")
        g0 = self.number("regime.g0")
        try:
            regime = BoundaryRegime(tag, g0)
        except ConfigurationError as exc:
            self.fail("regime.g0", str(exc))

        cls = raw["cost"]["class"]
        expected = "B" if regime.inhomogeneous else "A"
        if cls is None:
            cls = expected
        if cls not in ("A", "B"):
            self.fail("cost.class", f"expected 'A' or 'B', got {cls!r}")
        if cls != expected:
            self.fail("cost.class", f"class {cls} is incompatible with regime {tag} (A pairs with DH/NH, B with DI/NI)")
        order = self.number("cost.order", integer=True, minimum=1)
        if raw["cost"]["coefficients"] is None:
            raw["cost"]["coefficients"] = {i: e for i, e in DEFAULT_COEFFICIENTS[cls].items() if i <= order}
        coeffs = raw["cost"]["coefficients"]
        if not isinstance(coeffs, dict):
            self.fail("cost.coefficients", "expected a mapping from order to expression")
        parsed = {}
        for key, value in coeffs.items():
            here = f"cost.coefficients.{key}"
            try:
                i = int(key)
            except (TypeError, ValueError):
                self.fail(here, "coefficient keys must be integers")
            if not 1 <= i <= order:
                self.fail(here, f"coefficient index must lie in 1..{order}")
            parsed[i] = self.expr(here, value)
        if cls == "B" and 1 in parsed:
            e = parsed[1]
            if not (e.is_constant() and float(e(0.0, 0.0)) == 0.0):
                self.fail("cost.coefficients.1", "class B costs have a vanishing first derivative at g0")

        initial = self.expr("forward.initial")
        directions = raw["linearize"]["directions"]
        if not isinstance(directions, list) or not directions:
            self.fail("linearize.directions", "expected a nonempty list of expressions")
        dirs = [self.expr(f"linearize.directions.{i}", d) for i, d in enumerate(directions)]
        lin_order = self.number("linearize.order", integer=True, minimum=1)
        if lin_order > len(dirs):
            self.fail("linearize.order", f"order {lin_order} needs at least {lin_order} directions")
        if lin_order > 4:
            self.fail("linearize.order", "orders above 4 are not supported")

        self.number("probes.count", integer=True, minimum=1)
        self.number("probes.basis_size", integer=True, minimum=1)
        aux = raw["probes"]["aux"] or []
        if not isinstance(aux, list):
            self.fail("probes.aux", "expected a list of expressions")
        aux_e = [self.expr(f"probes.aux.{i}", a) for i, a in enumerate(aux)]
        self.number("weights.count", integer=True, minimum=1)
        win = raw["weights"]["window"]
        if not (isinstance(win, list) and len(win) == 2 and 0.0 <= float(win[0]) < float(win[1]) <= 1.0):
            self.fail("weights.window", f"expected [start, stop] with 0 <= start < stop <= 1, got {win!r}")
        self.number("weights.amplitude")
        ladder = raw["ladder"]
        if not isinstance(ladder, list) or len(ladder) < 2:
            self.fail("ladder", "expected at least two step sizes")
        for i in range(len(ladder)):
            self.number(f"ladder.{i}", positive=True)
        if list(ladder) != sorted(ladder, reverse=True) or len(set(ladder)) != len(ladder):
            self.fail("ladder", "step sizes must be strictly decreasing")
        self.number("regularization", minimum=0.0)
        detection = self.expr("detection.direction")
        self.number("detection.tie_factor", minimum=1.0)
        try:
            family = CandidateFamily.from_dict(raw["candidates"])
        except (ConfigurationError, TypeError, ValueError) as exc:
            self.fail("candidates", str(exc))
        self.number("solver.tol", positive=True)
        self.number("solver.max_iter", integer=True, minimum=1)
        self.number("noise.level", minimum=0.0)
        self.number("noise.seed", integer=True, minimum=0)
        if not isinstance(raw["output"], str) or not raw["output"]:
            self.fail("output", "expected a directory name")
        return ExperimentConfig(raw, obstacle, tuple(segments), tg, nu, regime, cls, order, parsed, initial, dirs,
                                lin_order, aux_e, detection, family, self.source, self.lines)
