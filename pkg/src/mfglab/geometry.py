"""Rectangular lattice over the outer domain with a voxelized obstacle.

Nodes live at ``(i * hx, j * hy)`` for ``0 <= i < nx`` and ``0 <= j < ny``;
flat node index is ``i * ny + j``. Every node gets one of four classes:

* ``INTERIOR``  -- active, not on the outer edge, no excluded neighbour
* ``OUTER``     -- on the edge of the lattice (the outer boundary)
* ``INNER``     -- active node with an excluded axis neighbour (obstacle boundary)
* ``EXCLUDED``  -- strictly inside the obstacle

The obstacle boundary is imposed on the ``INNER`` layer.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, GeometryError

MIN_RESOLUTION = 9
# excluded nodes keep this many lattice steps from the edge (two active layers between)
EDGE_CLEARANCE = 3


class NodeClass(IntEnum):
    INTERIOR = 0
    OUTER = 1
    INNER = 2
    EXCLUDED = 3


EDGES = ("left", "right", "bottom", "top")


@dataclass(frozen=True)
class ObstacleSpec:
    """Rectangle (``half_extents``) or disk (``radius``) centred at ``center``."""

    shape: str
    center: tuple[float, float]
    half_extents: tuple[float, float] | None = None
    radius: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if self.shape == "rectangle":
            if self.half_extents is None:
                raise ConfigurationError("rectangle obstacle needs half_extents")
            he = tuple(float(a) for a in self.half_extents)
            if len(he) != 2 or min(he) <= 0:
                raise ConfigurationError(f"bad half_extents {self.half_extents!r}")
            object.__setattr__(self, "half_extents", he)
        elif self.shape == "disk":
            if self.radius is None or float(self.radius) <= 0:
                raise ConfigurationError("disk obstacle needs a positive radius")
            object.__setattr__(self, "radius", float(self.radius))
        else:
            raise ConfigurationError(f"unknown obstacle shape {self.shape!r}")

    def bounding_box(self):
        cx, cy = self.center
        if self.shape == "rectangle":
            ax, ay = self.half_extents
        else:
            ax = ay = self.radius
        return cx - ax, cx + ax, cy - ay, cy + ay

    def contains(self, x, y):
        """Strict inclusion test, vectorized over coordinate arrays."""
        cx, cy = self.center
        if self.shape == "rectangle":
            ax, ay = self.half_extents
            return (np.abs(x - cx) < ax) & (np.abs(y - cy) < ay)
        return (x - cx) ** 2 + (y - cy) ** 2 < self.radius**2

    def to_dict(self):
        out = {"shape": self.shape, "center": list(self.center)}
        if self.shape == "rectangle":
            out["half_extents"] = list(self.half_extents)
        else:
            out["radius"] = self.radius
        return out

    @classmethod
    def from_dict(cls, data):
        if data is None:
            return None
        data = dict(data)
        shape = data.pop("shape", None)
        center = data.pop("center", None)
        if shape is None or center is None:
            raise ConfigurationError("obstacle needs 'shape' and 'center'")
        he = data.pop("half_extents", None)
        radius = data.pop("radius", None)
        if data:
            raise ConfigurationError(f"unknown obstacle keys {sorted(data)}")
        return cls(shape, tuple(center), tuple(he) if he is not None else None, radius)


@dataclass(eq=False)
class Grid:
    """Classified lattice. Treat as immutable; identity doubles as grid identity."""

    nx: int
    ny: int
    lx: float
    ly: float
    obstacle: ObstacleSpec | None
    node_class: np.ndarray  # (nx, ny) of NodeClass values
    _active_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.node_class = np.asarray(self.node_class, dtype=np.int8)
        self.node_class.setflags(write=False)
        flat = self.node_class.ravel()
        active = np.flatnonzero(flat != NodeClass.EXCLUDED)
        idx = np.full(flat.size, -1, dtype=np.int64)
        idx[active] = np.arange(active.size)
        self._active_index = idx
        self.active_nodes = active  # flat lattice indices of active nodes
        xs = np.arange(self.nx) * self.hx
        ys = np.arange(self.ny) * self.hy
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        self.x = X.ravel()[active]
        self.y = Y.ravel()[active]
        self.classes = flat[active].astype(np.int8)
        ii, jj = np.divmod(active, self.ny)
        self.i = ii
        self.j = jj

    @property
    def hx(self) -> float:
        return self.lx / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.ly / (self.ny - 1)

    @property
    def n_active(self) -> int:
        return self.active_nodes.size

    def active_index(self, i, j):
        """Active-node index of lattice node ``(i, j)``; -1 when excluded."""
        return self._active_index[np.asarray(i) * self.ny + np.asarray(j)]

    def mask(self, cls: NodeClass) -> np.ndarray:
        """Boolean mask over active nodes."""
        return self.classes == cls

    def count(self, cls: NodeClass) -> int:
        return int(np.count_nonzero(self.node_class == cls))

    @property
    def area_weights(self) -> np.ndarray:
        """Dual-cell area of each active node (trapezoid factors on the edge)."""
        wx = np.where((self.i == 0) | (self.i == self.nx - 1), 0.5, 1.0)
        wy = np.where((self.j == 0) | (self.j == self.ny - 1), 0.5, 1.0)
        return wx * wy * self.hx * self.hy

    def on_edge(self, edge: str) -> np.ndarray:
        """Mask of active nodes lying on one edge of the lattice."""
        if edge == "left":
            return self.i == 0
        if edge == "right":
            return self.i == self.nx - 1
        if edge == "bottom":
            return self.j == 0
        if edge == "top":
            return self.j == self.ny - 1
        raise ConfigurationError(f"unknown edge {edge!r}")

    def lattice(self, values, fill=np.nan):
        """Scatter an active-node field back onto the ``(nx, ny)`` lattice."""
        out = np.full(self.nx * self.ny, fill, dtype=float)
        out[self.active_nodes] = values
        return out.reshape(self.nx, self.ny)

    def evaluate(self, func):
        """Sample ``func(x, y)`` on the active nodes."""
        vals = np.asarray(func(self.x, self.y), dtype=float)
        return np.broadcast_to(vals, (self.n_active,)).copy()

    def describe(self):
        return {
            "domain_size": [self.lx, self.ly],
            "resolution": [self.nx, self.ny],
            "obstacle": None if self.obstacle is None else self.obstacle.to_dict(),
            "counts": {c.name.lower(): self.count(c) for c in NodeClass},
        }


def _classify(nx, ny, excluded):
    cls = np.full((nx, ny), NodeClass.INTERIOR, dtype=np.int8)
    cls[0, :] = cls[-1, :] = NodeClass.OUTER
    cls[:, 0] = cls[:, -1] = NodeClass.OUTER
    near = np.zeros_like(excluded)
    near[1:, :] |= excluded[:-1, :]
    near[:-1, :] |= excluded[1:, :]
    near[:, 1:] |= excluded[:, :-1]
    near[:, :-1] |= excluded[:, 1:]
    cls[near & ~excluded & (cls == NodeClass.INTERIOR)] = NodeClass.INNER
    cls[excluded] = NodeClass.EXCLUDED
    return cls


def _connected(mask):
    """Breadth-first check that the True cells of ``mask`` form one 4-connected set."""
    cells = np.argwhere(mask)
    if cells.size == 0:
        return False
    seen = np.zeros_like(mask, dtype=bool)
    start = tuple(cells[0])
    seen[start] = True
    queue = deque([start])
    count = 1
    nx, ny = mask.shape
    while queue:
        i, j = queue.popleft()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            a, b = i + di, j + dj
            if 0 <= a < nx and 0 <= b < ny and mask[a, b] and not seen[a, b]:
                seen[a, b] = True
                count += 1
                queue.append((a, b))
    return count == len(cells)


def excluded_mask(domain_size, resolution, obstacle):
    nx, ny = resolution
    lx, ly = domain_size
    if obstacle is None:
        return np.zeros((nx, ny), dtype=bool)
    xs = np.linspace(0.0, lx, nx)
    ys = np.linspace(0.0, ly, ny)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return np.asarray(obstacle.contains(X, Y), dtype=bool)


def build_grid(domain_size=(1.0, 1.0), resolution=(33, 33), obstacle=None) -> Grid:
    """Classify the lattice for an optional obstacle.

    Raises GeometryError when the obstacle is not compactly inside the domain,
    keeps fewer than two active layers to the edge, resolves to no node, or
    disconnects the active set.
    """
    nx, ny = (int(r) for r in resolution)
    lx, ly = (float(s) for s in domain_size)
    if nx < MIN_RESOLUTION or ny < MIN_RESOLUTION:
        raise ConfigurationError(f"resolution must be >= {MIN_RESOLUTION} per axis, got {(nx, ny)}")
    if lx <= 0 or ly <= 0:
        raise ConfigurationError(f"domain size must be positive, got {(lx, ly)}")
    if obstacle is not None:
        x0, x1, y0, y1 = obstacle.bounding_box()
        if not (0.0 < x0 and x1 < lx and 0.0 < y0 and y1 < ly):
            raise GeometryError(f"obstacle {obstacle} is not compactly contained in the domain")
    excluded = excluded_mask((lx, ly), (nx, ny), obstacle)
    if obstacle is not None:
        if not excluded.any():
            raise GeometryError(f"obstacle {obstacle} covers no lattice node at this resolution")
        ii, jj = np.nonzero(excluded)
        clearance = min(ii.min(), jj.min(), nx - 1 - ii.max(), ny - 1 - jj.max())
        if clearance < EDGE_CLEARANCE:
            raise GeometryError(
                f"obstacle {obstacle} leaves fewer than two active node layers to the outer boundary"
            )
    cls = _classify(nx, ny, excluded)
    if not _connected(cls != NodeClass.EXCLUDED) or not _connected(cls == NodeClass.INTERIOR):
        raise GeometryError("active node set is disconnected")
    return Grid(nx, ny, lx, ly, obstacle, cls)


def obstacle_admissible(obstacle, domain_size, resolution) -> bool:
    try:
        build_grid(domain_size, resolution, obstacle)
    except GeometryError:
        return False
    return True


@dataclass(frozen=True)
class CandidateFamily:
    """Lattice of obstacle candidates: every center x size combination."""

    shape: str
    centers_x: tuple[float, ...]
    centers_y: tuple[float, ...]
    sizes: tuple = ()  # radii for disks, (ax, ay) pairs (or scalars) for rectangles

    @classmethod
    def from_dict(cls, data):
        try:
            shape = data["shape"]
            cx = tuple(float(v) for v in data["centers_x"])
            cy = tuple(float(v) for v in data["centers_y"])
            sizes = data["sizes"]
        except KeyError as exc:
            raise ConfigurationError(f"candidate family missing key {exc}") from None
        norm = []
        for s in sizes:
            if isinstance(s, (list, tuple)):
                norm.append(tuple(float(v) for v in s))
            else:
                norm.append(float(s))
        return cls(shape, cx, cy, tuple(norm))

    def specs(self) -> Iterable[ObstacleSpec]:
        for x, y, s in itertools.product(self.centers_x, self.centers_y, self.sizes):
            if self.shape == "disk":
                yield ObstacleSpec("disk", (x, y), radius=float(s))
            else:
                he = s if isinstance(s, tuple) else (s, s)
                yield ObstacleSpec("rectangle", (x, y), half_extents=he)


def candidate_obstacles(family, domain_size=(1.0, 1.0), resolution=(33, 33), *, return_rejected=False):
    """Admissible, deduplicated candidates of a family.

    Candidates whose voxelization coincides with an earlier one are dropped
    (they are indistinguishable on this lattice). With ``return_rejected`` the
    inadmissible specs are returned as a second list.
    """
    if isinstance(family, dict):
        family = CandidateFamily.from_dict(family)
    specs: Sequence[ObstacleSpec] = list(family.specs()) if isinstance(family, CandidateFamily) else list(family)
    kept, rejected, seen = [], [], set()
    for spec in specs:
        if not obstacle_admissible(spec, domain_size, resolution):
            rejected.append(spec)
            continue
        key = excluded_mask(domain_size, resolution, spec).tobytes()
        if key in seen:
            continue
        seen.add(key)
        kept.append(spec)
    if not kept:
        raise ConfigurationError(f"candidate family has no admissible member ({len(rejected)} rejected)")
    if return_rejected:
        return kept, rejected
    return kept


@dataclass(eq=False)
class BoundaryPatch:
    """Observed part of the outer boundary.

    ``nodes`` are active-node indices ordered along the edge, ``edges`` the edge
    each node's face belongs to, ``lengths`` the face lengths (trapezoid: half
    length at segment ends) and ``arclength`` the position along each segment
    normalized to [0, 1].
    """

    grid: Grid
    segments: tuple
    nodes: np.ndarray
    edges: tuple[str, ...]
    lengths: np.ndarray
    arclength: np.ndarray

    @property
    def size(self) -> int:
        return self.nodes.size

    @property
    def key(self) -> str:
        return ";".join(f"{e}:{a:g}-{b:g}" for e, a, b in self.segments)


def boundary_patch(grid: Grid, segments=(("right", 0.0, 1.0),)) -> BoundaryPatch:
    """Build Γ from edge segments ``(edge, start, stop)`` given as arclength fractions."""
    nodes, edges, lengths, arc = [], [], [], []
    norm_segments = []
    for seg in segments:
        if isinstance(seg, str):
            seg = (seg, 0.0, 1.0)
        edge, a, b = seg[0], float(seg[1]), float(seg[2])
        if edge not in EDGES:
            raise GeometryError(f"patch segment on unknown edge {edge!r}; only outer edges are allowed")
        if not (0.0 <= a < b <= 1.0):
            raise GeometryError(f"bad segment range {(a, b)}")
        norm_segments.append((edge, a, b))
        if edge in ("left", "right"):
            i = 0 if edge == "left" else grid.nx - 1
            n, h = grid.ny, grid.hy
            coords = [(i, j) for j in range(n)]
        else:
            j = 0 if edge == "bottom" else grid.ny - 1
            n, h = grid.nx, grid.hx
            coords = [(i, j) for i in range(n)]
        pos = np.arange(n) / (n - 1)
        sel = [k for k in range(n) if a - 1e-12 <= pos[k] <= b + 1e-12]
        if len(sel) < 2:
            raise GeometryError(f"segment {seg} covers fewer than two boundary nodes")
        for rank, k in enumerate(sel):
            idx = int(grid.active_index(*coords[k]))
            nodes.append(idx)
            edges.append(edge)
            lengths.append(0.5 * h if rank in (0, len(sel) - 1) else h)
            span = pos[sel[-1]] - pos[sel[0]]
            arc.append((pos[k] - pos[sel[0]]) / span)
    if not nodes:
        raise GeometryError("empty boundary patch")
    return BoundaryPatch(grid, tuple(norm_segments), np.asarray(nodes), tuple(edges), np.asarray(lengths), np.asarray(arc))


def patch_length(patch: BoundaryPatch) -> float:
    return float(patch.lengths.sum())
