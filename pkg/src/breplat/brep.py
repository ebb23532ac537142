"""Boundary-representation data model in learning form.

A solid is a set of surface sample grids plus oriented half-curves: every
geometric edge appears twice, once per adjacent surface, with opposite
traversal direction. Vertices are kept redundantly (half-curve endpoints
already contain them) because the evaluation metrics need them as a separate
primitive class.

Conventions:
  - surface grids are 16x16x3, row-major over (u, v)
  - half-curves are 16x3, ordered along the curve
  - a surface's outer loop runs counter-clockwise in its own UV frame
  - all coordinates live in [-1, 1]^3 after `normalize`
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRID_RES = 16
CURVE_RES = 16


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SurfaceGrid:
    """Uniform UV sample grid of one surface patch (may extend past trims)."""

    points: np.ndarray  # (16, 16, 3)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (GRID_RES, GRID_RES, 3):
            raise ValueError(f"surface grid must be {GRID_RES}x{GRID_RES}x3, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("surface grid contains non-finite values")
        object.__setattr__(self, "points", _frozen(pts))


@dataclass(frozen=True)
class HalfCurve:
    """Oriented copy of a geometric edge, owned by one surface."""

    points: np.ndarray  # (16, 3), ordered along the curve
    owner_surface: int
    loop_id: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (CURVE_RES, 3):
            raise ValueError(f"half-curve must be {CURVE_RES}x3, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("half-curve contains non-finite values")
        object.__setattr__(self, "points", _frozen(pts))

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]


def reverse_halfcurve(c: HalfCurve) -> HalfCurve:
    """Same point set traversed in the opposite direction; ownership kept."""
    return HalfCurve(points=c.points[::-1].copy(), owner_surface=c.owner_surface, loop_id=c.loop_id)


@dataclass(frozen=True)
class BRepModel:
    surfaces: tuple[SurfaceGrid, ...]
    half_curves: tuple[HalfCurve, ...]
    vertices: np.ndarray  # (l, 3)
    surf_curve_adj: np.ndarray  # (m, n) uint8
    curve_vert_adj: np.ndarray  # (n, l) uint8
    twin: np.ndarray  # (n,) int, twin[j] = opposite half-curve
    label: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        m, n = len(self.surfaces), len(self.half_curves)
        verts = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        sc = np.asarray(self.surf_curve_adj, dtype=np.uint8)
        cv = np.asarray(self.curve_vert_adj, dtype=np.uint8)
        tw = np.asarray(self.twin, dtype=np.int64)
        if sc.shape != (m, n):
            raise ValueError(f"surf_curve_adj must be {(m, n)}, got {sc.shape}")
        if cv.shape != (n, len(verts)):
            raise ValueError(f"curve_vert_adj must be {(n, len(verts))}, got {cv.shape}")
        if tw.shape != (n,):
            raise ValueError(f"twin must have shape ({n},), got {tw.shape}")
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        object.__setattr__(self, "half_curves", tuple(self.half_curves))
        object.__setattr__(self, "vertices", _frozen(verts))
        sc.flags.writeable = False
        cv.flags.writeable = False
        tw.flags.writeable = False
        object.__setattr__(self, "surf_curve_adj", sc)
        object.__setattr__(self, "curve_vert_adj", cv)
        object.__setattr__(self, "twin", tw)

    @property
    def num_surfaces(self) -> int:
        return len(self.surfaces)

    @property
    def num_half_curves(self) -> int:
        return len(self.half_curves)

    def surface_points(self) -> np.ndarray:
        """All surface grid samples pooled, (m*256, 3)."""
        return np.concatenate([s.points.reshape(-1, 3) for s in self.surfaces], axis=0)

    def all_points(self) -> np.ndarray:
        chunks = [self.surface_points()]
        if self.half_curves:
            chunks.append(np.concatenate([c.points for c in self.half_curves], axis=0))
        if len(self.vertices):
            chunks.append(self.vertices)
        return np.concatenate(chunks, axis=0)


class DegenerateModelError(ValueError):
    """Model has zero spatial extent and cannot be normalized."""


def normalize(model: BRepModel) -> BRepModel:
    """Map the axis-aligned bounding box to be origin-centered with longest side 2.

    Isotropic scaling, so shape and topology are unchanged. Raises
    DegenerateModelError on zero extent.
    """
    if model.num_surfaces < 1:
        raise ValueError("cannot normalize a model with no surfaces")
    pts = model.all_points()
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = hi - lo
    longest = float(extent.max())
    if longest <= 0.0:
        raise DegenerateModelError("degenerate extent: model collapses to a point")
    center = (lo + hi) / 2.0
    scale = 2.0 / longest

    def tf(a: np.ndarray) -> np.ndarray:
        return (a - center) * scale

    return BRepModel(
        surfaces=tuple(SurfaceGrid(tf(s.points)) for s in model.surfaces),
        half_curves=tuple(
            HalfCurve(tf(c.points), c.owner_surface, c.loop_id) for c in model.half_curves
        ),
        vertices=tf(model.vertices),
        surf_curve_adj=model.surf_curve_adj.copy(),
        curve_vert_adj=model.curve_vert_adj.copy(),
        twin=model.twin.copy(),
        label=model.label,
        params=dict(model.params),
    )


@dataclass
class TopologyReport:
    involution_violations: list[int] = field(default_factory=list)
    orphan_half_curves: list[int] = field(default_factory=list)
    endpoint_mismatches: list[int] = field(default_factory=list)
    twin_reversal_violations: list[int] = field(default_factory=list)
    shell_euler: list[int] = field(default_factory=list)  # V - E + F per connected shell
    euler_undefined: bool = False
    tolerance: float = 1e-6

    @property
    def num_violations(self) -> int:
        return (
            len(self.involution_violations)
            + len(self.orphan_half_curves)
            + len(self.endpoint_mismatches)
            + len(self.twin_reversal_violations)
        )

    @property
    def ok(self) -> bool:
        return self.num_violations == 0


def validate_topology(model: BRepModel, tau_v: float = 1e-6) -> TopologyReport:
    """Consistency checks over adjacency, twins and endpoints.

    Reported (never raised): twin-involution breaks (twin(twin(j)) != j or
    twin(j) == j), half-curves not owned by exactly one surface, half-curve
    endpoints farther than tau_v from every adjacent vertex, twin point sets
    that are not exact mutual reversals within tau_v, and V - E + F per
    connected shell with E = half-curves / 2.
    """
    report = TopologyReport(tolerance=tau_v)
    n = model.num_half_curves
    if model.num_surfaces == 0 and n == 0:
        report.euler_undefined = True
        return report

    twin = model.twin
    for j in range(n):
        t = int(twin[j])
        if t < 0 or t >= n or t == j or int(twin[t]) != j:
            report.involution_violations.append(j)

    col_sums = model.surf_curve_adj.sum(axis=0)
    for j in range(n):
        if col_sums[j] != 1:
            report.orphan_half_curves.append(j)

    # endpoints must coincide with an adjacent vertex
    if model.curve_vert_adj.shape[1] > 0:
        for j, c in enumerate(model.half_curves):
            vids = np.nonzero(model.curve_vert_adj[j])[0]
            if len(vids) == 0:
                report.endpoint_mismatches.append(j)
                continue
            vpts = model.vertices[vids]
            for endpoint in (c.start, c.end):
                if np.linalg.norm(vpts - endpoint, axis=1).min() > tau_v:
                    report.endpoint_mismatches.append(j)
                    break

    for j in range(n):
        t = int(twin[j])
        if 0 <= t < n and t != j and int(twin[t]) == j and j < t:
            d = np.abs(model.half_curves[t].points - model.half_curves[j].points[::-1]).max()
            if d > tau_v:
                report.twin_reversal_violations.append(j)
                report.twin_reversal_violations.append(t)

    # shells: connected components of the surface graph induced by twinned curves
    m = model.num_surfaces
    owner = np.full(n, -1, dtype=np.int64)
    rows, cols = np.nonzero(model.surf_curve_adj)
    for s, j in zip(rows, cols):
        owner[j] = s
    parent = list(range(m))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    for j in range(n):
        t = int(twin[j])
        if 0 <= t < n and owner[j] >= 0 and owner[t] >= 0:
            union(int(owner[j]), int(owner[t]))

    if n == 0 or n % 2 != 0 or model.curve_vert_adj.shape[1] == 0:
        report.euler_undefined = True
        return report

    shells: dict[int, int] = {}
    for s in range(m):
        shells.setdefault(find(s), len(shells))
    for root, _ in sorted(shells.items(), key=lambda kv: kv[1]):
        faces = [s for s in range(m) if find(s) == root]
        curves = [j for j in range(n) if owner[j] in faces]
        vids = set()
        for j in curves:
            vids.update(np.nonzero(model.curve_vert_adj[j])[0].tolist())
        v_count = len(vids)
        e_count = len(curves) // 2
        report.shell_euler.append(v_count - e_count + len(faces))
    return report
