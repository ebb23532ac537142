"""Synthetic B-Rep corpus: parametric solid families and dataset container.

Solids are assembled from planar faces with exact shared corner coordinates,
so vertex merging is an exact float match and every twin half-curve pair is a
bit-exact reversal. Families: boxes, prisms over simple polygons (including
L-shapes), boxes with a rectangular through-hole (genus 1) and stacked unions
of two boxes.

Dataset container: one zip archive (format tag "hola-ds-v1") holding a JSON
manifest plus named float32/uint8/int32 arrays per record; see `write_dataset`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .archive import ArchiveError, read_arrays, read_manifest, write_archive
from .brep import CURVE_RES, GRID_RES, BRepModel, HalfCurve, SurfaceGrid, normalize

DATASET_FORMAT = "hola-ds-v1"
FAMILIES = ("box", "prism", "box_hole", "box_union")
# keep every edge/vertex separation comfortably above the 0.1 validity
# tolerance after normalization (raw feature >= 0.15, raw extent <= 2.4)
MIN_FEATURE = 0.15


class DatasetError(Exception):
    pass


# ---------------------------------------------------------------------------
# face-walk solid builder
# ---------------------------------------------------------------------------


class _SolidBuilder:
    """Accumulates planar faces given as corner walks + outward normals.

    Corner coordinates must be passed as identical float values wherever two
    faces share a vertex; merging is exact. Walk direction is corrected
    automatically so every outer loop is counter-clockwise in the face's UV
    frame (u along the first walk edge, v = normal x u).
    """

    def __init__(self):
        self._vid: dict[bytes, int] = {}
        self.vertices: list[np.ndarray] = []
        self.faces: list[tuple[list[int], np.ndarray, str]] = []

    def _vertex(self, p) -> int:
        p = np.asarray(p, dtype=np.float64)
        key = p.tobytes()
        if key not in self._vid:
            self._vid[key] = len(self.vertices)
            self.vertices.append(p)
        return self._vid[key]

    def add_face(self, corners, normal, grid: str = "bilinear") -> None:
        vids = [self._vertex(c) for c in corners]
        if len(set(vids)) != len(vids):
            raise ValueError("face walk repeats a vertex")
        self.faces.append((vids, np.asarray(normal, dtype=np.float64), grid))

    def _frame(self, vids, normal):
        c0 = self.vertices[vids[0]]
        e_u = self.vertices[vids[1]] - c0
        e_u = e_u / np.linalg.norm(e_u)
        e_v = np.cross(normal, e_u)
        return c0, e_u, e_v

    def _grid(self, vids, normal, kind) -> np.ndarray:
        pts = [self.vertices[v] for v in vids]
        t = np.linspace(0.0, 1.0, GRID_RES)
        if kind == "bilinear":
            if len(pts) != 4:
                raise ValueError("bilinear grid needs exactly 4 corners")
            a, b, c, d = pts
            u = t[:, None, None]
            v = t[None, :, None]
            return (1 - u) * (1 - v) * a + u * (1 - v) * b + u * v * c + (1 - u) * v * d
        if kind == "bbox":
            c0, e_u, e_v = self._frame(vids, normal)
            uv = np.array([[(p - c0) @ e_u, (p - c0) @ e_v] for p in pts])
            lo, hi = uv.min(axis=0), uv.max(axis=0)
            us = lo[0] + t * (hi[0] - lo[0])
            vs = lo[1] + t * (hi[1] - lo[1])
            return c0 + us[:, None, None] * e_u + vs[None, :, None] * e_v
        raise ValueError(f"unknown grid kind {kind!r}")

    def build(self, label: str = "", params: dict | None = None) -> BRepModel:
        surfaces: list[SurfaceGrid] = []
        half_curves: list[HalfCurve] = []
        owners: list[int] = []
        edge_samples: dict[tuple[int, int], np.ndarray] = {}
        edge_uses: dict[tuple[int, int], list[tuple[int, bool]]] = {}
        curve_endpoints: list[tuple[int, int]] = []

        for fi, (vids, normal, kind) in enumerate(self.faces):
            c0, e_u, e_v = self._frame(vids, normal)
            uv = np.array([[(self.vertices[v] - c0) @ e_u, (self.vertices[v] - c0) @ e_v] for v in vids])
            area2 = np.sum(uv[:, 0] * np.roll(uv[:, 1], -1) - np.roll(uv[:, 0], -1) * uv[:, 1])
            walk = list(vids) if area2 > 0 else [vids[0]] + list(reversed(vids[1:]))
            surfaces.append(SurfaceGrid(self._grid(walk, normal, kind)))
            for a, b in zip(walk, walk[1:] + walk[:1]):
                key = (min(a, b), max(a, b))
                if key not in edge_samples:
                    edge_samples[key] = np.linspace(self.vertices[key[0]], self.vertices[key[1]], CURVE_RES)
                forward = a == key[0]
                pts = edge_samples[key] if forward else edge_samples[key][::-1]
                edge_uses.setdefault(key, []).append((len(half_curves), forward))
                half_curves.append(HalfCurve(pts.copy(), owner_surface=fi, loop_id=0))
                owners.append(fi)
                curve_endpoints.append((a, b))

        n = len(half_curves)
        twin = np.full(n, -1, dtype=np.int64)
        for key, uses in edge_uses.items():
            if len(uses) != 2 or uses[0][1] == uses[1][1]:
                raise ValueError(f"edge {key} not used exactly twice in opposite directions")
            twin[uses[0][0]] = uses[1][0]
            twin[uses[1][0]] = uses[0][0]

        m, nv = len(surfaces), len(self.vertices)
        sc = np.zeros((m, n), dtype=np.uint8)
        cv = np.zeros((n, nv), dtype=np.uint8)
        for j, fi in enumerate(owners):
            sc[fi, j] = 1
        for j, (a, b) in enumerate(curve_endpoints):
            cv[j, a] = 1
            cv[j, b] = 1

        model = BRepModel(
            surfaces=tuple(surfaces),
            half_curves=tuple(half_curves),
            vertices=np.array(self.vertices),
            surf_curve_adj=sc,
            curve_vert_adj=cv,
            twin=twin,
            label=label,
            params=params or {},
        )
        return normalize(model)


# ---------------------------------------------------------------------------
# families
# ---------------------------------------------------------------------------


def _box_corners(origin, extents):
    o = np.asarray(origin, dtype=np.float64)
    w = np.asarray(extents, dtype=np.float64)
    c = {}
    for ix in (0, 1):
        for iy in (0, 1):
            for iz in (0, 1):
                c[ix, iy, iz] = o + w * np.array([ix, iy, iz], dtype=np.float64)
    return c


def _add_box_faces(b: _SolidBuilder, c, skip: set[str] = frozenset()):
    faces = {
        "x-": ([c[0, 0, 0], c[0, 1, 0], c[0, 1, 1], c[0, 0, 1]], (-1, 0, 0)),
        "x+": ([c[1, 0, 0], c[1, 1, 0], c[1, 1, 1], c[1, 0, 1]], (1, 0, 0)),
        "y-": ([c[0, 0, 0], c[1, 0, 0], c[1, 0, 1], c[0, 0, 1]], (0, -1, 0)),
        "y+": ([c[0, 1, 0], c[1, 1, 0], c[1, 1, 1], c[0, 1, 1]], (0, 1, 0)),
        "z-": ([c[0, 0, 0], c[1, 0, 0], c[1, 1, 0], c[0, 1, 0]], (0, 0, -1)),
        "z+": ([c[0, 0, 1], c[1, 0, 1], c[1, 1, 1], c[0, 1, 1]], (0, 0, 1)),
    }
    for name, (walk, normal) in faces.items():
        if name not in skip:
            b.add_face(walk, normal)


def make_box(wx: float, wy: float, wz: float) -> BRepModel:
    """Axis-aligned box: 6 faces, 24 half-curves, 8 vertices, chi = 2."""
    if min(wx, wy, wz) <= 0:
        raise ValueError("box extents must be positive")
    b = _SolidBuilder()
    _add_box_faces(b, _box_corners((0, 0, 0), (wx, wy, wz)))
    return b.build(label="box", params={"extents": [wx, wy, wz]})


def _polygon_self_intersects(poly: np.ndarray) -> bool:
    k = len(poly)

    def seg_intersect(p, q, r, s):
        def orient(a, b, c):
            u, v = b - a, c - a
            return np.sign(u[0] * v[1] - u[1] * v[0])

        o1, o2 = orient(p, q, r), orient(p, q, s)
        o3, o4 = orient(r, s, p), orient(r, s, q)
        return o1 != o2 and o3 != o4

    for i in range(k):
        for j in range(i + 1, k):
            if abs(i - j) in (0, 1) or (i == 0 and j == k - 1):
                continue
            if seg_intersect(poly[i], poly[(i + 1) % k], poly[j], poly[(j + 1) % k]):
                return True
    return False


def make_prism(polygon, height: float) -> BRepModel:
    """Right prism over a simple CCW polygon: k side faces + 2 caps, chi = 2."""
    poly = np.asarray(polygon, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
        raise ValueError("polygon must be k>=3 points in 2D")
    if height <= 0:
        raise ValueError("height must be positive")
    area2 = np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
    if area2 <= 0:
        raise ValueError("polygon must be counter-clockwise")
    if _polygon_self_intersects(poly):
        raise ValueError("polygon is self-intersecting")

    k = len(poly)
    bot = [np.array([x, y, 0.0]) for x, y in poly]
    top = [np.array([x, y, float(height)]) for x, y in poly]
    b = _SolidBuilder()
    b.add_face(bot, (0, 0, -1), grid="bbox" if k != 4 else "bilinear")
    b.add_face(top, (0, 0, 1), grid="bbox" if k != 4 else "bilinear")
    for i in range(k):
        j = (i + 1) % k
        d = poly[j] - poly[i]
        normal = np.array([d[1], -d[0], 0.0])
        normal /= np.linalg.norm(normal)
        b.add_face([bot[i], bot[j], top[j], top[i]], normal)
    return b.build(label="prism", params={"k": k, "height": height})


def make_box_with_hole(extents, hole_center, hole_half) -> BRepModel:
    """Box with a rectangular through-hole along z: 16 faces, genus 1, chi = 0."""
    wx, wy, wz = extents
    hx, hy = hole_center
    px, py = hole_half
    if min(wx, wy, wz, px, py) <= 0:
        raise ValueError("extents must be positive")
    if not (px < hx < wx - px and py < hy < wy - py):
        raise ValueError("hole must lie strictly inside the box footprint")

    b = _SolidBuilder()
    c = _box_corners((0, 0, 0), (wx, wy, wz))
    _add_box_faces(b, c, skip={"z-", "z+"})

    t = _box_corners((hx - px, hy - py, 0.0), (2 * px, 2 * py, wz))
    # tunnel walls, outward normal points into the hole
    b.add_face([t[0, 0, 0], t[0, 1, 0], t[0, 1, 1], t[0, 0, 1]], (1, 0, 0))
    b.add_face([t[1, 0, 0], t[1, 1, 0], t[1, 1, 1], t[1, 0, 1]], (-1, 0, 0))
    b.add_face([t[0, 0, 0], t[1, 0, 0], t[1, 0, 1], t[0, 0, 1]], (0, 1, 0))
    b.add_face([t[0, 1, 0], t[1, 1, 0], t[1, 1, 1], t[0, 1, 1]], (0, -1, 0))

    # top/bottom frames split into 4 trapezoids by the corner diagonals
    for iz, nz in ((0, (0, 0, -1)), (1, (0, 0, 1))):
        outer = [c[0, 0, iz], c[1, 0, iz], c[1, 1, iz], c[0, 1, iz]]
        inner = [t[0, 0, iz], t[1, 0, iz], t[1, 1, iz], t[0, 1, iz]]
        for s in range(4):
            sn = (s + 1) % 4
            b.add_face([outer[s], outer[sn], inner[sn], inner[s]], nz)
    return b.build(
        label="box_hole",
        params={"extents": list(extents), "hole_center": list(hole_center), "hole_half": list(hole_half)},
    )


def make_box_union(a_extents, b_extents, b_offset) -> BRepModel:
    """Two stacked boxes; the upper footprint strictly inside the lower top. chi = 2."""
    ax, ay, az = a_extents
    bx, by, bz = b_extents
    ox, oy = b_offset
    if min(ax, ay, az, bx, by, bz) <= 0:
        raise ValueError("extents must be positive")
    if not (0 < ox and ox + bx < ax and 0 < oy and oy + by < ay):
        raise ValueError("upper box footprint must lie strictly inside the lower top face")

    b = _SolidBuilder()
    ca = _box_corners((0, 0, 0), (ax, ay, az))
    cb = _box_corners((ox, oy, az), (bx, by, bz))
    _add_box_faces(b, ca, skip={"z+"})
    _add_box_faces(b, cb, skip={"z-"})
    outer = [ca[0, 0, 1], ca[1, 0, 1], ca[1, 1, 1], ca[0, 1, 1]]
    inner = [cb[0, 0, 0], cb[1, 0, 0], cb[1, 1, 0], cb[0, 1, 0]]
    for s in range(4):
        sn = (s + 1) % 4
        b.add_face([outer[s], outer[sn], inner[sn], inner[s]], (0, 0, 1))
    return b.build(
        label="box_union",
        params={"a": list(a_extents), "b": list(b_extents), "offset": list(b_offset)},
    )


# ---------------------------------------------------------------------------
# dataset records
# ---------------------------------------------------------------------------


@dataclass
class DatasetRecord:
    surfaces: np.ndarray  # (m, 16, 16, 3) float32
    half_curves: np.ndarray  # (n, 16, 3) float32
    surf_curve_adj: np.ndarray  # (m, n) uint8
    twin: np.ndarray  # (n,) int32
    label: str = ""
    params: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: BRepModel) -> "DatasetRecord":
        return cls(
            surfaces=np.stack([s.points for s in model.surfaces]).astype(np.float32),
            half_curves=np.stack([c.points for c in model.half_curves]).astype(np.float32),
            surf_curve_adj=model.surf_curve_adj.astype(np.uint8),
            twin=model.twin.astype(np.int32),
            label=model.label,
            params=dict(model.params),
        )

    def to_model(self) -> BRepModel:
        """Rebuild the full model; vertices are merged by exact endpoint match."""
        m, n = self.surfaces.shape[0], self.half_curves.shape[0]
        owners = self.surf_curve_adj.argmax(axis=0)
        vid: dict[bytes, int] = {}
        verts: list[np.ndarray] = []
        cv_pairs = []
        for j in range(n):
            ends = []
            for p in (self.half_curves[j, 0], self.half_curves[j, -1]):
                p64 = np.asarray(p, dtype=np.float64)
                key = p64.tobytes()
                if key not in vid:
                    vid[key] = len(verts)
                    verts.append(p64)
                ends.append(vid[key])
            cv_pairs.append(ends)
        cv = np.zeros((n, len(verts)), dtype=np.uint8)
        for j, (a, b) in enumerate(cv_pairs):
            cv[j, a] = 1
            cv[j, b] = 1
        return BRepModel(
            surfaces=tuple(SurfaceGrid(self.surfaces[i].astype(np.float64)) for i in range(m)),
            half_curves=tuple(
                HalfCurve(self.half_curves[j].astype(np.float64), owner_surface=int(owners[j]))
                for j in range(n)
            ),
            vertices=np.array(verts) if verts else np.zeros((0, 3)),
            surf_curve_adj=self.surf_curve_adj,
            curve_vert_adj=cv,
            twin=self.twin.astype(np.int64),
            label=self.label,
            params=dict(self.params),
        )


def _make_from_family(rng, family: str) -> BRepModel:
    if family == "box":
        w = rng.uniform(0.4, 2.0, size=3)
        return make_box(*w)
    if family == "prism":
        k = int(rng.integers(3, 9))
        if k == 6 and rng.random() < 0.3:
            # L-shaped block
            s = rng.uniform(0.6, 1.2)
            cut = rng.uniform(0.3, 0.6) * s
            poly = np.array([[0, 0], [s, 0], [s, s - cut], [s - cut, s - cut], [s - cut, s], [0, s]])
            return make_prism(poly, rng.uniform(0.4, 1.6))
        r = rng.uniform(0.5, 1.0)
        phase = rng.uniform(0, 2 * np.pi)
        ang = phase + np.linspace(0, 2 * np.pi, k, endpoint=False)
        poly = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
        return make_prism(poly, rng.uniform(0.4, 1.8))
    if family == "box_hole":
        wx, wy = rng.uniform(1.0, 2.0, size=2)
        wz = rng.uniform(0.4, 1.6)
        px = rng.uniform(0.15, (wx - 2 * MIN_FEATURE) / 2 - 0.05)
        py = rng.uniform(0.15, (wy - 2 * MIN_FEATURE) / 2 - 0.05)
        hx = rng.uniform(px + MIN_FEATURE, wx - px - MIN_FEATURE)
        hy = rng.uniform(py + MIN_FEATURE, wy - py - MIN_FEATURE)
        return make_box_with_hole((wx, wy, wz), (hx, hy), (px, py))
    if family == "box_union":
        ax, ay = rng.uniform(1.0, 2.0, size=2)
        az = rng.uniform(0.5, 1.4)
        bx = rng.uniform(0.4, ax - 2 * MIN_FEATURE - 0.05)
        by = rng.uniform(0.4, ay - 2 * MIN_FEATURE - 0.05)
        bz = rng.uniform(0.4, 1.0)
        ox = rng.uniform(MIN_FEATURE, ax - bx - MIN_FEATURE)
        oy = rng.uniform(MIN_FEATURE, ay - by - MIN_FEATURE)
        return make_box_union((ax, ay, az), (bx, by, bz), (ox, oy))
    raise ValueError(f"unknown family tag {family!r}")


def make_family(seed: int, count: int, family_spec: str) -> list[DatasetRecord]:
    """Deterministically generate `count` records of one family (or 'mixed')."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if family_spec != "mixed" and family_spec not in FAMILIES:
        raise ValueError(f"unknown family tag {family_spec!r}")
    rng = np.random.default_rng(seed)
    records = []
    for i in range(count):
        fam = FAMILIES[i % len(FAMILIES)] if family_spec == "mixed" else family_spec
        records.append(DatasetRecord.from_model(_make_from_family(rng, fam)))
    return records


def split_indices(count: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """90/5/5 train/val/test split by record index after a seeded shuffle."""
    idx = np.random.default_rng(seed).permutation(count)
    n_train = int(round(count * 0.90))
    n_val = int(round(count * 0.05))
    return idx[:n_train], idx[n_train : n_train + n_val], idx[n_train + n_val :]


# ---------------------------------------------------------------------------
# container io
# ---------------------------------------------------------------------------

_RECORD_ARRAYS = ("surfaces", "half_curves", "surf_curve_adj", "twin")


def write_dataset(records: list[DatasetRecord], path) -> None:
    manifest = {
        "format": DATASET_FORMAT,
        "count": len(records),
        "records": [
            {
                "label": r.label,
                "params": r.params,
                "m": int(r.surfaces.shape[0]),
                "n": int(r.half_curves.shape[0]),
            }
            for r in records
        ],
    }
    arrays = {}
    for i, r in enumerate(records):
        arrays[f"r{i:05d}_surfaces"] = r.surfaces.astype("<f4")
        arrays[f"r{i:05d}_half_curves"] = r.half_curves.astype("<f4")
        arrays[f"r{i:05d}_surf_curve_adj"] = r.surf_curve_adj.astype(np.uint8)
        arrays[f"r{i:05d}_twin"] = r.twin.astype("<i4")
    write_archive(path, manifest, arrays)


def _scan_readable_records(path) -> int:
    """Count complete records in a truncated archive by walking local zip headers."""
    import struct

    seen: set[str] = set()
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError:
        return 0
    off = 0
    while off + 30 <= len(data):
        if data[off : off + 4] != b"PK\x03\x04":
            break
        name_len, extra_len = struct.unpack("<HH", data[off + 26 : off + 30])
        size = struct.unpack("<I", data[off + 18 : off + 22])[0]
        header_end = off + 30 + name_len + extra_len
        if header_end + size > len(data):
            break
        seen.add(data[off + 30 : off + 30 + name_len].decode("utf-8", "replace"))
        off = header_end + size
    i = 0
    while all(f"r{i:05d}_{a}.npy" in seen for a in _RECORD_ARRAYS):
        i += 1
    return i


def read_dataset(path) -> list[DatasetRecord]:
    try:
        manifest = read_manifest(path)
    except ArchiveError as exc:
        k = _scan_readable_records(path)
        raise DatasetError(
            f"corrupt or truncated dataset container: record {k} is the first unreadable record"
        ) from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(f"unexpected container format {manifest.get('format')!r}")
    count = int(manifest.get("count", 0))
    records = []
    for i in range(count):
        names = [f"r{i:05d}_{a}" for a in _RECORD_ARRAYS]
        try:
            arrs = read_arrays(path, names)
        except ArchiveError as exc:
            raise DatasetError(f"corrupt dataset container: record {i} unreadable ({exc})") from exc
        meta = manifest["records"][i]
        records.append(
            DatasetRecord(
                surfaces=arrs[names[0]],
                half_curves=arrs[names[1]],
                surf_curve_adj=arrs[names[2]],
                twin=arrs[names[3]],
                label=meta.get("label", ""),
                params=meta.get("params", {}),
            )
        )
    return records
