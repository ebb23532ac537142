"""Evaluation metrics: set-level generative scores and per-primitive matching.

Set metrics operate on point clouds (one per shape): Chamfer distance,
coverage, minimum matching distance, and a voxel-occupancy Jensen-Shannon
divergence. Structural metrics operate on BRepModels: wireframe cyclomatic
complexity and discrete mean curvature. `match_primitives` compares a
predicted model against ground truth with Hungarian matching per primitive
class (vertices / edges / faces) and reports distances, precision/recall and
topology scores.

Chamfer convention: symmetric mean of squared nearest-neighbor distances,
averaged over both directions. Thresholded quantities (0.1) always use
unsquared distances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .brep import BRepModel

JSD_RESOLUTION = 28
MATCH_THRESHOLD = 0.1


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Chamfer distance: mean of the two one-way mean squared NN distances."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance of an empty point set")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return 0.5 * (float(np.mean(d_ab**2)) + float(np.mean(d_ba**2)))


def _pairwise_chamfer(gen: list[np.ndarray], ref: list[np.ndarray]) -> np.ndarray:
    trees_ref = [cKDTree(np.asarray(r).reshape(-1, 3)) for r in ref]
    trees_gen = [cKDTree(np.asarray(g).reshape(-1, 3)) for g in gen]
    out = np.empty((len(gen), len(ref)))
    for i, g in enumerate(gen):
        g = np.asarray(g).reshape(-1, 3)
        for j, r in enumerate(ref):
            r = np.asarray(r).reshape(-1, 3)
            d1 = trees_ref[j].query(g)[0]
            d2 = trees_gen[i].query(r)[0]
            out[i, j] = 0.5 * (np.mean(d1**2) + np.mean(d2**2))
    return out


def coverage(gen: list[np.ndarray], test: list[np.ndarray]) -> float:
    """Fraction of test shapes that are the Chamfer-nearest neighbor of some generated shape."""
    if not gen or not test:
        raise ValueError("coverage needs non-empty shape sets")
    d = _pairwise_chamfer(gen, test)
    return float(len(np.unique(d.argmin(axis=1)))) / len(test)


def mmd(gen: list[np.ndarray], test: list[np.ndarray]) -> float:
    """Mean over test shapes of the Chamfer distance to the nearest generated shape."""
    if not gen or not test:
        raise ValueError("mmd needs non-empty shape sets")
    d = _pairwise_chamfer(gen, test)
    return float(d.min(axis=0).mean())


def voxel_histogram(points: np.ndarray, resolution: int = JSD_RESOLUTION) -> tuple[np.ndarray, int]:
    """Occupancy counts over a resolution^3 grid covering [-1,1]^3.

    Out-of-bounds points are clipped to the boundary voxels; the second
    return value counts them.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    clipped = int(np.any(np.abs(pts) > 1.0, axis=1).sum())
    idx = np.floor((np.clip(pts, -1.0, 1.0) + 1.0) / 2.0 * resolution).astype(np.int64)
    idx = np.clip(idx, 0, resolution - 1)
    flat = (idx[:, 0] * resolution + idx[:, 1]) * resolution + idx[:, 2]
    hist = np.bincount(flat, minlength=resolution**3).astype(np.float64)
    return hist, clipped


def jsd(gen: list[np.ndarray], test: list[np.ndarray], resolution: int = JSD_RESOLUTION) -> float:
    """Jensen-Shannon divergence (base-2, in [0,1]) between pooled voxel occupancies."""

    def dist(shapes):
        h = np.zeros(resolution**3)
        for s in shapes:
            h += voxel_histogram(s, resolution)[0]
        total = h.sum()
        if total == 0:
            raise ValueError("jsd: no points")
        return h / total

    p, q = dist(gen), dist(test)
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


# ---------------------------------------------------------------------------
# structural metrics
# ---------------------------------------------------------------------------


def _geometric_edges(model: BRepModel) -> list[int]:
    """Half-curve index of each geometric edge (the lower index of each twin pair)."""
    return [j for j in range(model.num_half_curves) if j < int(model.twin[j])]


def cyclomatic(model: BRepModel) -> int:
    """E - N + 2P of the wireframe graph (N vertices, E edges, P components)."""
    edges = _geometric_edges(model)
    n_vert = len(model.vertices)
    if n_vert == 0 or not edges:
        return 0
    parent = list(range(n_vert))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    used = set()
    for j in edges:
        vids = np.nonzero(model.curve_vert_adj[j])[0]
        used.update(int(v) for v in vids)
        if len(vids) >= 2:
            ra, rb = find(int(vids[0])), find(int(vids[-1]))
            if ra != rb:
                parent[ra] = rb
    components = len({find(v) for v in used})
    return len(edges) - len(used) + 2 * components


def mean_curvature(model: BRepModel) -> float:
    """Area-weighted average |H| over all surfaces, from grid fundamental forms.

    First and second derivatives use central differences on the sample
    lattice; boundary samples (where central differences are undefined) are
    excluded from the average. Samples with a degenerate first fundamental
    form are skipped and counted.
    """
    if model.num_surfaces == 0:
        raise ValueError("model has no surfaces")
    num, den = 0.0, 0.0
    for s in model.surfaces:
        g = s.points
        h = 1.0 / (g.shape[0] - 1)
        xu = np.gradient(g, h, axis=0, edge_order=2)
        xv = np.gradient(g, h, axis=1, edge_order=2)
        xuu = np.gradient(xu, h, axis=0, edge_order=2)
        xuv = np.gradient(xu, h, axis=1, edge_order=2)
        xvv = np.gradient(xv, h, axis=1, edge_order=2)
        e1 = np.einsum("ijk,ijk->ij", xu, xu)
        f1 = np.einsum("ijk,ijk->ij", xu, xv)
        g1 = np.einsum("ijk,ijk->ij", xv, xv)
        normal = np.cross(xu, xv)
        nn = np.linalg.norm(normal, axis=2)
        det = e1 * g1 - f1**2
        interior = np.zeros_like(det, dtype=bool)
        interior[1:-1, 1:-1] = True
        ok = interior & (det > 1e-12) & (nn > 1e-12)
        if not ok.any():
            continue
        n_hat = normal[ok] / nn[ok][:, None]
        e2 = np.einsum("pk,pk->p", xuu[ok], n_hat)
        f2 = np.einsum("pk,pk->p", xuv[ok], n_hat)
        g2 = np.einsum("pk,pk->p", xvv[ok], n_hat)
        hmean = (e2 * g1[ok] - 2 * f2 * f1[ok] + g2 * e1[ok]) / (2 * det[ok])
        w = np.sqrt(det[ok]) * h * h
        num += float(np.sum(np.abs(hmean) * w))
        den += float(np.sum(w))
    return num / den if den > 0 else 0.0


# ---------------------------------------------------------------------------
# primitive matching
# ---------------------------------------------------------------------------

SURFACE_DENSITY = 10_000.0  # points per square unit
CURVE_DENSITY = 100.0  # points per unit length


def _polyline_resample(pts: np.ndarray, count: int) -> np.ndarray:
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0:
        return np.repeat(pts[:1], count, axis=0)
    t = np.linspace(0.0, s[-1], count)
    out = np.empty((count, 3))
    for d in range(3):
        out[:, d] = np.interp(t, s, pts[:, d])
    return out


def sample_primitives(model: BRepModel) -> dict[str, list[np.ndarray]]:
    """Per-primitive point samples: faces by area, edges by length, vertices as-is."""
    faces = []
    for s in model.surfaces:
        g = s.points
        h = 1.0 / (g.shape[0] - 1)
        xu = np.gradient(g, h, axis=0)
        xv = np.gradient(g, h, axis=1)
        area = float(np.linalg.norm(np.cross(xu, xv), axis=2).mean())
        side = int(np.clip(round(np.sqrt(max(area, 1e-6) * SURFACE_DENSITY)), 8, 64))
        t = np.linspace(0, 1, side)
        tt = np.linspace(0, 1, g.shape[0])
        interp = RegularGridInterpolator((tt, tt), g)
        uu, vv = np.meshgrid(t, t, indexing="ij")
        faces.append(interp(np.stack([uu.ravel(), vv.ravel()], axis=1)))
    edges = []
    for j in _geometric_edges(model):
        pts = model.half_curves[j].points
        length = float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())
        count = int(np.clip(round(length * CURVE_DENSITY), 4, 256))
        edges.append(_polyline_resample(pts, count))
    verts = [v.reshape(1, 3) for v in model.vertices]
    return {"face": faces, "edge": edges, "vertex": verts}


@dataclass
class ClassMatch:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    pair_chamfer: list[float] = field(default_factory=list)
    accuracy: float = 0.0  # mean one-way matched prediction -> GT
    completeness: float = 0.0  # mean one-way GT -> matched prediction
    precision: float = 0.0
    recall: float = 0.0
    num_pred: int = 0
    num_gt: int = 0


@dataclass
class MatchResult:
    vertex: ClassMatch
    edge: ClassMatch
    face: ClassMatch
    fe_precision: float = 0.0
    fe_recall: float = 0.0
    ev_precision: float = 0.0
    ev_recall: float = 0.0
    empty_prediction: bool = False


def _match_class(pred: list[np.ndarray], gt: list[np.ndarray], threshold: float) -> ClassMatch:
    out = ClassMatch(num_pred=len(pred), num_gt=len(gt))
    if not pred or not gt:
        return out
    cost = _pairwise_chamfer(pred, gt)
    rows, cols = linear_sum_assignment(cost)
    acc, comp, hits = [], [], 0
    for r, c in zip(rows, cols):
        a = np.asarray(pred[r]).reshape(-1, 3)
        b = np.asarray(gt[c]).reshape(-1, 3)
        one_way_pg = float(cKDTree(b).query(a)[0].mean())
        one_way_gp = float(cKDTree(a).query(b)[0].mean())
        out.pairs.append((int(r), int(c)))
        out.pair_chamfer.append(0.5 * (one_way_pg + one_way_gp))
        acc.append(one_way_pg)
        comp.append(one_way_gp)
        if out.pair_chamfer[-1] < threshold:
            hits += 1
    out.accuracy = float(np.mean(acc))
    out.completeness = float(np.mean(comp))
    out.precision = hits / len(pred)
    out.recall = hits / len(gt)
    return out


def _adjacency_pairs(model: BRepModel) -> tuple[set, set]:
    """(face-edge, edge-vertex) adjacency over geometric edge indices."""
    edges = _geometric_edges(model)
    edge_pos = {j: k for k, j in enumerate(edges)}
    fe, ev = set(), set()
    for k, j in enumerate(edges):
        t = int(model.twin[j])
        for half in (j, t):
            fi = int(np.argmax(model.surf_curve_adj[:, half]))
            fe.add((fi, k))
        for v in np.nonzero(model.curve_vert_adj[j])[0]:
            ev.add((k, int(v)))
    return fe, ev


def match_primitives(pred: BRepModel, gt: BRepModel, threshold: float = MATCH_THRESHOLD) -> MatchResult:
    """Hungarian-matched comparison of two models at the given distance threshold."""
    if pred.num_surfaces == 0:
        empty = ClassMatch()
        return MatchResult(vertex=empty, edge=empty, face=empty, empty_prediction=True)
    ps = sample_primitives(pred)
    gs = sample_primitives(gt)
    res = MatchResult(
        vertex=_match_class(ps["vertex"], gs["vertex"], threshold),
        edge=_match_class(ps["edge"], gs["edge"], threshold),
        face=_match_class(ps["face"], gs["face"], threshold),
    )
    fmap = dict(res.face.pairs)
    emap = dict(res.edge.pairs)
    vmap = dict(res.vertex.pairs)
    fe_p, ev_p = _adjacency_pairs(pred)
    fe_g, ev_g = _adjacency_pairs(gt)

    def topo_scores(pred_adj, gt_adj, map_a, map_b):
        pred_m = [(a, b) for a, b in pred_adj if a in map_a and b in map_b]
        correct = sum((map_a[a], map_b[b]) in gt_adj for a, b in pred_m)
        inv_a = {v: k for k, v in map_a.items()}
        inv_b = {v: k for k, v in map_b.items()}
        gt_m = [(a, b) for a, b in gt_adj if a in inv_a and b in inv_b]
        correct_r = sum((inv_a[a], inv_b[b]) in pred_adj for a, b in gt_m)
        p = correct / len(pred_m) if pred_m else 0.0
        r = correct_r / len(gt_m) if gt_m else 0.0
        return p, r

    res.fe_precision, res.fe_recall = topo_scores(fe_p, fe_g, fmap, emap)
    res.ev_precision, res.ev_recall = topo_scores(ev_p, ev_g, emap, vmap)
    return res


def novelty_distances(gen: list[np.ndarray], train: list[np.ndarray]) -> np.ndarray:
    """Chamfer distance from each generated shape to its nearest training shape.

    A histogram analogue of render-based novelty scores; not comparable to
    them numerically.
    """
    if not gen or not train:
        raise ValueError("novelty needs non-empty shape sets")
    return _pairwise_chamfer(gen, train).min(axis=1)
