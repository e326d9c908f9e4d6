"""Point-cloud benchmarking: Chamfer terms, P/R/F scores, DTU means, MMD.

Also provides the two cloud builders the benchmarks need: Monte-Carlo mesh
sampling and consistency-filtered multi-view depth fusion.

Thresholded scores default to plain Euclidean distances.  The ``squared``
metric mode exists for protocols that threshold squared distances instead;
the two disagree on any threshold comparison where distances differ from 1,
so the choice is loud in the CLI as well.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .errors import ContractError, DimensionError
from .geometry import Camera, DepthMap, project, unproject

_METRICS = ("euclidean", "squared")


@dataclass(frozen=True)
class PointCloud:
    """An (N, 3) bag of finite points in dataset units."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DimensionError(f"points must be (N, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ContractError("point coordinates must be finite")
        object.__setattr__(self, "points", pts.copy())

    def __len__(self) -> int:
        return self.points.shape[0]


def _cloud_points(cloud, name: str) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else PointCloud(cloud).points
    if pts.shape[0] == 0:
        raise ContractError(f"{name} cloud must not be empty")
    return pts


class SpatialIndex:
    """Exact nearest-neighbor queries over a cloud (kd-tree, leaf size 16)."""

    def __init__(self, cloud):
        self._points = _cloud_points(cloud, "indexed")
        self._tree = cKDTree(self._points, leafsize=16)

    def __len__(self) -> int:
        return self._points.shape[0]

    @property
    def points(self) -> np.ndarray:
        return self._points

    def query(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Distances to and indices of each query point's nearest neighbor."""
        q = np.asarray(points, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != 3:
            raise DimensionError(f"queries must be (N, 3), got {q.shape}")
        dist, idx = self._tree.query(q, k=1)
        return np.asarray(dist, dtype=np.float64), np.asarray(idx, dtype=np.int64)


@dataclass(frozen=True)
class ScoreReport:
    """Whatever subset of the benchmark numbers a run produced.

    Percent scores live in [0, 100]; when both DTU means are present,
    ``overall`` must equal their average.
    """

    d: float | None = None
    precision: float | None = None
    recall: float | None = None
    fscore: float | None = None
    d_g2r: float | None = None
    d_r2g: float | None = None
    acc: float | None = None
    comp: float | None = None
    overall: float | None = None

    def __post_init__(self):
        for name in ("precision", "recall", "fscore"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 100.0:
                raise ContractError(f"{name} must lie in [0, 100], got {value!r}")
        if self.acc is not None and self.comp is not None and self.overall is not None:
            want = (self.acc + self.comp) / 2.0
            if abs(self.overall - want) > 1e-12:
                raise ContractError(
                    f"overall must average acc and comp: {self.overall!r} vs {want!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if getattr(self, f.name) is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        """Aligned name/value columns, one metric per line."""
        items = self.to_dict()
        width = max(len(k) for k in items)
        return "\n".join(f"{k.ljust(width)}  {v:.6f}" for k, v in items.items())


def nearest_distances(from_cloud, to_index) -> np.ndarray:
    """Exact Euclidean distance from each point to its nearest neighbor."""
    q = _cloud_points(from_cloud, "query")
    index = to_index if isinstance(to_index, SpatialIndex) else SpatialIndex(to_index)
    dist, _ = index.query(q)
    return dist


def _metric_distances(raw: np.ndarray, metric: str) -> np.ndarray:
    if metric not in _METRICS:
        raise ContractError(f"metric must be one of {_METRICS}, got {metric!r}")
    return raw ** 2 if metric == "squared" else raw


def chamfer_components(g, r, metric: str = "euclidean"):
    """Directional Chamfer means and their sum.

    Returns (d_g2r, d_r2g, d_cd) where d_g2r averages each G point's
    nearest-neighbor distance into R (squared when ``metric='squared'``),
    d_r2g is the reverse direction, and d_cd is their sum.
    """
    g_pts = _cloud_points(g, "G")
    r_pts = _cloud_points(r, "R")
    g2r = _metric_distances(nearest_distances(g_pts, SpatialIndex(r_pts)), metric)
    r2g = _metric_distances(nearest_distances(r_pts, SpatialIndex(g_pts)), metric)
    d_g2r = float(g2r.mean())
    d_r2g = float(r2g.mean())
    return d_g2r, d_r2g, d_g2r + d_r2g


def precision_recall_fscore(g, r, d: float, metric: str = "euclidean") -> ScoreReport:
    """Percent precision/recall/F-score of R against G at threshold d.

    Recall counts G points whose nearest R neighbor is strictly closer than
    d; precision counts R points against G; both scaled to [0, 100].  The
    comparison applies to the chosen metric's distances, so in ``squared``
    mode d is a squared-distance threshold.  F is the harmonic mean, 0 when
    both scores are 0.
    """
    if d <= 0:
        raise ContractError(f"threshold d must be positive, got {d!r}")
    g_pts = _cloud_points(g, "G")
    r_pts = _cloud_points(r, "R")
    g2r = _metric_distances(nearest_distances(g_pts, SpatialIndex(r_pts)), metric)
    r2g = _metric_distances(nearest_distances(r_pts, SpatialIndex(g_pts)), metric)
    recall = 100.0 * float((g2r < d).sum()) / g_pts.shape[0]
    precision = 100.0 * float((r2g < d).sum()) / r_pts.shape[0]
    if precision + recall == 0.0:
        fscore = 0.0
    else:
        fscore = 2.0 * precision * recall / (precision + recall)
    return ScoreReport(d=float(d), precision=precision, recall=recall, fscore=fscore,
                       d_g2r=float(g2r.mean()), d_r2g=float(r2g.mean()))


def dtu_scores(g, r, max_dist: float = 20.0):
    """DTU-style accuracy/completeness/overall with an outlier clamp.

    Accuracy is the mean Euclidean nearest-neighbor distance from R into G,
    completeness the reverse; distances above ``max_dist`` are clamped to it
    before averaging, and overall is the plain average of the two.
    """
    if max_dist <= 0:
        raise ContractError(f"max_dist must be positive, got {max_dist!r}")
    g_pts = _cloud_points(g, "G")
    r_pts = _cloud_points(r, "R")
    acc = float(np.minimum(nearest_distances(r_pts, SpatialIndex(g_pts)), max_dist).mean())
    comp = float(np.minimum(nearest_distances(g_pts, SpatialIndex(r_pts)), max_dist).mean())
    return acc, comp, (acc + comp) / 2.0


def sample_mesh(vertices, triangles, n_samples: int, seed: int = 0) -> PointCloud:
    """Uniform area-weighted point samples from a triangle mesh.

    Triangles are drawn with probability proportional to area (zero-area
    triangles are never drawn); points inside a triangle use the square-root
    barycentric scheme (1 - sqrt(r1), sqrt(r1)(1 - r2), sqrt(r1) r2), which
    is uniform over the triangle.  Deterministic for a given seed.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    tris = np.asarray(triangles, dtype=np.int64)
    if verts.ndim != 2 or verts.shape[1] != 3:
        raise DimensionError(f"vertices must be (V, 3), got {verts.shape}")
    if tris.ndim != 2 or tris.shape[1] != 3:
        raise DimensionError(f"triangles must be (T, 3), got {tris.shape}")
    if n_samples < 1:
        raise ContractError(f"n_samples must be >= 1, got {n_samples}")
    if tris.size and (tris.min() < 0 or tris.max() >= verts.shape[0]):
        raise ContractError("triangle indices must reference existing vertices")

    a = verts[tris[:, 0]]
    b = verts[tris[:, 1]]
    c = verts[tris[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0.0:
        raise ContractError("mesh has zero total area")

    rng = np.random.default_rng(seed)
    cumulative = np.cumsum(areas) / total
    chosen = np.searchsorted(cumulative, rng.random(n_samples), side="right")
    chosen = np.minimum(chosen, len(areas) - 1)
    r1 = np.sqrt(rng.random(n_samples))[:, None]
    r2 = rng.random(n_samples)[:, None]
    points = (1.0 - r1) * a[chosen] + r1 * (1.0 - r2) * b[chosen] + r1 * r2 * c[chosen]
    return PointCloud(points)


def fuse_depthmaps(views, geo_px_thresh: float = 1.0, geo_depth_thresh: float = 0.01,
                   min_views: int = 3) -> PointCloud:
    """Geometry-checked union of per-view unprojections.

    A pixel survives when at least ``min_views - 1`` other views agree with
    it: project its 3D point into the other view, look up that view's depth
    at the rounded pixel, lift that pixel back to 3D, and reproject into the
    origin view.  Agreement means the round trip lands within
    ``geo_px_thresh`` pixels and the round-trip depth differs relatively by
    less than ``geo_depth_thresh``.  Surviving points are averaged with the
    3D points of all agreeing views.  ``min_views=1`` degenerates to the
    plain union.  Views keep their own surviving pixels, so overlapping
    surfaces contribute one point per observing view.
    """
    if min_views < 1:
        raise ContractError(f"min_views must be >= 1, got {min_views}")
    if len(views) < min_views:
        raise ContractError(f"need at least {min_views} views, got {len(views)}")
    if geo_px_thresh <= 0 or geo_depth_thresh <= 0:
        raise ContractError("geometric thresholds must be positive")

    lifted = []
    for depth, cam in views:
        points, pixels, _ = unproject(depth, cam)
        lifted.append((points, pixels, depth, cam))

    kept = []
    for i, (points_i, pixels_i, depth_i, cam_i) in enumerate(lifted):
        m = points_i.shape[0]
        if m == 0:
            continue
        agree_count = np.zeros(m, dtype=np.int64)
        position_sum = points_i.copy()
        own_depth = depth_i.depth[pixels_i[:, 1], pixels_i[:, 0]]
        for j, (_, _, depth_j, cam_j) in enumerate(lifted):
            if j == i:
                continue
            h_j, w_j = depth_j.depth.shape
            pix_j, _, in_front_j = project(points_i, cam_j)
            col = np.rint(pix_j[:, 0]).astype(np.int64)
            row = np.rint(pix_j[:, 1]).astype(np.int64)
            inside = in_front_j & (col >= 0) & (col < w_j) & (row >= 0) & (row < h_j)
            usable = inside.copy()
            usable[inside] &= depth_j.valid[row[inside], col[inside]]
            if not usable.any():
                continue
            sel = np.flatnonzero(usable)
            sub_depth = depth_j.depth[row[sel], col[sel]]
            pix_h = np.stack([col[sel].astype(np.float64),
                              row[sel].astype(np.float64),
                              np.ones(sel.size)])
            cam_pts = cam_j.intrinsic_inv() @ (pix_h * sub_depth)
            world = (cam_j.extrinsic_inv() @ np.vstack([cam_pts, np.ones(sel.size)]))[:3].T
            back_pix, back_depth, back_front = project(world, cam_i)
            px_err = np.linalg.norm(back_pix - pixels_i[sel].astype(np.float64), axis=1)
            rel = np.abs(back_depth - own_depth[sel]) / own_depth[sel]
            ok = back_front & (px_err < geo_px_thresh) & (rel < geo_depth_thresh)
            idx = sel[ok]
            agree_count[idx] += 1
            position_sum[idx] += world[ok]
        survivors = agree_count >= (min_views - 1)
        if survivors.any():
            kept.append(position_sum[survivors] / (agree_count[survivors] + 1)[:, None])

    if not kept:
        return PointCloud(np.zeros((0, 3)))
    return PointCloud(np.vstack(kept))


def mmd_rbf(x, y, bandwidth: float | None = None) -> float:
    """Unbiased squared maximum mean discrepancy under a Gaussian kernel.

    With ``bandwidth=None`` the kernel width is the median pairwise distance
    over the pooled samples.  The unbiased estimator can dip below zero on
    finite samples; the result is clamped at 0.
    """
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    if xs.ndim != 2 or ys.ndim != 2:
        raise DimensionError("embeddings must be 2-D matrices")
    if xs.shape[1] != ys.shape[1]:
        raise DimensionError(
            f"embedding widths differ: {xs.shape[1]} vs {ys.shape[1]}")
    n, m = xs.shape[0], ys.shape[0]
    if n < 2 or m < 2:
        raise ContractError("the unbiased estimator needs at least 2 samples per side")
    if bandwidth is None:
        bandwidth = float(np.median(pdist(np.vstack([xs, ys]))))
        if bandwidth == 0.0:
            raise ContractError("median-heuristic bandwidth is 0; samples are degenerate")
    if bandwidth <= 0:
        raise ContractError(f"bandwidth must be positive, got {bandwidth!r}")

    def kernel(a, b):
        sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        return np.exp(-sq / (2.0 * bandwidth ** 2))

    kxx = kernel(xs, xs)
    kyy = kernel(ys, ys)
    kxy = kernel(xs, ys)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    estimate = sum_xx + sum_yy - 2.0 * kxy.mean()
    return max(float(estimate), 0.0)
