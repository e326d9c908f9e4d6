"""K-means over fused multi-view point clouds and per-view label maps.

Points lifted from several depth maps are pooled into one cloud, clustered
with seeded k-means++ and Lloyd iterations, and the labels are written back
into each view at the pixel every point originated from.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .geometry import Camera, DepthMap, unproject

_CONVERGENCE_REL = 1e-6
_MAX_ITERATIONS = 100


@dataclass
class LabeledCloud:
    """Pooled 3D points with their origin view, origin pixel, and cluster label.

    ``label`` is -1 until a clustering assigns real labels.
    """

    points: np.ndarray
    view_tag: np.ndarray
    pixel: np.ndarray
    label: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DimensionError(f"points must be (N, 3), got {pts.shape}")
        n = pts.shape[0]
        tags = np.asarray(self.view_tag, dtype=np.int64)
        pix = np.asarray(self.pixel, dtype=np.int64)
        if self.label is None:
            lab = np.full(n, -1, dtype=np.int64)
        else:
            lab = np.asarray(self.label, dtype=np.int64)
        if tags.shape != (n,) or lab.shape != (n,) or pix.shape != (n, 2):
            raise DimensionError("points, view_tag, pixel, and label sizes disagree")
        if n and lab.min() < -1:
            raise ContractError("labels must be -1 or cluster indices")
        self.points = pts
        self.view_tag = tags
        self.pixel = pix
        self.label = lab

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class ClusterMap:
    """Per-pixel cluster labels for one view; -1 marks unclustered pixels."""

    label: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.label, dtype=np.int64)
        if lab.ndim != 2:
            raise DimensionError(f"label map must be H x W, got {lab.shape}")
        if lab.size and lab.min() < -1:
            raise ContractError("cluster labels must be -1 or non-negative")
        object.__setattr__(self, "label", lab.copy())

    @property
    def height(self) -> int:
        return self.label.shape[0]

    @property
    def width(self) -> int:
        return self.label.shape[1]


def fuse_views(ref: tuple[DepthMap, Camera],
               srcs: list[tuple[DepthMap, Camera]]) -> LabeledCloud:
    """Unproject the reference and every source view into one tagged cloud.

    View tag 0 is the reference; sources get 1..len(srcs) in order.
    """
    if not srcs:
        raise ContractError("fuse_views needs at least one source view")
    chunks = [unproject(ref[0], ref[1], view_tag=0)]
    for i, (depth, cam) in enumerate(srcs, start=1):
        chunks.append(unproject(depth, cam, view_tag=i))
    points = np.concatenate([c[0] for c in chunks])
    pixels = np.concatenate([c[1] for c in chunks])
    tags = np.concatenate([c[2] for c in chunks])
    return LabeledCloud(points=points, view_tag=tags, pixel=pixels)


def _plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = np.empty((k, points.shape[1]))
    chosen[0] = points[int(rng.integers(n))]
    d2 = ((points - chosen[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:  # all remaining distances zero (duplicate points)
            idx = int(rng.integers(n))
        chosen[i] = points[idx]
        d2 = np.minimum(d2, ((points - chosen[i]) ** 2).sum(axis=1))
    return chosen


def _lloyd(points: np.ndarray, centroids: np.ndarray,
           tol: float, max_iter: int = _MAX_ITERATIONS):
    """Lloyd iterations with farthest-point reseeding of emptied clusters.

    Returns (labels, centroids, objective_history) where the history holds
    the within-cluster sum of squared distances at each assignment step.
    """
    n, k = points.shape[0], centroids.shape[0]
    history = []
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        own = d2[np.arange(n), labels]
        history.append(float(own.sum()))
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, points)
        new = centroids.copy()
        nonempty = counts > 0
        new[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            claimable = own.copy()
            for c in np.flatnonzero(~nonempty):
                far = int(claimable.argmax())
                new[c] = points[far]
                claimable[far] = -np.inf
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift <= tol:
            break
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return labels, centroids, history


def kmeans(points, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded k-means++ plus Lloyd.

    Deterministic for a given (points, k, seed).  Converges when the largest
    centroid displacement drops below 1e-6 of the bounding-box diagonal, or
    after 100 iterations.  Distances are plain Euclidean in input units.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise DimensionError(f"points must be (N, d), got {pts.shape}")
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"need 1 <= k <= N, got k={k} with N={n}")
    rng = np.random.default_rng(seed)
    init = _plus_plus_init(pts, k, rng)
    diag = float(np.sqrt((np.ptp(pts, axis=0) ** 2).sum()))
    labels, centroids, _ = _lloyd(pts, init, tol=_CONVERGENCE_REL * diag)
    return labels, centroids


def split_and_project(cloud: LabeledCloud, dims: list[tuple[int, int]]) -> list[ClusterMap]:
    """Write each point's label at its origin pixel, one map per view.

    Because origin pixels are retained through fusion, no re-projection (and
    thus no rounding) is involved; pixels with no point stay -1.
    """
    if len(cloud) and cloud.label.min() < 0:
        raise ContractError("cloud must be fully labeled before projection")
    if len(cloud) and cloud.view_tag.max() >= len(dims):
        raise ContractError(
            f"view tag {int(cloud.view_tag.max())} has no entry in dims (got {len(dims)})")
    maps = []
    for view, (h, w) in enumerate(dims):
        grid = np.full((int(h), int(w)), -1, dtype=np.int64)
        sel = cloud.view_tag == view
        uu = cloud.pixel[sel, 0]
        vv = cloud.pixel[sel, 1]
        if sel.any() and (uu.min() < 0 or vv.min() < 0
                          or uu.max() >= w or vv.max() >= h):
            raise ContractError(f"view {view} has origin pixels outside {h}x{w}")
        grid[vv, uu] = cloud.label[sel]
        maps.append(ClusterMap(label=grid))
    return maps
