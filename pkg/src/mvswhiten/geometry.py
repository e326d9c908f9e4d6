"""Pinhole cameras, depth unprojection, and differentiable cross-view warping.

Pixel convention: centers on integer coordinates, origin at the top-left,
u = column, v = row.  Extrinsics map world coordinates to camera coordinates.
Warping is destination-driven: each pixel of the target view is lifted to 3D
with the target's depth, projected into the source view, and the source
features are sampled bilinearly there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, NumericalError, ValidationError
from .tensor import Tensor, primitive

BEHIND_EPS = 1e-9


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with pixel intrinsics and a world-to-camera pose.

    Args:
        intrinsic: 3x3 upper-triangular matrix, positive focal lengths,
            bottom-right entry 1.
        extrinsic: 4x4 rigid transform taking world points to camera space.
        depth_min: start of the usable depth range, > 0.
        depth_interval: depth step of the hypothesis range (dataset units).
    """

    intrinsic: np.ndarray
    extrinsic: np.ndarray
    depth_min: float = 1.0
    depth_interval: float = 1.0

    def __post_init__(self):
        k = np.asarray(self.intrinsic, dtype=np.float64)
        t = np.asarray(self.extrinsic, dtype=np.float64)
        if k.shape != (3, 3):
            raise DimensionError(f"intrinsic matrix must be 3x3, got {k.shape}")
        if t.shape != (4, 4):
            raise DimensionError(f"extrinsic matrix must be 4x4, got {t.shape}")
        lower = max(abs(k[1, 0]), abs(k[2, 0]), abs(k[2, 1]))
        if lower > 1e-9:
            raise ValidationError(
                f"intrinsic matrix is not upper-triangular (residual {lower:.3e})")
        if abs(k[2, 2] - 1.0) > 1e-9:
            raise ValidationError(f"intrinsic [2][2] must be 1, got {k[2, 2]!r}")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValidationError("focal lengths must be positive")
        rot = t[:3, :3]
        ortho = float(np.abs(rot.T @ rot - np.eye(3)).max())
        if ortho > 1e-6:
            raise ValidationError(
                f"extrinsic rotation is not orthonormal (max residual {ortho:.3e})")
        det = float(np.linalg.det(rot))
        if abs(det - 1.0) > 1e-6:
            raise ValidationError(
                f"extrinsic rotation determinant is {det!r}, expected +1")
        if float(np.abs(t[3] - np.array([0.0, 0.0, 0.0, 1.0])).max()) > 1e-9:
            raise ValidationError("extrinsic bottom row must be [0, 0, 0, 1]")
        if not self.depth_min > 0:
            raise ValidationError(f"depth_min must be > 0, got {self.depth_min!r}")
        object.__setattr__(self, "intrinsic", k.copy())
        object.__setattr__(self, "extrinsic", t.copy())
        object.__setattr__(self, "depth_min", float(self.depth_min))
        object.__setattr__(self, "depth_interval", float(self.depth_interval))

    def intrinsic_inv(self) -> np.ndarray:
        try:
            return np.linalg.inv(self.intrinsic)
        except np.linalg.LinAlgError as exc:  # guarded by validation, kept for safety
            raise NumericalError("intrinsic matrix is singular") from exc

    def extrinsic_inv(self) -> np.ndarray:
        try:
            return np.linalg.inv(self.extrinsic)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("extrinsic matrix is singular") from exc


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth with a validity mask; invalid pixels carry depth 0."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if d.ndim != 2:
            raise DimensionError(f"depth must be H x W, got shape {d.shape}")
        if v.shape != d.shape:
            raise DimensionError(f"valid mask shape {v.shape} != depth shape {d.shape}")
        if np.any(v & ~(d > 0)):
            raise ValidationError("valid pixels must have depth > 0")
        if np.any(~v & (d != 0)):
            raise ValidationError("invalid pixels must carry depth 0")
        object.__setattr__(self, "depth", d.copy())
        object.__setattr__(self, "valid", v.copy())

    @classmethod
    def from_array(cls, depth) -> "DepthMap":
        """Mark finite positive entries valid and zero out the rest."""
        d = np.asarray(depth, dtype=np.float64)
        valid = np.isfinite(d) & (d > 0)
        return cls(depth=np.where(valid, d, 0.0), valid=valid)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass(frozen=True)
class FeatureMap:
    """A C x H x W stack of finite feature channels."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] < 1:
            raise DimensionError(f"features must be C x H x W, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValidationError("feature values must be finite")
        object.__setattr__(self, "values", v.copy())

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def unproject(depth: DepthMap, cam: Camera, view_tag: int = 0):
    """Lift every valid pixel to a world-space point.

    Args:
        depth: the view's depth map.
        cam: the view's camera.
        view_tag: integer stamped on every produced point, so points from
            several views can be pooled and traced back.

    Returns:
        (points, pixels, tags): (M, 3) world points, (M, 2) integer (u, v)
        origin pixels, and (M,) view tags, one row per valid pixel in
        row-major order.
    """
    rows, cols = np.nonzero(depth.valid)
    m = rows.size
    if m == 0:
        return (np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64),
                np.zeros(0, dtype=np.int64))
    d = depth.depth[rows, cols]
    pix_h = np.stack([cols.astype(np.float64), rows.astype(np.float64), np.ones(m)])
    cam_pts = cam.intrinsic_inv() @ (pix_h * d)
    world_h = cam.extrinsic_inv() @ np.vstack([cam_pts, np.ones(m)])
    points = np.ascontiguousarray(world_h[:3].T)
    pixels = np.stack([cols, rows], axis=1).astype(np.int64)
    tags = np.full(m, int(view_tag), dtype=np.int64)
    return points, pixels, tags


def project(points, cam: Camera):
    """Project world points into a camera.

    Args:
        points: (N, 3) world coordinates.
        cam: target camera.

    Returns:
        (pixels, depths, in_front): (N, 2) float (u, v) positions, (N,)
        camera-space depths, and an (N,) mask that is False for points at or
        behind the camera plane (their pixel entries are zeroed, not valid).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DimensionError(f"points must be (N, 3), got shape {pts.shape}")
    n = pts.shape[0]
    cam_pts = (cam.extrinsic @ np.vstack([pts.T, np.ones(n)]))[:3]
    z = cam_pts[2].copy()
    in_front = z > BEHIND_EPS
    proj = cam.intrinsic @ cam_pts
    safe_z = np.where(in_front, z, 1.0)
    u = np.where(in_front, proj[0] / safe_z, 0.0)
    v = np.where(in_front, proj[1] / safe_z, 0.0)
    return np.stack([u, v], axis=1), z, in_front


def _bilinear_terms(coords: np.ndarray, width: int, height: int):
    """Corner indices and weights for bilinear interpolation.

    Coordinates must already lie inside [0, width-1] x [0, height-1]; the
    upper corner collapses onto the boundary with weight zero, so samples at
    exact integer positions reproduce the stored value.
    """
    u = coords[:, 0]
    v = coords[:, 1]
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = u - x0
    fy = v - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy),
                        (1 - fx) * fy, fx * fy])
    flat = np.stack([y0 * width + x0, y0 * width + x1,
                     y1 * width + x0, y1 * width + x1])
    return flat, weights


def in_sample_bounds(coords: np.ndarray, width: int, height: int) -> np.ndarray:
    """True where a bilinear footprint lies fully inside the image."""
    u = coords[:, 0]
    v = coords[:, 1]
    return (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)


def bilinear_sample(feat, at):
    """Sample one position; returns a (C,) vector or None when out of bounds.

    Out of bounds means part of the 4-pixel footprint would fall outside
    [0, W-1] x [0, H-1].
    """
    values = feat.values if isinstance(feat, FeatureMap) else np.asarray(feat, dtype=np.float64)
    if values.ndim != 3:
        raise DimensionError(f"features must be C x H x W, got shape {values.shape}")
    c, h, w = values.shape
    coords = np.asarray(at, dtype=np.float64).reshape(1, 2)
    if not in_sample_bounds(coords, w, h)[0]:
        return None
    idx, weights = _bilinear_terms(coords, w, h)
    flat = values.reshape(c, h * w)
    return (flat[:, idx[:, 0]] * weights[:, 0]).sum(axis=1)


def bilinear_gather(values, src_hw, coords, out_positions, out_size):
    """Differentiable bilinear gather from flat features into a flat output.

    Args:
        values: (C, H*W) source features; a tracked Tensor keeps gradients.
        src_hw: (height, width) of the source grid.
        coords: (M, 2) float (u, v) sample positions, all inside bounds.
        out_positions: (M,) distinct flat indices receiving each sample.
        out_size: number of columns in the output.

    Returns:
        (C, out_size) of the same kind as ``values``; unsampled columns are 0.
    """
    h, w = int(src_hw[0]), int(src_hw[1])
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    out_positions = np.asarray(out_positions, dtype=np.int64).reshape(-1)
    if coords.shape[0] != out_positions.shape[0]:
        raise DimensionError("coords and out_positions must pair up")
    if coords.size and not in_sample_bounds(coords, w, h).all():
        raise ContractError("bilinear_gather received out-of-bounds coordinates")
    if np.unique(out_positions).size != out_positions.size:
        raise ContractError("out_positions must be distinct")

    tracked = isinstance(values, Tensor)
    flat = values.data if tracked else np.asarray(values, dtype=np.float64)
    if flat.ndim != 2 or flat.shape[1] != h * w:
        raise DimensionError(
            f"values must be (C, {h * w}) for a {h}x{w} grid, got {flat.shape}")
    c = flat.shape[0]
    idx, weights = _bilinear_terms(coords, w, h)

    def forward(data: np.ndarray) -> np.ndarray:
        out = np.zeros((c, out_size))
        for corner in range(4):
            out[:, out_positions] += weights[corner] * data[:, idx[corner]]
        return out

    if not tracked:
        return forward(flat)

    def vjp(g: np.ndarray):
        grad_t = np.zeros((h * w, c))
        for corner in range(4):
            picked = (weights[corner][:, None] * g[:, out_positions].T)
            np.add.at(grad_t, idx[corner], picked)
        return (grad_t.T,)

    return primitive([values], forward(flat), vjp, name="bilinear_gather")


BORDER_SNAP = 1e-6


def warp_grid(from_cam: Camera, to_cam: Camera, to_depth: DepthMap, src_hw):
    """Source-view sample positions for warping into the ``to`` view.

    Every valid pixel of ``to_depth`` is lifted to 3D and projected into the
    ``from`` camera.  Returns an (H, W, 2) coordinate grid and an (H, W)
    mask of pixels whose sample footprint stays inside a source image of
    shape ``src_hw`` (invalid or behind-camera pixels are masked off).
    Positions within 1e-6 px outside the source border are snapped onto it,
    so identity warps survive floating-point rounding at the image edge.
    """
    h, w = to_depth.depth.shape
    src_h, src_w = int(src_hw[0]), int(src_hw[1])
    coords = np.zeros((h, w, 2))
    ok = np.zeros((h, w), dtype=bool)
    points, pixels, _ = unproject(to_depth, to_cam)
    if points.shape[0] == 0:
        return coords, ok
    spix, _, in_front = project(points, from_cam)
    limits = np.array([src_w - 1.0, src_h - 1.0])
    clipped = np.clip(spix, 0.0, limits)
    near = np.abs(spix - clipped) <= BORDER_SNAP
    spix = np.where(near, clipped, spix)
    inside = in_front & in_sample_bounds(spix, src_w, src_h)
    uu, vv = pixels[:, 0], pixels[:, 1]
    coords[vv, uu] = spix
    ok[vv, uu] = inside
    return coords, ok


def warp_feature(src_feat, from_cam: Camera, to_cam: Camera, to_depth: DepthMap):
    """Resample source-view features onto the ``to`` view's pixel grid.

    Args:
        src_feat: FeatureMap or (C, H, W) array living in the ``from`` view.
        from_cam: camera of the view that owns ``src_feat``.
        to_cam: camera of the destination view.
        to_depth: destination depth used to lift pixels to 3D.

    Returns:
        (warped, in_bounds): features on the destination grid (same container
        kind as the input) and the (H, W) validity mask; masked-off pixels
        are zero.
    """
    wrap = isinstance(src_feat, FeatureMap)
    values = src_feat.values if wrap else np.asarray(src_feat, dtype=np.float64)
    if values.ndim != 3:
        raise DimensionError(f"features must be C x H x W, got shape {values.shape}")
    c, src_h, src_w = values.shape
    h, w = to_depth.depth.shape
    grid, ok = warp_grid(from_cam, to_cam, to_depth, (src_h, src_w))
    coords = grid[ok]
    positions = np.flatnonzero(ok)
    flat = bilinear_gather(values.reshape(c, -1), (src_h, src_w),
                           coords, positions, h * w)
    warped = flat.reshape(c, h, w)
    return (FeatureMap(warped) if wrap else warped), ok
