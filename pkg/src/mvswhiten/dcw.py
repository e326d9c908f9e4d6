"""Depth-clustering-guided whitening loss.

The pipeline pools unprojected depth points from all views, clusters them,
projects cluster labels back into each view, and then penalizes the
off-diagonal entries of cross-view feature covariances inside each cluster.
Which entries are penalized is decided per cluster by how much the entry
varies between the two warp directions, against an adaptive threshold.

All losses return scalar tensors (call ``.item()`` for the float); when the
input features are tracked tensors the gradients flow back through warping,
masking, and the covariance products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as tt
from .clustering import ClusterMap, fuse_views, kmeans, split_and_project
from .errors import ContractError, DimensionError
from .geometry import Camera, DepthMap, FeatureMap, bilinear_gather, warp_grid
from .tensor import Tensor

REF_TO_SRC = "ref_to_src"
SRC_TO_REF = "src_to_ref"

_GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])  # ITU-R 601 luma


@dataclass(frozen=True)
class DcwConfig:
    """Knobs of the clustering-guided whitening loss.

    The defaults follow the published recipe: 8 clusters, epsilon 0.02,
    loss weight 1.0, 3 feature layers, brightness/contrast jitter 0.7,
    saturation jitter 0.2, gamma in [0.5, 2.0].
    """

    k_clusters: int = 8
    epsilon: float = 0.02
    lam: float = 1.0
    num_layers: int = 3
    jitter_brightness: float = 0.7
    jitter_contrast: float = 0.7
    jitter_saturation: float = 0.2
    gamma_range: tuple[float, float] = (0.5, 2.0)
    normalize_by_count: bool = True
    variance_source: str = "directions"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ContractError(f"epsilon must sit in (0, 1), got {self.epsilon!r}")
        if self.lam < 0:
            raise ContractError(f"lam must be >= 0, got {self.lam!r}")
        if self.k_clusters < 1:
            raise ContractError(f"k_clusters must be >= 1, got {self.k_clusters!r}")
        if self.num_layers < 1:
            raise ContractError(f"num_layers must be >= 1, got {self.num_layers!r}")
        for name in ("jitter_brightness", "jitter_contrast", "jitter_saturation"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        lo, hi = self.gamma_range
        if not 0 < lo <= hi:
            raise ContractError(f"gamma_range must satisfy 0 < lo <= hi, got {self.gamma_range!r}")
        if self.variance_source not in ("directions", "redraw"):
            raise ContractError(
                f"variance_source must be 'directions' or 'redraw', got {self.variance_source!r}")


@dataclass(frozen=True)
class ClusterCov:
    """Cross-view covariance of one cluster in one warp direction."""

    label: int
    direction: str
    matrix: object  # (C, C) ndarray, or Tensor when gradients are tracked
    valid_count: int

    def __post_init__(self):
        if self.direction not in (REF_TO_SRC, SRC_TO_REF):
            raise ContractError(f"unknown direction {self.direction!r}")
        if self.valid_count < 0:
            raise ContractError("valid_count must be >= 0")
        data = self.matrix.data if isinstance(self.matrix, Tensor) else np.asarray(self.matrix)
        if data.ndim != 2 or data.shape[0] != data.shape[1]:
            raise DimensionError(f"covariance must be square, got {data.shape}")
        if not np.isfinite(data).all():
            raise ContractError("covariance entries must be finite")
        if self.valid_count == 0 and np.any(data != 0.0):
            raise ContractError("covariance must be zero when no pixels contributed")

    @property
    def dim(self) -> int:
        data = self.matrix.data if isinstance(self.matrix, Tensor) else self.matrix
        return data.shape[0]

    def values(self) -> np.ndarray:
        """The matrix as a plain array, detached from any tape."""
        return self.matrix.data if isinstance(self.matrix, Tensor) else np.asarray(self.matrix)


@dataclass(frozen=True)
class SelectionMask:
    """Strict-upper-triangle boolean mask with the threshold that made it."""

    mask: np.ndarray
    tau: float

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"mask must be square, got {m.shape}")
        if np.any(m & ~np.triu(np.ones_like(m), k=1).astype(bool)):
            raise ContractError("mask may only select strict upper-triangle entries")
        object.__setattr__(self, "mask", m.copy())

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def _image_array(image) -> np.ndarray:
    values = image.values if isinstance(image, FeatureMap) else np.asarray(image, dtype=np.float64)
    if values.ndim != 3 or values.shape[0] != 3:
        raise DimensionError(f"expected a 3 x H x W image, got shape {values.shape}")
    if values.min() < 0.0 or values.max() > 1.0:
        raise ContractError("image values must lie in [0, 1]")
    return values.astype(np.float64)


def apply_photometric(image, brightness: float = 1.0, contrast: float = 1.0,
                      saturation: float = 1.0, gamma: float = 1.0):
    """Apply brightness, contrast, saturation, and gamma, in that order.

    Contrast blends toward the image's mean luma, saturation toward the
    per-pixel gray value (ITU-R 601 weights).  The result is clamped to
    [0, 1] after every stage, so gamma never sees negative inputs.  Stages
    with factor exactly 1 are skipped, keeping identity transforms exact.
    """
    values = _image_array(image)
    for factor in (brightness, contrast, saturation):
        if factor < 0:
            raise ContractError("photometric factors must be non-negative")
    if gamma <= 0:
        raise ContractError(f"gamma must be positive, got {gamma!r}")
    out = values
    if brightness != 1.0:
        out = np.clip(out * brightness, 0.0, 1.0)
    if contrast != 1.0:
        luma = float((_GRAY_WEIGHTS @ out.reshape(3, -1)).mean())
        out = np.clip(luma + contrast * (out - luma), 0.0, 1.0)
    if saturation != 1.0:
        gray = np.tensordot(_GRAY_WEIGHTS, out, axes=1)[None]
        out = np.clip(gray + saturation * (out - gray), 0.0, 1.0)
    if gamma != 1.0:
        out = np.clip(out ** gamma, 0.0, 1.0)
    if isinstance(image, FeatureMap):
        return FeatureMap(values=out)
    return np.array(out, copy=True)


def _draw_factors(cfg: DcwConfig, rng: np.random.Generator):
    """Brightness, contrast, saturation, gamma draws (fixed order)."""
    b = rng.uniform(max(0.0, 1.0 - cfg.jitter_brightness), 1.0 + cfg.jitter_brightness)
    c = rng.uniform(max(0.0, 1.0 - cfg.jitter_contrast), 1.0 + cfg.jitter_contrast)
    s = rng.uniform(max(0.0, 1.0 - cfg.jitter_saturation), 1.0 + cfg.jitter_saturation)
    g = rng.uniform(cfg.gamma_range[0], cfg.gamma_range[1])
    return b, c, s, g


def photometric_augment(image, cfg: DcwConfig, seed):
    """Randomized color jitter plus gamma, deterministic per seed.

    ``seed`` is anything ``np.random.default_rng`` accepts; the pipeline
    passes (config seed, view index) so each image gets its own stream.
    """
    rng = np.random.default_rng(seed)
    b, c, s, g = _draw_factors(cfg, rng)
    return apply_photometric(image, brightness=b, contrast=c, saturation=s, gamma=g)


def _flat_features(feat) -> tuple[object, tuple[int, int, int]]:
    """Normalize (C, H, W) or (C, N) input to flat (C, N), keeping kind."""
    if isinstance(feat, FeatureMap):
        feat = feat.values
    if isinstance(feat, Tensor):
        if feat.data.ndim == 3:
            c, h, w = feat.shape
            return feat.reshape((c, h * w)), (c, h, w)
        if feat.data.ndim == 2:
            return feat, (feat.shape[0], 1, feat.shape[1])
        raise DimensionError(f"features must be rank 2 or 3, got {feat.shape}")
    arr = np.asarray(feat, dtype=np.float64)
    if arr.ndim == 3:
        c, h, w = arr.shape
        return arr.reshape(c, h * w), (c, h, w)
    if arr.ndim == 2:
        return arr, (arr.shape[0], 1, arr.shape[1])
    raise DimensionError(f"features must be rank 2 or 3, got {arr.shape}")


def cluster_masked_features(feat, cluster_map: ClusterMap, k: int):
    """Zero features outside cluster ``k``; also return the member pixels.

    Accepts FeatureMap, (C, H, W) arrays, or tracked tensors of that shape;
    the masked result has the same kind as the input, and the pixel list is
    an (M, 2) integer array of (u, v) positions where the map equals ``k``.
    """
    if k < 0:
        raise ContractError(f"cluster label must be >= 0, got {k}")
    labels = cluster_map.label
    h, w = labels.shape
    values = feat.values if isinstance(feat, FeatureMap) else feat
    shape = values.shape if isinstance(values, Tensor) else np.asarray(values).shape
    if len(shape) != 3 or shape[1:] != (h, w):
        raise DimensionError(
            f"features of shape {shape} do not sit on the {h}x{w} cluster map")
    member = labels == k
    vv, uu = np.nonzero(member)
    pixels = np.stack([uu, vv], axis=1).astype(np.int64)
    mask = np.broadcast_to(member.astype(np.float64), shape).copy()
    if isinstance(values, Tensor):
        masked = tt.mul(values, Tensor(mask))
        return masked, pixels
    masked = np.asarray(values, dtype=np.float64) * mask
    if isinstance(feat, FeatureMap):
        return FeatureMap(values=masked), pixels
    return masked, pixels


def cross_view_covariance(feat_to, feat_from_warped, valid, cluster_pixels,
                          normalize_by_count: bool = True, *,
                          label: int = 0, direction: str = REF_TO_SRC) -> ClusterCov:
    """Uncentered cross covariance over one cluster's usable pixels.

    Rows (pixels) of ``feat_to`` are paired with rows of the warped features;
    the sum of their outer products is taken over cluster_pixels that are
    also marked valid, and divided by that pixel count when
    ``normalize_by_count``.  No mean is subtracted.
    """
    valid = np.asarray(valid, dtype=bool)
    if valid.ndim != 2:
        raise DimensionError(f"valid mask must be H x W, got {valid.shape}")
    h, w = valid.shape
    a_flat, (ca, ha, wa) = _flat_features(feat_to)
    b_flat, (cb, hb, wb) = _flat_features(feat_from_warped)
    if ca != cb:
        raise DimensionError(f"channel counts differ: {ca} vs {cb}")
    for name, (fh, fw) in (("feat_to", (ha, wa)), ("feat_from_warped", (hb, wb))):
        if (fh, fw) not in ((h, w), (1, h * w)):
            raise DimensionError(f"{name} does not match the {h}x{w} valid mask")

    member = np.zeros((h, w), dtype=bool)
    pixels = np.asarray(cluster_pixels, dtype=np.int64).reshape(-1, 2)
    if pixels.size:
        if (pixels[:, 0].min() < 0 or pixels[:, 0].max() >= w
                or pixels[:, 1].min() < 0 or pixels[:, 1].max() >= h):
            raise DimensionError("cluster pixels fall outside the valid mask")
        member[pixels[:, 1], pixels[:, 0]] = True
    member &= valid
    count = int(member.sum())
    tracked = isinstance(a_flat, Tensor) or isinstance(b_flat, Tensor)
    c = ca
    if count == 0:
        zero = np.zeros((c, c))
        return ClusterCov(label=label, direction=direction,
                          matrix=Tensor(zero) if tracked else zero, valid_count=0)

    col_mask = np.broadcast_to(member.reshape(1, -1), (c, h * w)).astype(np.float64)
    a_sel = tt.mul(tt.as_tensor(a_flat), Tensor(col_mask))
    b_sel = tt.mul(tt.as_tensor(b_flat), Tensor(col_mask))
    sigma = tt.matmul(a_sel, tt.transpose(b_sel))
    if normalize_by_count:
        sigma = tt.scale(sigma, 1.0 / count)
    return ClusterCov(label=label, direction=direction,
                      matrix=sigma if tracked else sigma.data, valid_count=count)


def variance_matrix(sigma_a: ClusterCov, sigma_b: ClusterCov) -> np.ndarray:
    """Elementwise variance of the two direction covariances.

    Computed as the two squared deviations from their mean, averaged; this
    equals ((a - b) / 2)^2 and is symmetric in its arguments.  The result is
    a plain array: the selection it feeds is not differentiated through.
    """
    a = sigma_a.values() if isinstance(sigma_a, ClusterCov) else np.asarray(sigma_a, dtype=np.float64)
    b = sigma_b.values() if isinstance(sigma_b, ClusterCov) else np.asarray(sigma_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"covariance shapes differ: {a.shape} vs {b.shape}")
    mean = (a + b) / 2.0
    return ((a - mean) ** 2 + (b - mean) ** 2) / 2.0


def adaptive_threshold(v: np.ndarray, seed: int = 0) -> float:
    """Threshold splitting the strict-upper-triangle variances into two levels.

    Runs seeded 1-D 2-means on the entries and returns the midpoint of the
    converged centers.  If every entry is equal, that value itself is
    returned, which empties the (strictly greater) selection.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise DimensionError(f"variance matrix must be square, got {v.shape}")
    c = v.shape[0]
    if c < 2:
        raise ContractError("need at least 2 channels to threshold variances")
    if v.min() < 0:
        raise ContractError("variances must be non-negative")
    entries = v[np.triu_indices(c, k=1)]
    if np.ptp(entries) == 0.0:
        return float(entries[0])
    _, centers = kmeans(entries.reshape(-1, 1), k=2, seed=seed)
    return float(centers.mean())


def selection_mask(v: np.ndarray, tau: float) -> SelectionMask:
    """Entries strictly above tau, restricted to the strict upper triangle."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise DimensionError(f"variance matrix must be square, got {v.shape}")
    upper = np.triu(np.ones(v.shape, dtype=bool), k=1)
    return SelectionMask(mask=(v > tau) & upper, tau=float(tau))


def dcw_loss(sigma_r2s: ClusterCov, sigma_s2r: ClusterCov,
             mask: SelectionMask, epsilon: float) -> Tensor:
    """Mean over selected entries of |sigma - epsilon|, summed over directions.

    Pulls each selected covariance entry toward the small constant epsilon
    rather than exactly zero.  An empty mask gives a constant 0.  Returns a
    scalar tensor; gradients reach both covariance matrices when they are
    tracked.
    """
    c = sigma_r2s.dim
    if sigma_s2r.dim != c or mask.mask.shape != (c, c):
        raise DimensionError("covariances and mask must share the channel count")
    if mask.count == 0:
        return Tensor(0.0)
    weights = Tensor(mask.mask.astype(np.float64))
    inv = 1.0 / mask.count

    def one_direction(cov: ClusterCov) -> Tensor:
        sigma = tt.as_tensor(cov.matrix)
        deviations = tt.mul(tt.tensor_abs(tt.sub(sigma, epsilon)), weights)
        return tt.scale(tt.tensor_sum(deviations), inv)

    return tt.add(one_direction(sigma_r2s), one_direction(sigma_s2r))


def smooth_huber_depth_loss(pred: DepthMap, gt: DepthMap, delta: float = 1.0) -> float:
    """Mean smooth-Huber error over pixels where the ground truth is valid."""
    if pred.depth.shape != gt.depth.shape:
        raise DimensionError(
            f"depth shapes differ: {pred.depth.shape} vs {gt.depth.shape}")
    if delta <= 0:
        raise ContractError(f"delta must be positive, got {delta!r}")
    sel = gt.valid
    if not sel.any():
        raise ContractError("ground-truth depth has no valid pixels")
    err = pred.depth[sel] - gt.depth[sel]
    ae = np.abs(err)
    per_pixel = np.where(ae < delta, 0.5 * err * err / delta, ae - 0.5 * delta)
    return float(per_pixel.mean())


@dataclass(frozen=True)
class DcwTerm:
    """One (pair, layer, cluster) contribution to the clustering-guided loss."""

    pair: int
    layer: int
    cluster: int
    direction_count: int
    valid_count: int
    loss: Tensor

    def key(self) -> tuple[int, int, int]:
        return (self.pair, self.layer, self.cluster)


@dataclass(frozen=True)
class DcwResult:
    """Per-term losses plus their (pair, layer, cluster)-ordered sum."""

    terms: tuple
    dcw_sum: Tensor
    augmented_images: tuple


@dataclass(frozen=True)
class DcwView:
    """One view's inputs: depth, camera, per-layer features, optional image."""

    depth: DepthMap
    camera: Camera
    features: Sequence | None = None
    image: object | None = None


def overall_loss(depth_losses, dcw_terms, cfg: DcwConfig) -> Tensor:
    """Depth loss plus the weighted average of all clustering-guided terms.

    ``depth_losses`` is a scalar or an iterable of scalars (summed).
    ``dcw_terms`` maps (pair, layer, cluster) to scalar losses, or is a
    sequence of DcwTerm; the index grid must be complete, and terms are
    summed in (pair, layer, cluster) order before dividing by the grid size
    and scaling by the loss weight.
    """
    if isinstance(depth_losses, (int, float, np.floating, Tensor)):
        depth_losses = [depth_losses]
    depth_total = Tensor(0.0)
    for piece in depth_losses:
        depth_total = tt.add(depth_total, piece if isinstance(piece, Tensor) else float(piece))

    if isinstance(dcw_terms, Mapping):
        table = {tuple(k): v for k, v in dcw_terms.items()}
    else:
        table = {t.key(): t.loss for t in dcw_terms}
    if not table:
        raise ContractError("dcw_terms must not be empty")
    pairs = sorted({k[0] for k in table})
    expected = {(n, l, k)
                for n in range(1, len(pairs) + 1)
                for l in range(1, cfg.num_layers + 1)
                for k in range(cfg.k_clusters)}
    if set(table) != expected:
        raise ContractError(
            "dcw_terms must cover every (pair, layer, cluster) combination "
            f"for {len(pairs)} pair(s), {cfg.num_layers} layer(s), {cfg.k_clusters} cluster(s)")
    acc = Tensor(0.0)
    for key in sorted(table):
        value = table[key]
        acc = tt.add(acc, value if isinstance(value, Tensor) else float(value))
    weight = cfg.lam / len(expected)
    return tt.add(depth_total, tt.scale(acc, weight))


def _check_pipeline_inputs(views: list[DcwView], cfg: DcwConfig,
                           feature_fn) -> None:
    if feature_fn is None:
        for i, view in enumerate(views):
            if view.features is None:
                raise ContractError(f"view {i} has no features and no feature_fn was given")
            if len(view.features) != cfg.num_layers:
                raise ContractError(
                    f"view {i} carries {len(view.features)} feature layers, "
                    f"config expects {cfg.num_layers}")
    else:
        for i, view in enumerate(views):
            if view.image is None:
                raise ContractError(f"feature_fn needs an image for view {i}")
    if cfg.variance_source == "redraw" and feature_fn is None:
        raise ContractError(
            "variance_source='redraw' only makes sense with a feature_fn; "
            "fixed features cannot respond to a second augmentation draw")


def _layer_stack(view: DcwView, raw_layers, cfg: DcwConfig, index: int):
    """Validate one view's per-layer features against its depth map."""
    h, w = view.depth.depth.shape
    layers = []
    for l, feat in enumerate(raw_layers):
        flat, (c, fh, fw) = _flat_features(feat)
        if (fh, fw) != (h, w):
            raise DimensionError(
                f"view {index} layer {l + 1} features are {fh}x{fw}, depth is {h}x{w}")
        if c < 2:
            raise ContractError("clustered whitening needs at least 2 feature channels")
        layers.append((flat, c))
    return layers


def compute_dcw_pipeline(ref: DcwView, srcs: Sequence[DcwView], cfg: DcwConfig,
                         feature_fn: Callable | None = None) -> DcwResult:
    """Run the full clustering-guided whitening procedure.

    Fuses all views' depth points, k-means-clusters them (seeded from the
    config), projects labels back per view, and for every (source pair,
    layer, cluster) computes the two direction covariances, their variance
    matrix, the adaptive threshold and mask, and the masked loss.

    Photometric augmentation: each image gets one factor draw from a stream
    seeded by (config seed, view index).  When ``feature_fn`` is given it is
    called on each augmented image to produce that view's per-layer feature
    maps (pre-standardized by the caller's function); otherwise the features
    stored on the views are used as given and augmentation only affects the
    returned images.  With ``variance_source='redraw'`` a second draw per
    image produces a second feature set, and the variance matrix compares
    the ref-to-src covariance across draws instead of across directions.

    A cluster with no usable pixels in either direction contributes a zero
    term.  Terms are accumulated in (pair, layer, cluster) order.
    """
    if not srcs:
        raise ContractError("need at least one source view")
    views = [ref, *srcs]
    _check_pipeline_inputs(views, cfg, feature_fn)

    aug_images: list = []
    primary_layers: list = []
    redraw_layers: list = []
    for idx, view in enumerate(views):
        twin = None
        if view.image is not None:
            rng = np.random.default_rng([cfg.seed, idx])
            factors = _draw_factors(cfg, rng)
            augmented = apply_photometric(view.image, *factors)
            if cfg.variance_source == "redraw":
                twin = apply_photometric(view.image, *_draw_factors(cfg, rng))
        else:
            augmented = None
        aug_images.append(augmented)
        if feature_fn is not None:
            primary_layers.append(_layer_stack(view, list(feature_fn(augmented)), cfg, idx))
            if cfg.variance_source == "redraw":
                redraw_layers.append(_layer_stack(view, list(feature_fn(twin)), cfg, idx))
        else:
            primary_layers.append(_layer_stack(view, list(view.features), cfg, idx))

    channel_counts = {tuple(c for _, c in layers) for layers in primary_layers}
    if len(channel_counts) != 1:
        raise DimensionError("all views must agree on per-layer channel counts")
    if len({len(layers) for layers in primary_layers}) != 1 or \
            len(primary_layers[0]) != cfg.num_layers:
        raise ContractError(f"every view must provide {cfg.num_layers} feature layers")

    cloud = fuse_views((ref.depth, ref.camera), [(s.depth, s.camera) for s in srcs])
    labels, _ = kmeans(cloud.points, cfg.k_clusters, cfg.seed)
    cloud.label = labels
    dims = [(v.depth.height, v.depth.width) for v in views]
    maps = split_and_project(cloud, dims)

    terms: list[DcwTerm] = []
    total = Tensor(0.0)
    for n, src in enumerate(srcs, start=1):
        ref_hw = dims[0]
        src_hw = dims[n]
        grid_to_src, ok_to_src = warp_grid(ref.camera, src.camera, src.depth, ref_hw)
        grid_to_ref, ok_to_ref = warp_grid(src.camera, ref.camera, ref.depth, src_hw)
        for layer in range(cfg.num_layers):
            ref_flat, _ = primary_layers[0][layer]
            src_flat, _ = primary_layers[n][layer]
            for k in range(cfg.k_clusters):
                term = _single_term(
                    n, layer + 1, k, cfg,
                    ref_flat, src_flat, maps[0], maps[n], ref_hw, src_hw,
                    grid_to_src, ok_to_src, grid_to_ref, ok_to_ref,
                    redraw=(redraw_layers[0][layer][0], redraw_layers[n][layer][0])
                    if redraw_layers else None)
                terms.append(term)
                total = tt.add(total, term.loss)
    return DcwResult(terms=tuple(terms), dcw_sum=total, augmented_images=tuple(aug_images))


def _masked_flat(flat, member: np.ndarray):
    """Zero the columns of flat (C, N) features outside the member mask."""
    c = flat.shape[0]
    cols = np.broadcast_to(member.reshape(1, -1), (c, member.size)).astype(np.float64)
    return tt.mul(tt.as_tensor(flat), Tensor(cols))


def _single_term(n: int, layer: int, k: int, cfg: DcwConfig,
                 ref_flat, src_flat, ref_map: ClusterMap, src_map: ClusterMap,
                 ref_hw, src_hw, grid_to_src, ok_to_src, grid_to_ref, ok_to_ref,
                 redraw=None) -> DcwTerm:
    """One (pair, layer, cluster) loss term."""

    def direction(feat_from, from_hw, from_map, feat_to, to_map, grid, ok, name):
        member_from = (from_map.label == k)
        masked_from = _masked_flat(feat_from, member_from)
        coords = grid[ok]
        positions = np.flatnonzero(ok)
        out_size = ok.size
        warped = bilinear_gather(masked_from, from_hw, coords, positions, out_size)
        member_to = (to_map.label == k)
        vv, uu = np.nonzero(member_to)
        pixels = np.stack([uu, vv], axis=1)
        masked_to = _masked_flat(feat_to, member_to)
        return cross_view_covariance(masked_to, warped, ok, pixels,
                                     normalize_by_count=cfg.normalize_by_count,
                                     label=k, direction=name)

    sigma_r2s = direction(ref_flat, ref_hw, ref_map, src_flat, src_map,
                          grid_to_src, ok_to_src, REF_TO_SRC)
    sigma_s2r = direction(src_flat, src_hw, src_map, ref_flat, ref_map,
                          grid_to_ref, ok_to_ref, SRC_TO_REF)
    dir_count = int(sigma_r2s.valid_count > 0) + int(sigma_s2r.valid_count > 0)
    valid_total = sigma_r2s.valid_count + sigma_s2r.valid_count
    if sigma_r2s.valid_count == 0 or sigma_s2r.valid_count == 0:
        return DcwTerm(pair=n, layer=layer, cluster=k, direction_count=dir_count,
                       valid_count=valid_total, loss=Tensor(0.0))

    if redraw is None:
        variance = variance_matrix(sigma_r2s, sigma_s2r)
    else:
        ref2_flat, src2_flat = redraw
        sigma_r2s_again = direction(ref2_flat, ref_hw, ref_map, src2_flat, src_map,
                                    grid_to_src, ok_to_src, REF_TO_SRC)
        variance = variance_matrix(sigma_r2s, sigma_r2s_again)
    tau = adaptive_threshold(variance, seed=cfg.seed)
    mask = selection_mask(variance, tau)
    loss = dcw_loss(sigma_r2s, sigma_s2r, mask, cfg.epsilon)
    return DcwTerm(pair=n, layer=layer, cluster=k, direction_count=dir_count,
                   valid_count=valid_total, loss=loss)
