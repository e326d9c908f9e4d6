"""Depth-clustering-guided feature whitening for multi-view stereo.

Library layout:

- ``tensor``: minimal reverse-mode autodiff with finite-difference checks
- ``whitening``: covariance, ZCA whitening, whitening loss, standardization
- ``geometry``: pinhole cameras, depth maps, differentiable warping
- ``clustering``: seeded k-means over fused multi-view point clouds
- ``dcw``: the clustering-guided cross-view whitening loss
- ``eval3d``: point-cloud scoring, depth fusion, mesh sampling, MMD
- ``formats``: PFM / PLY / camera text / tensor / netpbm files
- ``cli``: command-line tools over all of the above
"""

from .clustering import ClusterMap, LabeledCloud, fuse_views, kmeans, split_and_project
from .dcw import (
    DcwConfig,
    DcwResult,
    DcwTerm,
    DcwView,
    apply_photometric,
    compute_dcw_pipeline,
    overall_loss,
    photometric_augment,
)
from .errors import (
    ContractError,
    DimensionError,
    MvsWhitenError,
    NumericalError,
    ParseError,
    ValidationError,
)
from .eval3d import (
    PointCloud,
    ScoreReport,
    SpatialIndex,
    chamfer_components,
    dtu_scores,
    fuse_depthmaps,
    mmd_rbf,
    precision_recall_fscore,
    sample_mesh,
)
from .geometry import Camera, DepthMap, FeatureMap, project, unproject, warp_grid
from .tensor import Tape, Tensor, finite_diff_check
from .whitening import covariance, instance_standardize, whitening_loss, zca_whiten

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "ClusterMap",
    "ContractError",
    "DcwConfig",
    "DcwResult",
    "DcwTerm",
    "DcwView",
    "DepthMap",
    "DimensionError",
    "FeatureMap",
    "LabeledCloud",
    "MvsWhitenError",
    "NumericalError",
    "ParseError",
    "PointCloud",
    "ScoreReport",
    "SpatialIndex",
    "Tape",
    "Tensor",
    "ValidationError",
    "apply_photometric",
    "chamfer_components",
    "compute_dcw_pipeline",
    "covariance",
    "dtu_scores",
    "finite_diff_check",
    "fuse_depthmaps",
    "fuse_views",
    "instance_standardize",
    "kmeans",
    "mmd_rbf",
    "overall_loss",
    "photometric_augment",
    "precision_recall_fscore",
    "project",
    "sample_mesh",
    "split_and_project",
    "unproject",
    "warp_grid",
    "whitening_loss",
    "zca_whiten",
]
