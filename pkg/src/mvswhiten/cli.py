"""Command-line tools: evaluation, clustering, loss tables, fusion, checks.

Exit codes: 0 success, 1 parse or validation error (message on stderr),
2 numerical failure (NaN reached a result), 3 gradient check failure.
All outputs are deterministic given flags and seeds.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import tensor as tt
from .clustering import fuse_views, kmeans, split_and_project
from .dcw import (
    REF_TO_SRC,
    SRC_TO_REF,
    ClusterCov,
    DcwConfig,
    DcwView,
    SelectionMask,
    compute_dcw_pipeline,
    dcw_loss,
)
from .errors import ContractError, MvsWhitenError, NumericalError
from .eval3d import (
    ScoreReport,
    dtu_scores,
    fuse_depthmaps,
    mmd_rbf,
    precision_recall_fscore,
    sample_mesh,
)
from .formats import (
    atomic_write_bytes,
    read_cam,
    read_image,
    read_pfm,
    read_ply,
    read_ply_mesh,
    read_tensor,
    write_cluster_map,
    write_ply,
)
from .geometry import bilinear_gather
from .tensor import Tensor, finite_diff_check
from .whitening import whitening_loss

_CONFIG_KEYS = {
    "k_clusters": "k_clusters",
    "epsilon": "epsilon",
    "lambda": "lam",
    "lam": "lam",
    "num_layers": "num_layers",
    "layers": "num_layers",
    "jitter_brightness": "jitter_brightness",
    "jitter_contrast": "jitter_contrast",
    "jitter_saturation": "jitter_saturation",
    "gamma_range": "gamma_range",
    "normalize_by_count": "normalize_by_count",
    "variance_source": "variance_source",
    "seed": "seed",
}


def load_config(path) -> DcwConfig:
    """Flat key-value TOML holding DcwConfig fields; omitted keys keep defaults."""
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as handle:
        try:
            raw = tomllib.load(handle)
        except tomllib.TOMLDecodeError as exc:
            raise ContractError(f"bad config file {path}: {exc}") from None
    kwargs = {}
    for key, value in raw.items():
        if key not in _CONFIG_KEYS:
            known = ", ".join(sorted(set(_CONFIG_KEYS)))
            raise ContractError(f"unknown config key {key!r} (known: {known})")
        if key == "gamma_range":
            value = tuple(value)
        kwargs[_CONFIG_KEYS[key]] = value
    return DcwConfig(**kwargs)


# --- scene directories --------------------------------------------------------

def _scene_ids(scene: Path) -> list[str]:
    cam_dir = scene / "cams"
    names = sorted(p.name for p in cam_dir.glob("*_cam.txt"))
    if not names:
        raise ContractError(f"no *_cam.txt files under {cam_dir}")
    return [name[: -len("_cam.txt")] for name in names]


def _load_depth_views(scene: Path):
    views = []
    for vid in _scene_ids(scene):
        camera = read_cam(scene / "cams" / f"{vid}_cam.txt").camera
        depth = read_pfm(scene / "depths" / f"{vid}.pfm")
        views.append((depth, camera))
    return views


def _load_dcw_views(scene: Path, num_layers: int) -> list[DcwView]:
    views = []
    for vid in _scene_ids(scene):
        camera = read_cam(scene / "cams" / f"{vid}_cam.txt").camera
        depth = read_pfm(scene / "depths" / f"{vid}.pfm")
        features = [read_tensor(scene / f"feats_layer{layer}" / f"{vid}.rmvt")
                    for layer in range(1, num_layers + 1)]
        image_path = scene / "images" / f"{vid}.ppm"
        image = read_image(image_path) if image_path.exists() else None
        views.append(DcwView(depth=depth, camera=camera,
                             features=features, image=image))
    return views


# --- subcommands ---------------------------------------------------------------

def _cmd_eval(args) -> int:
    gt = read_ply(args.gt)
    recon = read_ply(args.recon)
    if args.mode == "tt":
        report = precision_recall_fscore(gt, recon, args.threshold,
                                         metric=args.metric)
    else:
        acc, comp, overall = dtu_scores(gt, recon, max_dist=args.threshold)
        report = ScoreReport(acc=acc, comp=comp, overall=overall)
    text = report.to_text()
    if any(math.isnan(v) for v in report.to_dict().values()):
        raise NumericalError("evaluation produced NaN")
    print(text)
    if args.json is not None:
        atomic_write_bytes(args.json, (report.to_json() + "\n").encode("ascii"))
    return 0


def _cmd_cluster(args) -> int:
    if len(args.src_depth) != len(args.src_cam):
        raise ContractError(
            f"{len(args.src_depth)} source depths but {len(args.src_cam)} cameras")
    ref = (read_pfm(args.ref_depth), read_cam(args.ref_cam).camera)
    srcs = [(read_pfm(d), read_cam(c).camera)
            for d, c in zip(args.src_depth, args.src_cam)]
    cloud = fuse_views(ref, srcs)
    labels, centroids = kmeans(cloud.points, args.k, args.seed)
    cloud.label = labels
    dims = [ref[0].depth.shape] + [d.depth.shape for d, _ in srcs]
    maps = split_and_project(cloud, dims)
    for i, cluster_map in enumerate(maps):
        write_cluster_map(f"{args.out_prefix}_view{i}.pgm", cluster_map)
    rows = ["cluster,x,y,z"]
    rows += [f"{i},{x!r},{y!r},{z!r}"
             for i, (x, y, z) in enumerate(centroids.tolist())]
    atomic_write_bytes(f"{args.out_prefix}_centroids.csv",
                       ("\n".join(rows) + "\n").encode("ascii"))
    print(f"wrote {len(maps)} cluster maps and {centroids.shape[0]} centroids")
    return 0


def _cmd_dcw(args) -> int:
    cfg = load_config(args.config)
    views = _load_dcw_views(Path(args.scene), cfg.num_layers)
    if len(views) < 2:
        raise ContractError("scene needs a reference view and at least one source")
    result = compute_dcw_pipeline(views[0], views[1:], cfg)
    total = result.dcw_sum.item()
    if math.isnan(total):
        raise NumericalError("loss table produced NaN")
    rows = ["pair,layer,cluster,direction_count,valid_count,loss"]
    rows += [f"{t.pair},{t.layer},{t.cluster},{t.direction_count},"
             f"{t.valid_count},{t.loss.item()!r}" for t in result.terms]
    rows.append(f"total,,,,,{total!r}")
    atomic_write_bytes(args.out, ("\n".join(rows) + "\n").encode("ascii"))
    print(f"dcw_sum {total!r}")
    return 0


def _cmd_fuse(args) -> int:
    views = _load_depth_views(Path(args.scene))
    cloud = fuse_depthmaps(views, geo_px_thresh=args.px_thresh,
                           geo_depth_thresh=args.depth_thresh,
                           min_views=args.min_views)
    write_ply(args.out, cloud, binary=not args.ascii)
    print(f"fused {len(cloud)} points")
    return 0


def _cmd_sample_mesh(args) -> int:
    vertices, triangles = read_ply_mesh(args.mesh)
    cloud = sample_mesh(vertices, triangles, args.n, seed=args.seed)
    write_ply(args.out, cloud, binary=not args.ascii)
    print(f"sampled {len(cloud)} points")
    return 0


def _cmd_mmd(args) -> int:
    x = read_tensor(args.x)
    y = read_tensor(args.y)
    if x.ndim != 2 or y.ndim != 2:
        raise ContractError(
            f"mmd needs rank-2 tensors, got ranks {x.ndim} and {y.ndim}")
    bandwidth = None
    if args.bandwidth != "auto":
        try:
            bandwidth = float(args.bandwidth)
        except ValueError:
            raise ContractError(
                f"bandwidth must be 'auto' or a number, got {args.bandwidth!r}"
            ) from None
    value = mmd_rbf(x, y, bandwidth=bandwidth)
    if math.isnan(value):
        raise NumericalError("mmd produced NaN")
    print(repr(value))
    return 0


# --- gradient-check battery ----------------------------------------------------

def _gradcheck_cases(seed: int):
    """Named scalar functions with leaves, covering every differentiable op."""
    rng = np.random.default_rng(seed)
    cases = []

    shifted = rng.normal(size=12) + 4.0

    def poly(t):
        return tt.tensor_mean(tt.mul(tt.add(t, 1.5), tt.scale(t, 0.5)))

    cases.append(("add_mul_scale_mean", poly, shifted))

    matrix = rng.normal(size=(5, 4))
    left = rng.normal(size=(3, 5))

    def mat(t):
        prod = tt.matmul(t, Tensor(matrix))
        return tt.tensor_sum(tt.mul(prod, prod))

    cases.append(("matmul_square_sum", mat, left))

    block = rng.normal(size=(4, 6))

    def reshuffle(t):
        back = tt.reshape(tt.transpose(t), (4, 6))
        return tt.tensor_mean(tt.sub(back, 0.25))

    cases.append(("transpose_reshape_mean", reshuffle, block))

    away_from_hinge = np.concatenate([rng.uniform(1.0, 2.0, 6),
                                      rng.uniform(-2.0, -1.0, 6)])

    def hinge(t):
        return tt.tensor_sum(tt.clamp_min(t, 0.0))

    cases.append(("clamp_min_sum", hinge, away_from_hinge))

    positive = rng.uniform(0.5, 3.0, 10)

    def magnitude(t):
        return tt.tensor_mean(tt.tensor_abs(tt.sub(t, 0.2)))

    cases.append(("abs_mean", magnitude, positive))

    grid_values = rng.normal(size=(2, 12))
    coords = np.array([[0.4, 0.7], [2.3, 1.6], [1.1, 0.2]])
    out_positions = np.array([0, 1, 2])

    def gather(t):
        got = bilinear_gather(t, (3, 4), coords, out_positions, 3)
        return tt.tensor_sum(got)

    cases.append(("bilinear_gather_sum", gather, grid_values))

    feats = rng.normal(size=(3, 24))

    def whiten(t):
        return whitening_loss(t)

    cases.append(("whitening_loss", whiten, feats))

    other = rng.normal(size=(3, 20))
    mask_bools = np.zeros((3, 3), dtype=bool)
    mask_bools[0, 1] = mask_bools[0, 2] = True
    mask = SelectionMask(mask_bools, tau=0.0)
    partner = rng.normal(size=(3, 20))

    def masked_loss(t):
        forward = tt.matmul(t, tt.transpose(Tensor(other)))
        backward = tt.matmul(Tensor(partner), tt.transpose(t))
        cov_fwd = ClusterCov(label=0, direction=REF_TO_SRC,
                             matrix=tt.scale(forward, 1.0 / 20.0), valid_count=20)
        cov_bwd = ClusterCov(label=0, direction=SRC_TO_REF,
                             matrix=tt.scale(backward, 1.0 / 20.0), valid_count=20)
        return dcw_loss(cov_fwd, cov_bwd, mask, 0.02)

    cases.append(("masked_covariance_loss", masked_loss, rng.normal(size=(3, 20))))

    return cases


def _cmd_gradcheck(args) -> int:
    failures = 0
    for name, fn, x in _gradcheck_cases(args.seed):
        report = finite_diff_check(fn, x)
        verdict = "pass" if report.passed else "FAIL"
        print(f"{name:<26} max_rel_err {report.max_rel_err:.3e}  {verdict}")
        failures += 0 if report.passed else 1
    total = len(_gradcheck_cases(args.seed))
    print(f"gradcheck: {total - failures}/{total} passed")
    return 0 if failures == 0 else 3


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvswhiten",
        description="Depth-clustering-guided whitening tools: evaluation, "
                    "clustering, loss tables, fusion, and self checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="score a reconstruction against ground truth")
    p.add_argument("--gt", required=True, help="ground-truth cloud (.ply)")
    p.add_argument("--recon", required=True, help="reconstructed cloud (.ply)")
    p.add_argument("--threshold", type=float, required=True,
                   help="distance threshold; in dtu mode, the clamp distance")
    p.add_argument("--metric", choices=("euclidean", "squared"),
                   default="euclidean")
    p.add_argument("--mode", choices=("tt", "dtu"), default="tt",
                   help="tt: precision/recall/f-score, dtu: acc/comp/overall")
    p.add_argument("--json", default=None, help="also write the report as JSON")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("cluster", help="fuse views and write cluster label maps")
    p.add_argument("--ref-depth", required=True)
    p.add_argument("--ref-cam", required=True)
    p.add_argument("--src-depth", action="append", default=[])
    p.add_argument("--src-cam", action="append", default=[])
    p.add_argument("-k", type=int, default=8, help="number of clusters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("dcw", help="per-(pair, layer, cluster) loss table")
    p.add_argument("--config", required=True, help="flat TOML config")
    p.add_argument("--scene", required=True,
                   help="directory with cams/, depths/, feats_layer{1..L}/, "
                        "and optional images/")
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=_cmd_dcw)

    p = sub.add_parser("fuse", help="geometry-checked depth-map fusion")
    p.add_argument("--scene", required=True, help="directory with cams/, depths/")
    p.add_argument("--min-views", type=int, default=3)
    p.add_argument("--px-thresh", type=float, default=1.0)
    p.add_argument("--depth-thresh", type=float, default=0.01)
    p.add_argument("--out", required=True, help="output cloud (.ply)")
    p.add_argument("--ascii", action="store_true", help="write ascii PLY")
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("sample-mesh", help="uniform random points on a mesh")
    p.add_argument("--mesh", required=True, help="triangle mesh (.ply)")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output cloud (.ply)")
    p.add_argument("--ascii", action="store_true", help="write ascii PLY")
    p.set_defaults(func=_cmd_sample_mesh)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("mmd", help="kernel two-sample statistic between tensors")
    p.add_argument("--x", required=True, help="first sample set (.rmvt, rank 2)")
    p.add_argument("--y", required=True, help="second sample set (.rmvt, rank 2)")
    p.add_argument("--bandwidth", default="auto",
                   help="'auto' (median heuristic) or a positive number")
    p.set_defaults(func=_cmd_mmd)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MvsWhitenError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
