"""Synthetic three-view problems with exact ground truth, the gaussian
noise protocol, error metrics and brute-force oracles used by the tests.

A problem is built by slicing three overlapping views out of one base
cloud (cut positions tuned by bisection until the measured pairwise
overlaps hit their targets), drawing random poses for views 2 and 3, and
storing each view mis-positioned by its inverse pose. The ground-truth
pairwise transforms then satisfy the loop constraint by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry
from .pointcloud import (NNResult, PointCloud, adaptive_threshold, apply_transform,
                         load_ply, save_ply)

OVERLAP_TOL = 0.05


class OverlapError(RuntimeError):
    """Requested pairwise overlaps could not be produced by slicing."""

    def __init__(self, requested, achieved):
        super().__init__(
            f"could not reach requested overlaps {tuple(requested)}; "
            f"achieved {tuple(round(a, 3) for a in achieved)}"
        )
        self.requested = tuple(requested)
        self.achieved = tuple(achieved)


@dataclass
class SyntheticProblem:
    """Three unregistered clouds plus the exact transforms that realign them."""

    clouds: tuple                  # stored (mis-positioned, possibly noisy) clouds
    ground_truth: list             # T12, T23, T31
    overlaps: tuple                # requested pairwise overlap ratios
    achieved_overlaps: tuple       # measured on the noiseless aligned views
    sigma: float
    seed: int


def make_base_cloud(n_points: int = 2000, seed: int = 0) -> PointCloud:
    """Structured, asymmetric test surface: jittered grid over the unit
    square with a bumpy height field. No rotational or mirror symmetry,
    so registration has a unique optimum."""
    rng = np.random.default_rng(seed)
    side = int(round(math.sqrt(n_points)))
    xs, ys = np.meshgrid(np.linspace(-1.0, 1.0, side), np.linspace(-1.0, 1.0, side))
    xy = np.column_stack([xs.ravel(), ys.ravel()])
    if xy.shape[0] < n_points:
        xy = np.vstack([xy, rng.uniform(-1.0, 1.0, (n_points - xy.shape[0], 2))])
    xy = xy[:n_points] + rng.normal(0.0, 0.35 / side, (n_points, 2))
    x, y = xy[:, 0], xy[:, 1]
    z = (0.30 * np.sin(2.3 * x + 0.4) * np.cos(1.6 * y - 0.2)
         + 0.18 * np.sin(3.1 * x * y + 0.9)
         + 0.12 * np.cos(2.9 * x - 1.7 * y)
         + 0.25 * np.exp(-8.0 * ((x - 0.45) ** 2 + (y + 0.3) ** 2)))
    return PointCloud(np.column_stack([x, y, z]))


def measured_overlap(source: PointCloud, target: PointCloud, epsilon: float) -> float:
    """Fraction of source points with a target neighbour strictly within
    ``epsilon`` (both clouds already in a common frame)."""
    dist, _ = target.tree.query(source.points, distance_upper_bound=epsilon)
    return float(np.count_nonzero(dist < epsilon)) / len(source)


def _bisect_monotone(f, target, low, high, increasing, steps=28):
    """Cut position in [low, high] where the monotone f crosses target."""
    for _ in range(steps):
        mid = 0.5 * (low + high)
        if (f(mid) < target) == increasing:
            low = mid
        else:
            high = mid
    return 0.5 * (low + high)


def _slice_views(base: PointCloud, overlaps, epsilon: float):
    """Three half-space views of the base: V1 keeps low x, V2 keeps high x,
    V3 keeps high y. Cuts start at the independence approximation and are
    refined by bisection on the measured overlaps (the three measures are
    coupled, so a few refinement rounds run over all cuts)."""
    o12, o23, o31 = overlaps
    pts = base.points
    x, y = pts[:, 0], pts[:, 1]
    x_lo, x_hi = float(x.min()), float(x.max())
    y_lo, y_hi = float(y.min()), float(y.max())

    def view1(a):
        sel = pts[x <= a]
        return PointCloud(sel) if sel.shape[0] else None

    def view2(b):
        sel = pts[x >= b]
        return PointCloud(sel) if sel.shape[0] else None

    def view3(c):
        sel = pts[y >= c]
        return PointCloud(sel) if sel.shape[0] else None

    def safe_overlap(src, tgt):
        if src is None or tgt is None:
            return 0.0
        return measured_overlap(src, tgt, epsilon)

    a = float(np.quantile(x, min(0.999, o31)))
    c = float(np.quantile(y, max(0.001, 1.0 - o23)))
    b = float(np.quantile(x, min(0.999, o31 * (1.0 - o12))))

    for _ in range(4):
        v3 = view3(c)
        # overlap(V3 -> V1) grows as the V1 cut moves right.
        a = _bisect_monotone(lambda v: safe_overlap(v3, view1(v)), o31,
                             x_lo, x_hi, increasing=True)
        v2 = view2(b)
        # overlap(V2 -> V3) shrinks as the V3 cut moves up.
        c = _bisect_monotone(lambda v: safe_overlap(v2, view3(v)), o23,
                             y_lo, y_hi, increasing=False)
        v1 = view1(a)
        # overlap(V1 -> V2) shrinks as the V2 cut moves right.
        b = _bisect_monotone(lambda v: safe_overlap(v1, view2(v)), o12,
                             x_lo, x_hi, increasing=False)

    views = (view1(a), view2(b), view3(c))
    if any(v is None for v in views):
        raise OverlapError(overlaps, (0.0, 0.0, 0.0))
    achieved = (
        measured_overlap(views[0], views[1], epsilon),
        measured_overlap(views[1], views[2], epsilon),
        measured_overlap(views[2], views[0], epsilon),
    )
    return views, achieved


def add_noise(cloud: PointCloud, sigma: float, seed) -> PointCloud:
    """Gaussian perturbation in normalised coordinates: scale the cloud to
    [-1, 1] by its max absolute coordinate, add zero-mean noise with the
    given deviation, then restore the original scale."""
    if sigma < 0.0:
        raise ValueError("noise deviation must be nonnegative")
    if sigma == 0.0:
        return cloud
    rng = np.random.default_rng(seed)
    scale = float(np.abs(cloud.points).max())
    noise = rng.normal(0.0, sigma, cloud.points.shape)
    return PointCloud(cloud.points + scale * noise)


def generate(base: PointCloud, overlaps, sigma: float, seed: int,
             full_range: bool = False) -> SyntheticProblem:
    """Build a three-view problem from a base cloud.

    Views are sliced to hit the requested pairwise overlaps (measured as
    the fraction of source points with an aligned target neighbour within
    the adaptive threshold, tolerance +/- 5 points). Poses for views 2
    and 3 draw angles from [-pi/2, pi/2] per axis (full range behind the
    flag) and translations from [-shift/4, shift/4]; view 1 anchors the
    reference frame. Each stored cloud is the view moved by its inverse
    pose, so the ground-truth pairwise transforms close the loop exactly.
    """
    overlaps = tuple(float(v) for v in overlaps)
    if len(overlaps) != 3 or not all(0.0 < v <= 1.0 for v in overlaps):
        raise ValueError("three pairwise overlap ratios in (0, 1] required")
    rng = np.random.default_rng(seed)

    eps_base = adaptive_threshold(base, base, base)
    views, achieved = _slice_views(base, overlaps, eps_base)
    eps = adaptive_threshold(*views)
    achieved = (
        measured_overlap(views[0], views[1], eps),
        measured_overlap(views[1], views[2], eps),
        measured_overlap(views[2], views[0], eps),
    )
    if any(abs(a - o) > OVERLAP_TOL for a, o in zip(achieved, overlaps)):
        raise OverlapError(overlaps, achieved)

    shift = max(float(v.bbox_edges().max()) for v in views)
    angle_range = math.pi if full_range else math.pi / 2.0
    poses = [np.eye(4)]
    for _ in (2, 3):
        angles = rng.uniform(-angle_range, angle_range, 3)
        trans = rng.uniform(-0.25 * shift, 0.25 * shift, 3)
        poses.append(geometry.pose_to_transform(np.concatenate([angles, trans])))

    # T_ij maps stored cloud i into stored cloud j's frame: G_j^-1 @ G_i.
    t12 = geometry.compose(geometry.invert(poses[1]), poses[0])
    t23 = geometry.compose(geometry.invert(poses[2]), poses[1])
    t31 = geometry.compose(geometry.invert(poses[0]), poses[2])

    stored = []
    for i, view in enumerate(views):
        cloud = apply_transform(view, geometry.invert(poses[i]))
        if sigma > 0.0:
            cloud = add_noise(cloud, sigma, seed=[seed, i])
        stored.append(cloud)

    return SyntheticProblem(clouds=tuple(stored), ground_truth=[t12, t23, t31],
                            overlaps=overlaps, achieved_overlaps=achieved,
                            sigma=float(sigma), seed=int(seed))


@dataclass
class Metrics:
    err_r: float
    err_t: float
    loop_residual: float

    @property
    def err_r_x1000(self) -> float:
        return 1000.0 * self.err_r

    @property
    def err_t_x1000(self) -> float:
        return 1000.0 * self.err_t


def evaluate(transforms, problem: SyntheticProblem) -> Metrics:
    """Rotation/translation errors of estimated transforms against the
    problem's ground truth, plus their loop residual."""
    est = [np.asarray(t, dtype=float) for t in transforms]
    return Metrics(
        err_r=geometry.rotation_error(est, problem.ground_truth),
        err_t=geometry.translation_error(est, problem.ground_truth),
        loop_residual=geometry.loop_residual(*est),
    )


# ---------------------------------------------------------------------------
# Brute-force oracles (independent of the KD-tree code paths)

def brute_force_nn(cloud: PointCloud, query) -> NNResult:
    """Exhaustive linear-scan nearest neighbour, ties to the lowest index."""
    q = np.asarray(query, dtype=float).reshape(3)
    diff = cloud.points - q
    dist = np.sqrt((diff * diff).sum(axis=1))
    idx = int(np.argmin(dist))
    return NNResult(idx, float(dist[idx]))


def brute_force_consensus(source: PointCloud, target: PointCloud,
                          transform, epsilon: float) -> float:
    """Exhaustive bidirectional consensus loss over all point pairs."""
    t = np.asarray(transform, dtype=float)
    fwd = geometry.transform_points(source.points, t)
    bwd = geometry.transform_points(target.points, geometry.invert(t))
    outliers = 0
    for p in fwd:
        d = np.sqrt(((target.points - p) ** 2).sum(axis=1)).min()
        if not d < epsilon:
            outliers += 1
    for q in bwd:
        d = np.sqrt(((source.points - q) ** 2).sum(axis=1)).min()
        if not d < epsilon:
            outliers += 1
    return outliers / float(len(source) + len(target))


def brute_force_mean_nn(cloud: PointCloud) -> float:
    """Exhaustive mean nearest-other-point distance."""
    pts = cloud.points
    total = 0.0
    for i, p in enumerate(pts):
        d = np.sqrt(((pts - p) ** 2).sum(axis=1))
        d[i] = np.inf
        total += d.min()
    return total / len(cloud)


def brute_force_aiding(source: PointCloud, target: PointCloud,
                       transform, epsilon: float) -> float:
    """Exhaustive trimmed one-directional MSE."""
    fwd = geometry.transform_points(source.points, transform)
    dists = []
    for p in fwd:
        dists.append(np.sqrt(((target.points - p) ** 2).sum(axis=1)).min())
    dists.sort()
    keep = math.ceil(0.5 * len(source))
    kept = np.asarray(dists[:keep])
    return float(np.mean(kept * kept)) / (epsilon * epsilon)


# ---------------------------------------------------------------------------
# Problem serialization: three PLY files plus a key=value manifest

MANIFEST_NAME = "problem.txt"
CLOUD_NAMES = ("cloud1.ply", "cloud2.ply", "cloud3.ply")


def _fmt(values) -> str:
    return " ".join(f"{float(v):.17g}" for v in np.asarray(values).ravel())


def save_problem(problem: SyntheticProblem, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, cloud in zip(CLOUD_NAMES, problem.clouds):
        save_ply(cloud, directory / name)
    lines = [
        f"seed={problem.seed}",
        f"sigma={problem.sigma:.17g}",
        f"overlaps={_fmt(problem.overlaps)}",
        f"achieved_overlaps={_fmt(problem.achieved_overlaps)}",
        f"t12={_fmt(problem.ground_truth[0])}",
        f"t23={_fmt(problem.ground_truth[1])}",
        f"t31={_fmt(problem.ground_truth[2])}",
    ]
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="ascii")


def parse_manifest(path) -> dict:
    """Read a problem manifest into a dict; matrices come back as 4x4 arrays."""
    entries = {}
    for raw in Path(path).read_text(encoding="ascii").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"malformed manifest line: {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    out = {}
    if "seed" in entries:
        out["seed"] = int(entries["seed"])
    if "sigma" in entries:
        out["sigma"] = float(entries["sigma"])
    for key in ("overlaps", "achieved_overlaps"):
        if key in entries:
            out[key] = tuple(float(v) for v in entries[key].split())
    for key in ("t12", "t23", "t31"):
        if key not in entries:
            raise ValueError(f"manifest {path} lacks required key {key!r}")
        values = [float(v) for v in entries[key].split()]
        if len(values) != 16:
            raise ValueError(f"manifest key {key!r} must hold 16 row-major values")
        out[key] = np.array(values).reshape(4, 4)
    return out


def load_problem(directory) -> SyntheticProblem:
    directory = Path(directory)
    manifest = parse_manifest(directory / MANIFEST_NAME)
    clouds = tuple(load_ply(directory / name) for name in CLOUD_NAMES)
    return SyntheticProblem(
        clouds=clouds,
        ground_truth=[manifest["t12"], manifest["t23"], manifest["t31"]],
        overlaps=manifest.get("overlaps", (0.0, 0.0, 0.0)),
        achieved_overlaps=manifest.get("achieved_overlaps", (0.0, 0.0, 0.0)),
        sigma=manifest.get("sigma", 0.0),
        seed=manifest.get("seed", 0),
    )
