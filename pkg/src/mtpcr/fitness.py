"""Cost functions for the six search tasks.

Original tasks minimise a bidirectional consensus loss (fraction of
points without an inlier match, counted in both directions) plus an
alpha-weighted tanh of the loop-closure residual. Aiding tasks minimise
a coarse trimmed mean of squared one-directional closest-point
distances, which is cheap, smooth and has its optimum near the consensus
optimum.

Batch variants evaluate many candidates with a single KD-tree query;
per-candidate arithmetic is identical to the scalar functions, so scalar
and batch results agree bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from .pointcloud import PointCloud, resolve_workers


@dataclass(frozen=True)
class FitnessContext:
    """Everything needed to score one original task's candidates.

    ``task_index`` names the loop slot the candidate occupies (1 -> T12,
    2 -> T23, 3 -> T31); ``peer_bests`` are the best transforms of the
    other two original tasks in cyclic order (j+1, j+2). They must stay
    fixed while one batch is evaluated.
    """

    source: PointCloud
    target: PointCloud
    epsilon: float
    alpha: float
    task_index: int = 1
    peer_bests: tuple = (None, None)

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError("inlier threshold must be positive")
        if self.alpha < 0.0:
            raise ValueError("loop weight must be nonnegative")
        if self.task_index not in (1, 2, 3):
            raise ValueError("task index must be 1, 2 or 3")


def _outlier_count(tree, points, epsilon: float) -> int:
    """Number of query points whose nearest neighbour is not strictly
    within ``epsilon``. The bounded query returns inf for them, which
    compares false under ``< epsilon`` just like a full query would."""
    dist, _ = tree.query(points, distance_upper_bound=epsilon, workers=resolve_workers())
    return int(points.shape[0] - np.count_nonzero(dist < epsilon))


def consensus_loss_many(source: PointCloud, target: PointCloud,
                        transforms, epsilon: float) -> np.ndarray:
    """Bidirectional consensus loss for a batch of transforms."""
    if epsilon <= 0.0:
        raise ValueError("inlier threshold must be positive")
    transforms = [np.asarray(t, dtype=float) for t in transforms]
    m = len(transforms)
    if m == 0:
        return np.empty(0)
    np_pts, nq_pts = len(source), len(target)
    fwd = np.concatenate([geometry.transform_points(source.points, t) for t in transforms])
    bwd = np.concatenate(
        [geometry.transform_points(target.points, geometry.invert(t)) for t in transforms]
    )
    workers = resolve_workers()
    dist_f, _ = target.tree.query(fwd, distance_upper_bound=epsilon, workers=workers)
    dist_b, _ = source.tree.query(bwd, distance_upper_bound=epsilon, workers=workers)
    in_f = (dist_f < epsilon).reshape(m, np_pts).sum(axis=1)
    in_b = (dist_b < epsilon).reshape(m, nq_pts).sum(axis=1)
    out = (np_pts - in_f) + (nq_pts - in_b)
    return out / float(np_pts + nq_pts)


def consensus_loss(source: PointCloud, target: PointCloud,
                   transform, epsilon: float) -> float:
    """Fraction of points, both directions pooled, whose closest-point
    distance is >= epsilon after applying ``transform`` (or its inverse).
    0 means every match is an inlier; 1 means none is."""
    return float(consensus_loss_many(source, target, [transform], epsilon)[0])


def aiding_fitness_many(source: PointCloud, target: PointCloud,
                        transforms, epsilon: float) -> np.ndarray:
    """Trimmed one-directional MSE for a batch of transforms."""
    if epsilon <= 0.0:
        raise ValueError("inlier threshold must be positive")
    transforms = [np.asarray(t, dtype=float) for t in transforms]
    m = len(transforms)
    if m == 0:
        return np.empty(0)
    n_src = len(source)
    keep = math.ceil(0.5 * n_src)
    fwd = np.concatenate([geometry.transform_points(source.points, t) for t in transforms])
    dist, _ = target.tree.query(fwd, workers=resolve_workers())
    dist = dist.reshape(m, n_src)
    out = np.empty(m)
    for i in range(m):
        smallest = np.sort(dist[i])[:keep]
        out[i] = float(np.mean(smallest * smallest)) / (epsilon * epsilon)
    return out


def aiding_fitness(source: PointCloud, target: PointCloud,
                   transform, epsilon: float) -> float:
    """Mean of the squared smallest half of closest-point distances from
    the transformed source into the target, normalised by epsilon^2."""
    return float(aiding_fitness_many(source, target, [transform], epsilon)[0])


def _loop_term(ctx: FitnessContext, transform: np.ndarray) -> float:
    peer_a, peer_b = ctx.peer_bests
    t12, t23, t31 = geometry.loop_slots(ctx.task_index, transform, peer_a, peer_b)
    return ctx.alpha * math.tanh(geometry.loop_residual(t12, t23, t31))


def original_fitness_many(ctx: FitnessContext, poses) -> np.ndarray:
    """Consensus loss plus loop penalty for a batch of genomes."""
    poses = np.atleast_2d(np.asarray(poses, dtype=float))
    transforms = [geometry.pose_to_transform(p) for p in poses]
    costs = consensus_loss_many(ctx.source, ctx.target, transforms, ctx.epsilon)
    if ctx.alpha > 0.0:
        costs = costs + np.array([_loop_term(ctx, t) for t in transforms])
    return costs


def original_fitness(ctx: FitnessContext, pose) -> float:
    """Cost of one genome on an original task: consensus loss of the
    decoded transform plus alpha * tanh(loop residual) with the candidate
    in its own loop slot and the peer bests in theirs."""
    return float(original_fitness_many(ctx, np.asarray(pose, dtype=float).reshape(1, -1))[0])
