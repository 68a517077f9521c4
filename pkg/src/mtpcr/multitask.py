"""Co-evolutionary scheduler for three-view registration.

Six populations evolve together: for each view pair j (1: cloud1->cloud2,
2: cloud2->cloud3, 3: cloud3->cloud1) there is an aiding task with a
coarse pairwise cost and an original task with the consensus-plus-loop
cost. Each generation walks the pairs in order, mutates both populations,
probabilistically exchanges mutants within the pair (intra) and injects
the pose implied by the other two original tasks' bests (inter), then
crosses, evaluates and selects.

Reproducibility contract: a single Generator drives the whole run and is
consumed in a fixed order per pair and generation -- aiding mutation,
original mutation, intra gate (then original-selection and
aiding-selection index draws), inter gate (then aiding-selection and
original-selection index draws), aiding SBX rows, original SBX rows.
Fitness evaluation draws nothing, so results do not depend on evaluation
parallelism (MTPCR_THREADS).
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import evolution, fitness, geometry
from .pointcloud import PointCloud, adaptive_threshold, decentralize

log = logging.getLogger(__name__)

TASK_ORDER = ("j1_aiding", "j1_original", "j2_aiding", "j2_original",
              "j3_aiding", "j3_original")


@dataclass(frozen=True)
class TaskId:
    index: int          # view pair, 1..3
    kind: str           # "aiding" | "original"

    def __post_init__(self):
        if self.index not in (1, 2, 3):
            raise ValueError("task index must be 1, 2 or 3")
        if self.kind not in ("aiding", "original"):
            raise ValueError("task kind must be 'aiding' or 'original'")

    @property
    def label(self) -> str:
        return f"j{self.index}_{self.kind}"


@dataclass
class MTConfig:
    """Run parameters. Defaults follow the reference setting: population
    100 per task, 60 generations, sharing probabilities 0.5, archive
    ratio 0.1, DE scale factor 0.5, loop weight 0.05."""

    pop_size: int = 100
    generations: int = 60
    p_intra: float = 0.5
    p_inter: float = 0.5
    top_ratio: float = 0.1
    scale_factor: float = 0.5
    alpha: float = 0.05
    epsilon: float | None = None     # explicit inlier threshold; None -> adaptive
    seed: int = 0

    def validate(self) -> None:
        if self.pop_size < 4:
            raise ValueError("population size must be at least 4")
        if self.generations < 1:
            raise ValueError("generation count must be at least 1")
        if not 0.0 <= self.p_intra <= 1.0 or not 0.0 <= self.p_inter <= 1.0:
            raise ValueError("sharing probabilities must lie in [0, 1]")
        if self.archive_size < 1:
            raise ValueError("top_ratio * pop_size must be at least 1")
        if self.archive_size > self.pop_size:
            raise ValueError("top_ratio must not exceed 1")
        if self.scale_factor <= 0.0:
            raise ValueError("DE scale factor must be positive")
        if self.alpha < 0.0:
            raise ValueError("loop weight must be nonnegative")
        if self.epsilon is not None and self.epsilon <= 0.0:
            raise ValueError("epsilon override must be positive")

    @property
    def archive_size(self) -> int:
        return math.ceil(self.top_ratio * self.pop_size)


@dataclass
class SearchSpace:
    """Genome bounds: angles in [-pi, pi], translations in [-shift, shift]."""

    shift: float

    def __post_init__(self):
        if not self.shift > 0.0:
            raise ValueError("translation bound must be positive")

    @property
    def lower(self) -> np.ndarray:
        return np.array([-math.pi] * 3 + [-self.shift] * 3)

    @property
    def upper(self) -> np.ndarray:
        return np.array([math.pi] * 3 + [self.shift] * 3)

    @property
    def bounds(self):
        return self.lower, self.upper


def build_search_space(c1: PointCloud, c2: PointCloud, c3: PointCloud) -> SearchSpace:
    """Translation bound = largest bounding-box edge over the three clouds."""
    shift = max(float(c.bbox_edges().max()) for c in (c1, c2, c3))
    return SearchSpace(shift=shift)


@dataclass
class RegistrationProblem:
    """Three decentralized clouds plus everything fixed for a run."""

    clouds: tuple          # decentralized clouds, index 0..2
    offsets: tuple         # centroids subtracted from each original cloud
    space: SearchSpace
    epsilon: float
    ground_truth: list | None = None   # original-frame T12, T23, T31

    def pair(self, j: int) -> tuple[PointCloud, PointCloud]:
        """Source and target clouds of view pair j."""
        return self.clouds[j - 1], self.clouds[j % 3]


def prepare_problem(c1: PointCloud, c2: PointCloud, c3: PointCloud,
                    epsilon: float | None = None,
                    ground_truth: list | None = None) -> RegistrationProblem:
    """Decentralize the clouds and fix search bounds and threshold."""
    dec, offsets = zip(*(decentralize(c) for c in (c1, c2, c3)))
    space = build_search_space(*dec)
    eps = epsilon if epsilon is not None else adaptive_threshold(*dec)
    return RegistrationProblem(clouds=tuple(dec), offsets=tuple(offsets),
                               space=space, epsilon=eps, ground_truth=ground_truth)


@dataclass
class TaskState:
    task: TaskId
    population: evolution.Population
    best_transform: np.ndarray | None = None   # cached decode, original tasks

    def refresh_best_transform(self):
        if self.task.kind == "original":
            self.best_transform = geometry.pose_to_transform(self.population.best_genome)


def _aiding_costs(problem: RegistrationProblem, j: int, genomes: np.ndarray) -> np.ndarray:
    source, target = problem.pair(j)
    transforms = [geometry.pose_to_transform(g) for g in np.atleast_2d(genomes)]
    return fitness.aiding_fitness_many(source, target, transforms, problem.epsilon)


def _original_context(problem: RegistrationProblem, j: int, alpha: float,
                      states: list) -> fitness.FitnessContext:
    source, target = problem.pair(j)
    peer_a = states[_state_index(j % 3 + 1, "original")].best_transform
    peer_b = states[_state_index((j + 1) % 3 + 1, "original")].best_transform
    return fitness.FitnessContext(source=source, target=target,
                                  epsilon=problem.epsilon, alpha=alpha,
                                  task_index=j, peer_bests=(peer_a, peer_b))


def _state_index(j: int, kind: str) -> int:
    return 2 * (j - 1) + (1 if kind == "original" else 0)


def initialize(problem: RegistrationProblem, config: MTConfig, rng) -> list:
    """Draw all six populations uniformly in the search space and score
    them. Original populations are scored without the loop term: no best
    individuals exist yet to fill the peer slots."""
    config.validate()
    lower, upper = problem.space.bounds
    states = []
    for j in (1, 2, 3):
        for kind in ("aiding", "original"):
            genomes = lower + rng.random((config.pop_size, geometry.POSE_DIM)) * (upper - lower)
            if kind == "aiding":
                costs = _aiding_costs(problem, j, genomes)
            else:
                source, target = problem.pair(j)
                transforms = [geometry.pose_to_transform(g) for g in genomes]
                costs = fitness.consensus_loss_many(source, target, transforms,
                                                    problem.epsilon)
            state = TaskState(task=TaskId(j, kind),
                              population=evolution.Population(
                                  genomes=genomes, costs=costs,
                                  archive_size=config.archive_size))
            state.refresh_best_transform()
            states.append(state)
    return states


def intra_share(mutants_original: np.ndarray, mutants_aiding: np.ndarray,
                archive_original: np.ndarray, archive_aiding: np.ndarray,
                rng) -> None:
    """Swap elite individuals between the two tasks of one pair, both
    directions: the aiding archive overwrites randomly chosen original
    mutants and vice versa. Mutant arrays are modified in place."""
    k = archive_original.shape[0]
    if archive_aiding.shape[0] != k:
        raise ValueError("peer archives must have equal size")
    n = mutants_original.shape[0]
    if k > n:
        raise ValueError("archive larger than the mutant set")
    chosen_o = rng.choice(n, size=k, replace=False)
    mutants_original[chosen_o] = archive_aiding
    chosen_a = rng.choice(n, size=k, replace=False)
    mutants_aiding[chosen_a] = archive_original


def inter_share(j: int, mutants_aiding: np.ndarray, mutants_original: np.ndarray,
                peer_a: np.ndarray, peer_b: np.ndarray, count: int,
                bounds, rng) -> bool:
    """Inject the pose implied by the other two original tasks' bests.

    The combined transform (best_b @ best_a)^-1 is encoded back to a
    genome and overwrites ``count`` randomly chosen mutants in both the
    aiding and the original set. Returns False (selection draws already
    consumed, nothing replaced) when encoding hits gimbal lock.
    """
    n = mutants_aiding.shape[0]
    chosen_a = rng.choice(n, size=count, replace=False)
    chosen_o = rng.choice(n, size=count, replace=False)
    combined = geometry.combine_for_task(j, peer_a, peer_b)
    try:
        pose = geometry.transform_to_pose(combined)
    except geometry.GimbalLockError:
        log.warning("inter-task sharing skipped for pair %d: gimbal lock while "
                    "encoding the combined transform", j)
        return False
    pose = evolution.clamp(pose, bounds)
    mutants_aiding[chosen_a] = pose
    mutants_original[chosen_o] = pose
    return True


def step_generation(problem: RegistrationProblem, states: list,
                    config: MTConfig, generation: int, rng) -> int:
    """Advance every task by one generation; returns the number of trial
    evaluations (always 6 * pop_size)."""
    bounds = problem.space.bounds
    eta = evolution.eta_schedule(generation, config.generations)
    evaluations = 0
    for j in (1, 2, 3):
        aid = states[_state_index(j, "aiding")]
        orig = states[_state_index(j, "original")]
        mut_a = evolution.de_mutate(aid.population, config.scale_factor, bounds, rng)
        mut_o = evolution.de_mutate(orig.population, config.scale_factor, bounds, rng)

        if rng.random() < config.p_intra:
            intra_share(mut_o, mut_a,
                        orig.population.archive_genomes,
                        aid.population.archive_genomes, rng)
        if rng.random() < config.p_inter:
            peer_a = states[_state_index(j % 3 + 1, "original")].best_transform
            peer_b = states[_state_index((j + 1) % 3 + 1, "original")].best_transform
            inter_share(j, mut_a, mut_o, peer_a, peer_b,
                        config.archive_size, bounds, rng)

        trials_a = np.stack([
            evolution.sbx_cross(mut_a[i], aid.population.genomes[i], eta, bounds, rng)
            for i in range(config.pop_size)
        ])
        trials_o = np.stack([
            evolution.sbx_cross(mut_o[i], orig.population.genomes[i], eta, bounds, rng)
            for i in range(config.pop_size)
        ])

        costs_a = _aiding_costs(problem, j, trials_a)
        evolution.elitist_select(aid.population, trials_a, costs_a)

        ctx = _original_context(problem, j, config.alpha, states)
        costs_o = fitness.original_fitness_many(ctx, trials_o)
        evolution.elitist_select(orig.population, trials_o, costs_o)
        orig.refresh_best_transform()
        evaluations += 2 * config.pop_size
    return evaluations


def _shift_transform(offset: np.ndarray) -> np.ndarray:
    t = np.eye(4)
    t[:3, 3] = -np.asarray(offset, dtype=float)
    return t


def to_original_frame(transform: np.ndarray, source_offset: np.ndarray,
                      target_offset: np.ndarray) -> np.ndarray:
    """Re-express a decentralized-frame transform between original frames:
    shift the source into its centred frame, apply, undo the target shift."""
    return geometry.invert(_shift_transform(target_offset)) @ \
        np.asarray(transform, dtype=float) @ _shift_transform(source_offset)


@dataclass
class RunReport:
    """Everything a run produces. ``canonical_json`` excludes wall time so
    identical seeds serialize to identical bytes."""

    seed: int
    config: MTConfig
    epsilon: float
    shift: float
    cost_traces: np.ndarray        # (generations, 6), column order TASK_ORDER
    transforms: list               # T12, T23, T31 in the original frames
    final_costs: np.ndarray        # (6,)
    loop_residual: float
    err_r: float | None = None
    err_t: float | None = None
    trial_evaluations: int = 0
    wall_time_s: float = 0.0

    def canonical_payload(self) -> dict:
        cfg = asdict(self.config)
        return {
            "seed": self.seed,
            "config": cfg,
            "epsilon": self.epsilon,
            "shift": self.shift,
            "transforms": {
                "t12": [float(v) for v in np.asarray(self.transforms[0]).ravel()],
                "t23": [float(v) for v in np.asarray(self.transforms[1]).ravel()],
                "t31": [float(v) for v in np.asarray(self.transforms[2]).ravel()],
            },
            "final_costs": {label: float(c) for label, c in
                            zip(TASK_ORDER, self.final_costs)},
            "loop_residual": self.loop_residual,
            "err_r": self.err_r,
            "err_t": self.err_t,
            "trial_evaluations": self.trial_evaluations,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.canonical_payload(), indent=2, sort_keys=True) + "\n"

    def convergence_rows(self):
        """(generation, 6 best costs) rows, generation counted from 1."""
        for g, row in enumerate(self.cost_traces, start=1):
            yield (g, *row)


def run(problem: RegistrationProblem, config: MTConfig) -> RunReport:
    """Full run: initialize, evolve for the configured number of
    generations, then report the original tasks' bests mapped back to the
    original frames."""
    config.validate()
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    states = initialize(problem, config, rng)
    traces = np.empty((config.generations, 6))
    evaluations = 0
    for g in range(config.generations):
        evaluations += step_generation(problem, states, config, g, rng)
        traces[g] = [s.population.best_cost for s in states]

    finals = []
    for j in (1, 2, 3):
        state = states[_state_index(j, "original")]
        dec = geometry.pose_to_transform(state.population.best_genome)
        finals.append(to_original_frame(dec, problem.offsets[j - 1],
                                        problem.offsets[j % 3]))
    residual = geometry.loop_residual(*finals)

    err_r = err_t = None
    if problem.ground_truth is not None:
        err_r = geometry.rotation_error(finals, problem.ground_truth)
        err_t = geometry.translation_error(finals, problem.ground_truth)

    return RunReport(
        seed=config.seed,
        config=config,
        epsilon=problem.epsilon,
        shift=problem.space.shift,
        cost_traces=traces,
        transforms=finals,
        final_costs=traces[-1].copy(),
        loop_residual=residual,
        err_r=err_r,
        err_t=err_t,
        trial_evaluations=evaluations,
        wall_time_s=time.perf_counter() - start,
    )
