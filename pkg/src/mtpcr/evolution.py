"""Per-task evolutionary operators: DE/rand/1 mutation, simulated binary
crossover, greedy per-index survivor selection and a top-cost archive.

All operators draw from an explicit numpy Generator in a fixed order so a
whole run replays bit-for-bit from its seed:

* ``de_mutate``: for i = 0..n-1, one ``choice(n-1, 3, replace=False)``
  (values at or above i are shifted up by one to skip i);
* ``sbx_cross``: ``random(dim)`` for the per-dimension u draws, then one
  ``random()`` coin to pick which symmetric child survives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def eta_schedule(generation: int, total_generations: int) -> float:
    """SBX distribution index, linear from 2 to 10 over the run."""
    if total_generations <= 1:
        return 2.0
    return 2.0 + 8.0 * generation / (total_generations - 1)


def clamp(genomes: np.ndarray, bounds) -> np.ndarray:
    lower, upper = bounds
    return np.clip(genomes, lower, upper)


@dataclass
class Population:
    """One task's genomes with their costs, best-so-far and top archive."""

    genomes: np.ndarray
    costs: np.ndarray
    archive_size: int
    best_genome: np.ndarray = field(init=False)
    best_cost: float = field(init=False)
    archive_genomes: np.ndarray = field(init=False)
    archive_costs: np.ndarray = field(init=False)

    def __post_init__(self):
        self.genomes = np.asarray(self.genomes, dtype=float)
        self.costs = np.asarray(self.costs, dtype=float)
        n = self.genomes.shape[0]
        if self.costs.shape != (n,):
            raise ValueError("costs must align with genomes")
        if not 1 <= self.archive_size <= n:
            raise ValueError(f"archive size must be in [1, {n}], got {self.archive_size}")
        best = int(np.argmin(self.costs))
        self.best_genome = self.genomes[best].copy()
        self.best_cost = float(self.costs[best])
        self._refresh_archive()

    @property
    def size(self) -> int:
        return self.genomes.shape[0]

    def _refresh_archive(self):
        order = np.argsort(self.costs, kind="stable")[: self.archive_size]
        self.archive_genomes = self.genomes[order].copy()
        self.archive_costs = self.costs[order].copy()


def de_mutate(pop: Population, scale_factor: float, bounds, rng) -> np.ndarray:
    """DE/rand/1 mutants ``x_r1 + F * (x_r2 - x_r3)``, clamped to bounds.

    r1, r2, r3 are distinct and differ from the row index.
    """
    n = pop.size
    if n < 4:
        raise ValueError("DE/rand/1 needs a population of at least 4")
    genomes = pop.genomes
    mutants = np.empty_like(genomes)
    for i in range(n):
        r = rng.choice(n - 1, size=3, replace=False)
        r[r >= i] += 1
        mutants[i] = genomes[r[0]] + scale_factor * (genomes[r[1]] - genomes[r[2]])
    return clamp(mutants, bounds)


def sbx_cross(mutant: np.ndarray, parent: np.ndarray, eta: float, bounds, rng) -> np.ndarray:
    """One SBX trial from a (mutant, parent) pair.

    Per dimension: u ~ U(0,1); beta = (2u)^(1/(eta+1)) for u <= 0.5,
    else (1/(2(1-u)))^(1/(eta+1)). The two symmetric children sit at
    0.5*((1 +/- beta)*parent + (1 -/+ beta)*mutant); a single coin picks
    which one becomes the trial. Clamped to bounds.
    """
    parent = np.asarray(parent, dtype=float)
    mutant = np.asarray(mutant, dtype=float)
    u = rng.random(parent.shape[0])
    exponent = 1.0 / (eta + 1.0)
    beta = np.where(u <= 0.5, (2.0 * u) ** exponent,
                    (1.0 / (2.0 * (1.0 - u))) ** exponent)
    child_a = 0.5 * ((1.0 + beta) * parent + (1.0 - beta) * mutant)
    child_b = 0.5 * ((1.0 - beta) * parent + (1.0 + beta) * mutant)
    child = child_a if rng.random() < 0.5 else child_b
    return clamp(child, bounds)


def elitist_select(pop: Population, trials: np.ndarray, trial_costs: np.ndarray) -> Population:
    """Greedy per-index survivor selection; a trial replaces its parent
    when its cost is less than or equal. Best and archive are refreshed."""
    trials = np.asarray(trials, dtype=float)
    trial_costs = np.asarray(trial_costs, dtype=float)
    better = trial_costs <= pop.costs
    pop.genomes[better] = trials[better]
    pop.costs[better] = trial_costs[better]
    best = int(np.argmin(pop.costs))
    if pop.costs[best] <= pop.best_cost:
        pop.best_genome = pop.genomes[best].copy()
        pop.best_cost = float(pop.costs[best])
    pop._refresh_archive()
    return pop


def update_archive(pop: Population) -> Population:
    """Recompute the archive: lowest-cost members, ties by lowest index."""
    pop._refresh_archive()
    return pop
