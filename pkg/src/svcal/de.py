"""Differential Evolution with best1bin / rand1bin mutation, binomial
crossover and greedy selection over a batched objective.

The objective receives the whole trial population as an ``(N_p, D)``
matrix and returns ``N_p`` energies, so a generation costs one call.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import OptimizationError
from .sampling import latin_hypercube

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    BEST1BIN = "best1bin"
    RAND1BIN = "rand1bin"


@dataclass(frozen=True)
class DEConfig:
    pop_size: int = 50
    strategy: Strategy = Strategy.BEST1BIN
    mutation: tuple[float, float] = (0.5, 1.0)
    crossover: float = 0.7
    tol: float = 0.01
    atol: float = 0.0
    max_generations: int = 1000
    seed: int = 0
    bounds: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "mutation", tuple(float(f) for f in self.mutation))
        if self.bounds is not None:
            object.__setattr__(self, "bounds", tuple((float(lo), float(hi)) for lo, hi in self.bounds))
        if self.pop_size < 4:
            raise ValueError("pop_size must be >= 4")
        lo, hi = self.mutation
        if not 0.0 <= lo <= hi:
            raise ValueError("mutation range must satisfy 0 <= F_low <= F_high")
        if not 0.0 <= self.crossover <= 1.0:
            raise ValueError("crossover must lie in [0, 1]")
        if not self.tol > 0 or self.atol < 0:
            raise ValueError("need tol > 0 and atol >= 0")
        if self.max_generations < 0:
            raise ValueError("max_generations must be >= 0")

    @property
    def dim(self) -> int:
        if self.bounds is None:
            raise ValueError("DEConfig has no bounds")
        return len(self.bounds)

    def bounds_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if self.bounds is None:
            raise ValueError("DEConfig has no bounds")
        b = np.array(self.bounds, dtype=float).reshape(-1, 2)
        if np.any(b[:, 0] >= b[:, 1]):
            raise ValueError("degenerate bounds: every low must be < high")
        return b[:, 0], b[:, 1]

    def with_population_multiplier(self, multiplier: int, dim: int | None = None) -> "DEConfig":
        """Population sized as ``multiplier x`` number of free parameters."""
        d = self.dim if dim is None else dim
        return replace(self, pop_size=max(4, multiplier * d))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        d["mutation"] = list(self.mutation)
        d["bounds"] = None if self.bounds is None else [list(b) for b in self.bounds]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DEConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown DE config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "DEConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Population:
    candidates: np.ndarray
    energies: np.ndarray
    generation: int = 0

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.energies))

    @property
    def best(self) -> np.ndarray:
        return self.candidates[self.best_index]

    def __len__(self):
        return self.candidates.shape[0]


@dataclass
class DETrace:
    generation: list[int] = field(default_factory=list)
    best_energy: list[float] = field(default_factory=list)
    mean_energy: list[float] = field(default_factory=list)
    std_energy: list[float] = field(default_factory=list)
    f_used: list[float] = field(default_factory=list)

    def record(self, gen, energies, f):
        self.generation.append(gen)
        self.best_energy.append(float(np.min(energies)))
        with np.errstate(invalid="ignore"):
            self.mean_energy.append(float(np.mean(energies)))
            self.std_energy.append(float(np.std(energies)))
        self.f_used.append(float(f))

    def to_csv(self, path) -> None:
        rows = np.column_stack([self.generation, self.best_energy, self.mean_energy, self.std_energy, self.f_used])
        np.savetxt(path, rows, delimiter=",", comments="", fmt=["%d"] + ["%.17g"] * 4,
                   header="generation,best_energy,mean_energy,std_energy,F_used")


@dataclass
class DEResult:
    x: np.ndarray
    fun: float
    generations: int
    function_evaluations: int
    converged: bool
    trace: DETrace
    population: Population
    flagged: int = 0


def de_init(cfg: DEConfig, rng: np.random.Generator | None = None) -> Population:
    """Latin hypercube population over the bounds; energies are NaN until
    evaluated."""
    lo, hi = cfg.bounds_arrays()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    u = latin_hypercube(cfg.pop_size, lo.size, rng)
    return Population(lo + u * (hi - lo), np.full(cfg.pop_size, np.nan))


def reflect(x, lo, hi) -> np.ndarray:
    """Fold ``x`` back into ``[lo, hi]`` by mirror reflection at the walls."""
    x = np.asarray(x, dtype=float)
    w = hi - lo
    y = np.mod(x - lo, 2.0 * w)
    y = np.where(y > w, 2.0 * w - y, y)
    return np.where((x >= lo) & (x <= hi), x, lo + y)


def mutant_vector(a, b, c, f, lo=None, hi=None) -> np.ndarray:
    v = np.asarray(a, dtype=float) + f * (np.asarray(b, dtype=float) - np.asarray(c, dtype=float))
    if lo is None:
        return v
    return reflect(v, lo, hi)


def _donors(n, i, best, strategy, rng):
    if strategy is Strategy.BEST1BIN:
        pool = [j for j in range(n) if j != i and j != best]
        b, c = rng.choice(pool, size=2, replace=False)
        return best, b, c
    pool = [j for j in range(n) if j != i]
    a, b, c = rng.choice(pool, size=3, replace=False)
    return a, b, c


def de_mutate(pop: Population, i: int, f: float, strategy: Strategy | str, rng: np.random.Generator,
              bounds: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """``theta_a + F (theta_b - theta_c)`` for target ``i``, reflected into
    ``bounds`` when given."""
    a, b, c = _donors(len(pop), i, pop.best_index, Strategy(strategy), rng)
    lo, hi = (None, None) if bounds is None else bounds
    return mutant_vector(pop.candidates[a], pop.candidates[b], pop.candidates[c], f, lo, hi)


def de_crossover(target, mutant, cr: float, rng: np.random.Generator) -> np.ndarray:
    """Binomial crossover with one dimension always taken from the mutant."""
    target = np.asarray(target, dtype=float)
    mutant = np.asarray(mutant, dtype=float)
    d = target.size
    p = rng.random(d)
    forced = rng.integers(d)
    take = p <= cr
    take[forced] = True
    return np.where(take, mutant, target)


def de_select(pop: Population, trials, trial_energies) -> Population:
    """Greedy one-to-one selection; a trial wins ties."""
    trial_energies = np.asarray(trial_energies, dtype=float)
    win = trial_energies <= pop.energies
    cand = np.where(win[:, None], trials, pop.candidates)
    en = np.where(win, trial_energies, pop.energies)
    return Population(cand, en, pop.generation + 1)


def _evaluate(objective, x):
    e = np.asarray(objective(x), dtype=float).reshape(-1)
    if e.shape != (x.shape[0],):
        raise ValueError(f"objective returned {e.shape}, expected ({x.shape[0]},)")
    bad = ~np.isfinite(e)
    return np.where(bad, np.inf, e), int(bad.sum())


def _converged(energies, cfg):
    if not np.all(np.isfinite(energies)):
        return False
    return float(np.std(energies)) <= cfg.atol + cfg.tol * abs(float(np.mean(energies)))


def de_minimize(objective: Callable[[np.ndarray], np.ndarray], cfg: DEConfig,
                callback: Callable[[Population], None] | None = None) -> DEResult:
    """Minimize ``objective`` over ``cfg.bounds``.

    Stops when ``std(E) <= atol + tol * |mean(E)|`` over the population
    energies or after ``max_generations``. Non-finite energies are replaced
    by ``+inf`` and counted in ``flagged``.
    """
    lo, hi = cfg.bounds_arrays()
    rng = np.random.default_rng(cfg.seed)
    pop = de_init(cfg, rng)
    pop.energies, flagged = _evaluate(objective, pop.candidates)
    nfev = len(pop)
    if not np.any(np.isfinite(pop.energies)):
        raise OptimizationError("objective invalid on search space")
    trace = DETrace()
    trace.record(0, pop.energies, math.nan)
    converged = _converged(pop.energies, cfg)
    f_lo, f_hi = cfg.mutation
    n, d = pop.candidates.shape
    while not converged and pop.generation < cfg.max_generations:
        f = f_lo + (f_hi - f_lo) * rng.random()
        trials = np.empty_like(pop.candidates)
        for i in range(n):
            mutant = de_mutate(pop, i, f, cfg.strategy, rng, (lo, hi))
            trials[i] = de_crossover(pop.candidates[i], mutant, cfg.crossover, rng)
        energies, bad = _evaluate(objective, trials)
        flagged += bad
        nfev += n
        pop = de_select(pop, trials, energies)
        trace.record(pop.generation, pop.energies, f)
        if callback is not None:
            callback(pop)
        converged = _converged(pop.energies, cfg)
    if flagged:
        log.warning("%d candidate evaluations returned non-finite energies", flagged)
    best = pop.best_index
    return DEResult(pop.candidates[best].copy(), float(pop.energies[best]), pop.generation, nfev,
                    converged, trace, pop, flagged)
