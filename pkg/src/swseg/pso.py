"""Particle swarm optimization over mixed categorical/integer/continuous spaces.

Positions always live in continuous coordinates; discrete dimensions are
rounded only when a position is decoded for the objective. Each generation
updates every particle's velocity and position from the previous
generation's global best, evaluates all particles (optionally in worker
processes), and then applies the personal/global best updates in particle
order with strict ``<`` comparisons.
"""

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, NumericError

logger = logging.getLogger(__name__)


# -- search space -------------------------------------------------------------------


def round_half_away(x):
    """Round to nearest integer, halves away from zero (2.5 -> 3, -2.5 -> -3)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class Categorical:
    """Picks ``values[round(x)]``; raw coordinate spans ``[0, len(values) - 1]``."""

    name: str
    values: Tuple[Any, ...]

    @property
    def bounds(self) -> Tuple[float, float]:
        return 0.0, float(len(self.values) - 1)

    def decode(self, x: float):
        return self.values[int(round_half_away(x))]


@dataclass(frozen=True)
class Integer:
    name: str
    lo: int
    hi: int

    @property
    def bounds(self) -> Tuple[float, float]:
        return float(self.lo), float(self.hi)

    def decode(self, x: float) -> int:
        return int(round_half_away(x))


@dataclass(frozen=True)
class Continuous:
    name: str
    lo: float
    hi: float

    @property
    def bounds(self) -> Tuple[float, float]:
        return float(self.lo), float(self.hi)

    def decode(self, x: float) -> float:
        return float(x)


@dataclass(frozen=True)
class SearchSpace:
    dims: Tuple[Any, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        if not self.dims:
            raise ConfigError("search space needs at least one dimension")
        for d in self.dims:
            lo, hi = d.bounds
            if not lo < hi:
                raise ConfigError(f"dimension {d.name!r}: lower bound {lo} must be < upper bound {hi}")
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate dimension names in {names}")

    @property
    def names(self) -> List[str]:
        return [d.name for d in self.dims]

    @property
    def lb(self) -> np.ndarray:
        return np.array([d.bounds[0] for d in self.dims])

    @property
    def ub(self) -> np.ndarray:
        return np.array([d.bounds[1] for d in self.dims])

    def __len__(self) -> int:
        return len(self.dims)

    def decode(self, x: Sequence[float]) -> Dict[str, Any]:
        return decode(self, x)

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float]) -> "SearchSpace":
        """All-continuous space with dimensions named x0, x1, ..."""
        return cls(tuple(Continuous(f"x{i}", lo, hi) for i, (lo, hi) in enumerate(zip(lower, upper))))


def decode(space: SearchSpace, x: Sequence[float]) -> Dict[str, Any]:
    """Map a raw position to named hyperparameter values."""
    if len(x) != len(space):
        raise ConfigError(f"position has {len(x)} coordinates, space has {len(space)}")
    return {d.name: d.decode(float(v)) for d, v in zip(space.dims, x)}


FILTER_VALUES = (8, 16, 32, 64)


def unet_space(
    filter_values: Sequence[int] = FILTER_VALUES,
    kernel: Tuple[int, int] = (3, 5),
    lr: Tuple[float, float] = (0.0001, 0.01),
) -> SearchSpace:
    """Filters (by index), kernel size and learning rate.

    Defaults give raw bounds lb = [0, 3, 0.0001], ub = [3, 5, 0.01].
    """
    return SearchSpace(
        (
            Categorical("filters", tuple(filter_values)),
            Integer("kernel", *kernel),
            Continuous("lr", *lr),
        )
    )


# -- swarm ------------------------------------------------------------------------------


@dataclass(frozen=True)
class SwarmConfig:
    n_particles: int = 10
    iters: int = 10
    w: float = 0.9
    c1: float = 0.5
    c2: float = 0.3
    seed: int = 0
    v_max_fraction: float = 0.5

    def validate(self) -> "SwarmConfig":
        if self.n_particles < 1:
            raise ConfigError(f"n_particles must be >= 1, got {self.n_particles}")
        if self.iters < 1:
            raise ConfigError(f"iters must be >= 1, got {self.iters}")
        if min(self.w, self.c1, self.c2) < 0:
            raise ConfigError(f"w, c1, c2 must be >= 0, got {self.w}, {self.c1}, {self.c2}")
        if self.v_max_fraction <= 0:
            raise ConfigError(f"v_max_fraction must be > 0, got {self.v_max_fraction}")
        return self


@dataclass
class Particle:
    x: np.ndarray
    v: np.ndarray
    pbest_x: np.ndarray
    pbest_f: float
    rng: np.random.Generator = field(repr=False)


def particle_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([master_seed, index])


def velocity_update(
    p: Particle,
    gbest: np.ndarray,
    cfg: SwarmConfig,
    r1: np.ndarray,
    r2: np.ndarray,
    v_max: Optional[np.ndarray] = None,
) -> np.ndarray:
    """``w v + c1 r1 (pbest - x) + c2 r2 (gbest - x)``, clamped to +-v_max."""
    v = cfg.w * p.v + cfg.c1 * r1 * (p.pbest_x - p.x) + cfg.c2 * r2 * (gbest - p.x)
    if v_max is not None:
        v = np.clip(v, -v_max, v_max)
    return v


def position_update(p: Particle, v_new: np.ndarray, lb=None, ub=None) -> np.ndarray:
    """``x + v``, clamped to ``[lb, ub]`` when bounds are given."""
    x = p.x + v_new
    if lb is not None:
        x = np.clip(x, lb, ub)
    return x


@dataclass
class Evaluation:
    iteration: int
    particle: int
    x: np.ndarray
    decoded: Dict[str, Any]
    fitness: float
    info: Dict[str, Any] = field(default_factory=dict)


@dataclass
class GBestRecord:
    iteration: int
    x: np.ndarray
    decoded: Dict[str, Any]
    fitness: float
    particle: int


@dataclass
class SwarmTrace:
    names: List[str]
    evaluations: List[Evaluation] = field(default_factory=list)
    gbest: List[GBestRecord] = field(default_factory=list)

    def by_iteration(self, it: int) -> List[Evaluation]:
        return [e for e in self.evaluations if e.iteration == it]

    @property
    def gbest_f(self) -> List[float]:
        return [g.fitness for g in self.gbest]

    def is_monotone(self) -> bool:
        f = self.gbest_f
        return all(b <= a for a, b in zip(f, f[1:]))

    def to_csv(self, path: Union[str, Path]) -> None:
        """One row per evaluation, then a ``gbest`` row closing each iteration.

        Columns: iteration, particle, <dimension names>, fitness, dsc_val.
        ``dsc_val`` is filled only when the objective reports one.
        """
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "particle", *self.names, "fitness", "dsc_val"])
            for g in self.gbest:
                for e in self.by_iteration(g.iteration):
                    dsc = e.info.get("dsc_val")
                    w.writerow(
                        [e.iteration, e.particle, *(_fmt(e.decoded[n]) for n in self.names),
                         _fmt(e.fitness), "" if dsc is None else _fmt(dsc)]
                    )
                dsc = None if not math.isfinite(g.fitness) else _gbest_dsc(self, g)
                w.writerow(
                    [g.iteration, "gbest", *(_fmt(g.decoded[n]) for n in self.names),
                     _fmt(g.fitness), "" if dsc is None else _fmt(dsc)]
                )


def _gbest_dsc(trace: SwarmTrace, g: GBestRecord):
    for e in trace.evaluations:
        if e.particle == g.particle and e.fitness == g.fitness and np.array_equal(e.x, g.x):
            return e.info.get("dsc_val")
    return None


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_swarm_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@dataclass
class OptimizeResult:
    best: Dict[str, Any]
    best_f: float
    best_x: np.ndarray
    trace: SwarmTrace


def _unpack(result) -> Tuple[float, Dict[str, Any]]:
    if isinstance(result, tuple):
        f, info = result
    else:
        f, info = result, {}
    f = float(f)
    if math.isnan(f):
        logger.warning("objective returned NaN; treating as +inf")
        f = math.inf
    return f, dict(info or {})


class _Evaluator:
    """Maps the objective over one generation, serially or in worker processes."""

    def __init__(self, objective, jobs: int):
        self.objective = objective
        self.pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None

    def __call__(self, decoded: List[Dict[str, Any]]) -> List[Tuple[float, Dict[str, Any]]]:
        if self.pool is None:
            results = [self.objective(d) for d in decoded]
        else:
            results = list(self.pool.map(self.objective, decoded))
        return [_unpack(r) for r in results]

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def optimize(
    space: SearchSpace,
    objective: Callable[[Dict[str, Any]], Any],
    cfg: SwarmConfig = SwarmConfig(),
    jobs: int = 1,
    callback: Optional[Callable[[int, SwarmTrace], None]] = None,
) -> OptimizeResult:
    """Minimize ``objective`` over ``space``.

    ``objective`` receives the decoded dict and returns either a float or a
    ``(fitness, info)`` pair; ``info`` is kept in the trace. NaN fitness counts
    as +inf. Generation 0 evaluates the uniform initial swarm (velocities
    zero); ``cfg.iters`` further generations follow. Particle ``i`` draws its
    initial position and every ``r1``/``r2`` vector from its own stream seeded
    by ``(cfg.seed, i)``, so results do not depend on ``jobs``.
    """
    cfg.validate()
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    lb, ub = space.lb, space.ub
    v_max = cfg.v_max_fraction * (ub - lb)
    trace = SwarmTrace(space.names)
    evaluate = _Evaluator(objective, jobs)
    try:
        particles = []
        for i in range(cfg.n_particles):
            rng = particle_rng(cfg.seed, i)
            x = rng.uniform(lb, ub)
            particles.append(Particle(x, np.zeros_like(x), x.copy(), math.inf, rng))
        results = evaluate([space.decode(p.x) for p in particles])
        if all(not math.isfinite(f) for f, _ in results):
            raise NumericError("every particle of the initial swarm has a non-finite fitness")
        g_idx, g_x, g_f = 0, particles[0].x.copy(), math.inf
        for i, (p, (f, info)) in enumerate(zip(particles, results)):
            trace.evaluations.append(Evaluation(0, i, p.x.copy(), space.decode(p.x), f, info))
            p.pbest_f = f
            if f < g_f:
                g_idx, g_x, g_f = i, p.x.copy(), f
        if not math.isfinite(g_f):
            g_idx, g_x = 0, particles[0].x.copy()
        trace.gbest.append(GBestRecord(0, g_x.copy(), space.decode(g_x), g_f, g_idx))
        if callback:
            callback(0, trace)

        for t in range(1, cfg.iters + 1):
            for p in particles:
                r1 = p.rng.random(len(space))
                r2 = p.rng.random(len(space))
                p.v = velocity_update(p, g_x, cfg, r1, r2, v_max)
                p.x = position_update(p, p.v, lb, ub)
            results = evaluate([space.decode(p.x) for p in particles])
            for i, (p, (f, info)) in enumerate(zip(particles, results)):
                trace.evaluations.append(Evaluation(t, i, p.x.copy(), space.decode(p.x), f, info))
                if f < p.pbest_f:
                    p.pbest_x, p.pbest_f = p.x.copy(), f
                if f < g_f:
                    g_idx, g_x, g_f = i, p.x.copy(), f
            trace.gbest.append(GBestRecord(t, g_x.copy(), space.decode(g_x), g_f, g_idx))
            logger.info("generation %d: gbest %.6g at %s", t, g_f, space.decode(g_x))
            if callback:
                callback(t, trace)
    finally:
        evaluate.close()
    return OptimizeResult(space.decode(g_x), g_f, g_x, trace)


# -- benchmark objectives -----------------------------------------------------------------


def sphere(x) -> float:
    x = np.asarray(x, float)
    return float(np.sum(x * x))


def rastrigin(x, a: float = 10.0) -> float:
    x = np.asarray(x, float)
    return float(a * x.size + np.sum(x * x - a * np.cos(2 * np.pi * x)))


class VectorObjective:
    """Adapts ``f(vector)`` to the decoded-dict interface of :func:`optimize`."""

    def __init__(self, func: Callable[[np.ndarray], float], names: Sequence[str], scale: float = 1.0):
        self.func = func
        self.names = list(names)
        self.scale = scale

    def __call__(self, decoded: Mapping[str, Any]) -> float:
        return self.scale * self.func(np.array([decoded[n] for n in self.names], float))
