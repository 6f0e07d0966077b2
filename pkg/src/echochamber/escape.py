"""Single-user diversity maximization against the trained recommender.

The objective treats recommended-content diversity as a black box over one
user's rating vector: swap the user's rows for the candidate vector, refit,
take the top-k recommendations, score their diversity. Three attack styles
are provided: a finite-difference trust region, derivative-free sampling, and
the two add-high-ratings heuristics.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .dataset import RatingTable, TagRelevanceMatrix, subsample_users
from .diversity import set_diversity
from .recommender import Hyperparams, fit, top_k_unseen

log = logging.getLogger(__name__)

FD_STEP = 0.1
FD_DELTA0 = 0.5
FD_TOLERANCE = 1e-3
ADDABLE_SEED_OFFSET = 101
STRATEGY_NAMES = (
    "finite_difference",
    "derivative_free",
    "heuristic_far",
    "heuristic_random",
)


@dataclass(frozen=True)
class Fidelity:
    """Cheapened objective settings; None keeps the configured value."""

    sgd_epochs_override: int | None = None
    history_subsample: int | None = None

    def __post_init__(self) -> None:
        if self.sgd_epochs_override is not None and self.sgd_epochs_override < 0:
            raise ValueError("sgd_epochs_override must be >= 0")
        if self.history_subsample is not None and self.history_subsample < 1:
            raise ValueError("history_subsample must be >= 1")

    @property
    def active(self) -> bool:
        return self.sgd_epochs_override is not None or self.history_subsample is not None


@dataclass(frozen=True, eq=False)
class EscapeObjectiveConfig:
    """Everything the black-box objective needs, frozen for reuse."""

    target_user: int
    corpus: RatingTable
    genome: TagRelevanceMatrix
    hyper: Hyperparams = field(default_factory=Hyperparams)
    k_eval: int = 20
    fidelity: Fidelity = field(default_factory=Fidelity)
    seed: int = 0
    n_addable: int = 0
    heuristic_n_add: int = 10

    def __post_init__(self) -> None:
        if self.k_eval < 2:
            raise ValueError("k_eval must be >= 2 to measure diversity")
        if self.n_addable < 0 or self.heuristic_n_add < 0:
            raise ValueError("movie-add counts must be >= 0")
        if len(self.corpus.user_rows(self.target_user)) == 0:
            raise ValueError(f"target user {self.target_user} has no corpus ratings")


@dataclass(frozen=True)
class RatingVector:
    """The editable rating set: movie id -> rating."""

    entries: dict[int, float]

    def key(self) -> tuple[tuple[int, float], ...]:
        return tuple(sorted((int(m), float(r)) for m, r in self.entries.items()))

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class OptimizeResult:
    best: RatingVector
    best_value: float
    evaluations: int
    trajectory: list[tuple[int, float]]  # (evals used, incumbent value)


@dataclass
class StrategyResult:
    best_objective: float
    evaluations_used: int
    improvement_pct: float | None
    verdict: str
    best_vector_delta: dict


@dataclass
class EscapeReport:
    baseline_objective: float
    strategies: dict[str, StrategyResult]
    highfi: dict | None = None


def current_ratings(config: EscapeObjectiveConfig) -> RatingVector:
    """The target user's rating vector as it stands in the corpus."""
    rows = config.corpus.user_rows(config.target_user)
    return RatingVector(
        {
            int(config.corpus.movies[i]): float(config.corpus.ratings[i])
            for i in rows
        }
    )


def objective(config: EscapeObjectiveConfig, x: RatingVector) -> float:
    """Recommended-content diversity of the target user under ratings x.

    The corpus copy keeps everyone else untouched, drops the target's rows,
    and appends x (sorted by movie id, timestamp 0). The refit runs at the
    configured fidelity; determinism follows from the fixed fit seed.
    """
    if not x.entries:
        raise ValueError("the rating vector is empty")
    hyper = config.hyper
    for m, r in x.entries.items():
        if not hyper.rating_min <= r <= hyper.rating_max:
            raise ValueError(f"rating {r} for movie {m} outside bounds")
    others = config.corpus.select(config.corpus.users != config.target_user)
    if config.fidelity.history_subsample is not None:
        others, _ = subsample_users(
            others, config.fidelity.history_subsample, seed=config.seed
        )
    items = sorted(x.entries)
    table = others.with_appended(
        np.full(len(items), config.target_user, dtype=np.int64),
        np.array(items, dtype=np.int64),
        np.array([x.entries[m] for m in items], dtype=np.float64),
        np.zeros(len(items), dtype=np.int64),
    )
    if config.fidelity.sgd_epochs_override is not None:
        hyper = replace(hyper, n_sgd_epochs=config.fidelity.sgd_epochs_override)
    model = fit(table, hyper)
    recs = top_k_unseen(
        model,
        config.target_user,
        set(x.entries),
        set(int(m) for m in config.genome.movie_ids),
        config.k_eval,
    )
    return set_diversity(config.genome, [m for m, _ in recs])


class _BoxEvaluator:
    """Budgeted incumbent tracker over a fixed coordinate order.

    Batches may evaluate concurrently but merge in submission order, so the
    trajectory never depends on the worker count.
    """

    def __init__(
        self,
        func: Callable[[RatingVector], float],
        keys: list[int],
        bounds: tuple[float, float],
        budget: int,
    ):
        self.func = func
        self.keys = keys
        self.lo, self.hi = float(bounds[0]), float(bounds[1])
        if not self.lo < self.hi:
            raise ValueError("lower bound must be below upper bound")
        self.budget = budget
        self.evaluations = 0
        self.best_vec: np.ndarray | None = None
        self.best_value = -math.inf
        self.trajectory: list[tuple[int, float]] = []

    def remaining(self) -> int:
        return self.budget - self.evaluations

    def clip(self, vec: np.ndarray) -> np.ndarray:
        return np.clip(vec, self.lo, self.hi)

    def _call(self, vec: np.ndarray) -> float:
        return float(self.func(RatingVector(dict(zip(self.keys, map(float, vec))))))

    def evaluate(self, vec: np.ndarray) -> float:
        return self.evaluate_batch([vec])[0]

    def evaluate_batch(self, vecs: Sequence[np.ndarray], threads: int = 1) -> list[float]:
        if len(vecs) > self.remaining():
            raise RuntimeError("evaluation budget exceeded")
        clipped = [self.clip(np.asarray(v, dtype=np.float64)) for v in vecs]
        if threads > 1 and len(clipped) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                values = list(pool.map(self._call, clipped))
        else:
            values = [self._call(v) for v in clipped]
        for vec, val in zip(clipped, values):
            self.evaluations += 1
            if val > self.best_value:
                self.best_value = val
                self.best_vec = vec.copy()
            self.trajectory.append((self.evaluations, self.best_value))
        return values

    def result(self) -> OptimizeResult:
        assert self.best_vec is not None
        best = RatingVector(dict(zip(self.keys, map(float, self.best_vec))))
        return OptimizeResult(
            best=best,
            best_value=self.best_value,
            evaluations=self.evaluations,
            trajectory=self.trajectory,
        )


def _vector_order(x0: RatingVector) -> tuple[list[int], np.ndarray]:
    keys = sorted(int(m) for m in x0.entries)
    return keys, np.array([float(x0.entries[m]) for m in keys], dtype=np.float64)


def optimize_finite_difference(
    objective_fn: Callable[[RatingVector], float],
    x0: RatingVector,
    bounds: tuple[float, float],
    budget: int,
    threads: int = 1,
) -> OptimizeResult:
    """Maximize with a steepest-ascent trust region on forward differences.

    Per iteration: estimate one gradient from coordinate probes (step tied to the
    trust radius so the difference bias shrinks with it), take the clipped
    radius-length ascent step, and resize the radius by the usual 1/4-3/4
    ratio test. Stops on budget or radius below tolerance; the incumbent is
    never worse than f(x0).
    """
    keys, vec0 = _vector_order(x0)
    dim = len(keys)
    if dim == 0:
        raise ValueError("x0 is empty")
    if budget < dim + 1:
        raise ValueError(f"budget must be >= dim + 1 = {dim + 1}")
    ev = _BoxEvaluator(objective_fn, keys, bounds, budget)
    x = ev.clip(vec0)
    fx = ev.evaluate(x)
    delta = FD_DELTA0
    delta_max = (ev.hi - ev.lo) * math.sqrt(dim)
    while delta >= FD_TOLERANCE and ev.remaining() >= dim:
        h = max(min(FD_STEP, 0.5 * delta), 1e-6)
        steps = np.where(x + h <= ev.hi, h, -h)
        probes = []
        for i in range(dim):
            p = x.copy()
            p[i] += steps[i]
            probes.append(p)
        fvals = np.array(ev.evaluate_batch(probes, threads))
        grad = (fvals - fx) / steps
        gnorm = float(np.linalg.norm(grad))
        if gnorm == 0.0 or ev.remaining() < 1:
            delta *= 0.5
            continue
        cand = ev.clip(x + delta * grad / gnorm)
        step = cand - x
        predicted = float(grad @ step)
        if predicted <= 0.0:
            delta *= 0.5
            continue
        fc = ev.evaluate(cand)
        actual = fc - fx
        rho = actual / predicted
        if actual > 0.0:
            x, fx = cand, fc
        if rho < 0.25:
            delta *= 0.5
        elif rho > 0.75 and float(np.linalg.norm(step)) >= 0.99 * delta:
            delta = min(delta * 2.0, delta_max)
    return ev.result()


def _latin_hypercube(
    rng: np.random.Generator, n: int, dim: int, lo: float, hi: float
) -> list[np.ndarray]:
    pts = np.empty((n, dim))
    for j in range(dim):
        perm = rng.permutation(n)
        pts[:, j] = lo + (perm + rng.random(n)) / n * (hi - lo)
    return [pts[i] for i in range(n)]


def optimize_derivative_free(
    objective_fn: Callable[[RatingVector], float],
    x0: RatingVector,
    bounds: tuple[float, float],
    budget: int,
    seed: int = 0,
    threads: int = 1,
) -> OptimizeResult:
    """Maximize by seeded Latin-hypercube exploration plus shrinking-box polish.

    Roughly 40% of the budget goes to space-filling batches over the whole
    box; the rest samples uniformly in a box around the incumbent that shrinks
    after every batch without an improvement. x0 is always evaluated first,
    so the answer is never worse than the start.
    """
    keys, vec0 = _vector_order(x0)
    dim = len(keys)
    if dim == 0:
        raise ValueError("x0 is empty")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    ev = _BoxEvaluator(objective_fn, keys, bounds, budget)
    ev.evaluate(ev.clip(vec0))
    rng = np.random.default_rng(seed)

    global_budget = int(0.4 * (budget - 1))
    batch = max(8, 2 * dim)
    spent = 0
    while spent < global_budget and ev.remaining() > 0:
        n = min(batch, global_budget - spent, ev.remaining())
        ev.evaluate_batch(_latin_hypercube(rng, n, dim, ev.lo, ev.hi), threads)
        spent += n

    width = 0.25 * (ev.hi - ev.lo)
    local_batch = max(4, dim)
    while ev.remaining() > 0:
        n = min(local_batch, ev.remaining())
        center = ev.best_vec
        assert center is not None
        before = ev.best_value
        pts = [center + rng.uniform(-width, width, dim) for _ in range(n)]
        ev.evaluate_batch(pts, threads)
        if ev.best_value <= before:
            width = max(width * 0.7, 1e-4 * (ev.hi - ev.lo))
    return ev.result()


def _unrated_pool(config: EscapeObjectiveConfig, x0: RatingVector) -> list[int]:
    pool = [int(m) for m in config.genome.movie_ids if int(m) not in x0.entries]
    if not pool:
        raise ValueError("the user has already rated every tagged movie")
    return pool


def heuristic_far_movies(
    config: EscapeObjectiveConfig, x0: RatingVector, n_add: int
) -> RatingVector:
    """Add max ratings on the movies farthest from the user's history.

    Distance of a candidate is its mean tag distance to the rated movies;
    the n_add largest win, ties to the smaller id. Requesting more than the
    unrated pool saturates with a warning.
    """
    if n_add < 0:
        raise ValueError("n_add must be >= 0")
    if n_add == 0:
        return x0
    pool = _unrated_pool(config, x0)
    rated = sorted(int(m) for m in x0.entries if config.genome.has_movie(int(m)))
    if not rated:
        raise ValueError("none of the rated movies is in the genome")
    genome = config.genome
    p = genome.values[:, genome.cols_of(pool)]
    r = genome.values[:, genome.cols_of(rated)]
    d2 = (
        np.sum(p * p, axis=0)[:, None]
        - 2.0 * p.T @ r
        + np.sum(r * r, axis=0)[None, :]
    )
    mean_dist = np.sqrt(np.maximum(d2, 0.0)).mean(axis=1)
    if n_add > len(pool):
        log.warning("n_add %d exceeds the unrated pool (%d); adding all", n_add, len(pool))
        n_add = len(pool)
    order = sorted(range(len(pool)), key=lambda a: (-mean_dist[a], pool[a]))
    entries = dict(x0.entries)
    for a in order[:n_add]:
        entries[pool[a]] = config.hyper.rating_max
    return RatingVector(entries)


def heuristic_random_movies(
    config: EscapeObjectiveConfig, x0: RatingVector, n_add: int, seed: int
) -> RatingVector:
    """Add max ratings on a seeded uniform draw of unrated movies."""
    if n_add < 0:
        raise ValueError("n_add must be >= 0")
    if n_add == 0:
        return x0
    pool = _unrated_pool(config, x0)
    if n_add > len(pool):
        log.warning("n_add %d exceeds the unrated pool (%d); adding all", n_add, len(pool))
        n_add = len(pool)
    rng = np.random.default_rng(seed)
    picks = rng.choice(np.array(pool, dtype=np.int64), size=n_add, replace=False)
    entries = dict(x0.entries)
    for m in picks:
        entries[int(m)] = config.hyper.rating_max
    return RatingVector(entries)


def _vector_delta(current: RatingVector, best: RatingVector) -> dict:
    changed = [
        abs(best.entries[m] - current.entries[m])
        for m in current.entries
        if m in best.entries and abs(best.entries[m] - current.entries[m]) > 1e-9
    ]
    added = [m for m in best.entries if m not in current.entries]
    return {
        "n_changed": len(changed),
        "n_added": len(added),
        "max_abs_change": max(changed) if changed else 0.0,
        "mean_abs_change": float(np.mean(changed)) if changed else 0.0,
    }


def _resolve_budget(budgets: int | Mapping[str, int], name: str) -> int:
    if isinstance(budgets, int):
        return budgets
    if name not in budgets:
        raise ValueError(f"no budget given for strategy {name!r}")
    return int(budgets[name])


def run_escape_study(
    config: EscapeObjectiveConfig,
    budgets: int | Mapping[str, int],
    strategies: Iterable[str],
    threads: int = 1,
) -> EscapeReport:
    """Evaluate the baseline, run each strategy, and report best objectives.

    Optimizer strategies start from the user's current ratings plus
    config.n_addable midpoint-initialized unrated slots (seeded pick).
    Heuristics cost one evaluation each. Every strategy's reported best is
    floored at the baseline, which is always measured first. When fidelity
    overrides are active the overall winner and the baseline are re-scored
    at full fidelity into the ``highfi`` block.
    """
    strategies = list(strategies)
    unknown = [s for s in strategies if s not in STRATEGY_NAMES]
    if unknown:
        raise ValueError(f"unknown strategies: {unknown}; valid: {list(STRATEGY_NAMES)}")

    cache: dict[tuple, float] = {}

    def f(rv: RatingVector) -> float:
        key = rv.key()
        if key not in cache:
            cache[key] = objective(config, rv)
        return cache[key]

    current = current_ratings(config)
    baseline = f(current)
    x0 = _with_addable_slots(config, current)
    bounds = (config.hyper.rating_min, config.hyper.rating_max)

    results: dict[str, StrategyResult] = {}
    overall_best_x, overall_best_val = current, baseline
    for name in strategies:
        if name == "finite_difference":
            res = optimize_finite_difference(
                f, x0, bounds, _resolve_budget(budgets, name), threads=threads
            )
            best_x, best_val, used = res.best, res.best_value, res.evaluations
        elif name == "derivative_free":
            res = optimize_derivative_free(
                f, x0, bounds, _resolve_budget(budgets, name),
                seed=config.seed, threads=threads,
            )
            best_x, best_val, used = res.best, res.best_value, res.evaluations
        elif name == "heuristic_far":
            best_x = heuristic_far_movies(config, current, config.heuristic_n_add)
            best_val, used = f(best_x), 1
        else:
            best_x = heuristic_random_movies(
                config, current, config.heuristic_n_add, seed=config.seed
            )
            best_val, used = f(best_x), 1
        if best_val < baseline:
            best_x, best_val = current, baseline
        pct = None if baseline == 0 else 100.0 * (best_val - baseline) / abs(baseline)
        results[name] = StrategyResult(
            best_objective=best_val,
            evaluations_used=used,
            improvement_pct=pct,
            verdict="increased" if best_val > baseline else "no_increase",
            best_vector_delta=_vector_delta(current, best_x),
        )
        if best_val > overall_best_val:
            overall_best_x, overall_best_val = best_x, best_val
        log.info("strategy %s: best %.6f vs baseline %.6f", name, best_val, baseline)

    highfi = None
    if config.fidelity.active and strategies:
        full = replace(config, fidelity=Fidelity())
        highfi = {
            "baseline": objective(full, current),
            "best": objective(full, overall_best_x),
        }
    return EscapeReport(baseline_objective=baseline, strategies=results, highfi=highfi)


def _with_addable_slots(
    config: EscapeObjectiveConfig, current: RatingVector
) -> RatingVector:
    if config.n_addable == 0:
        return current
    pool = np.array(_unrated_pool(config, current), dtype=np.int64)
    n = min(config.n_addable, len(pool))
    if n < config.n_addable:
        log.warning("only %d unrated movies available for addable slots", n)
    rng = np.random.default_rng(config.seed + ADDABLE_SEED_OFFSET)
    picks = rng.choice(pool, size=n, replace=False)
    midpoint = 0.5 * (config.hyper.rating_min + config.hyper.rating_max)
    entries = dict(current.entries)
    for m in picks:
        entries[int(m)] = midpoint
    return RatingVector(entries)


def planted_self_test(
    dim: int = 6, fd_budget: int | None = None, df_budget: int = 2000, seed: int = 0
) -> dict:
    """Run both optimizers on a known concave quadratic and report the gaps.

    The optimum sits at all-3.0 inside the rating box with value 0, so the
    returned error fields are directly the achieved objective shortfalls.
    """
    if fd_budget is None:
        fd_budget = 500 * dim
    rng = np.random.default_rng(seed)
    x0 = RatingVector(
        {i + 1: float(v) for i, v in enumerate(rng.uniform(0.5, 5.0, dim))}
    )

    def f(rv: RatingVector) -> float:
        return -sum((r - 3.0) ** 2 for r in rv.entries.values())

    fd = optimize_finite_difference(f, x0, (0.5, 5.0), fd_budget)
    df = optimize_derivative_free(f, x0, (0.5, 5.0), df_budget, seed=seed)
    return {
        "dim": dim,
        "start_value": f(x0),
        "finite_difference": {
            "best_value": fd.best_value,
            "error": -fd.best_value,
            "evaluations": fd.evaluations,
            "budget": fd_budget,
        },
        "derivative_free": {
            "best_value": df.best_value,
            "error": -df.best_value,
            "evaluations": df.evaluations,
            "budget": df_budget,
        },
    }
