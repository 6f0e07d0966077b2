"""Closed-loop simulation: fit, recommend, append the predictions, refit.

Every epoch each sampled user receives their top-k unseen movies, the
predicted ratings are appended to the training table as if the user rated
exactly as predicted, and the model is refit from scratch on the grown table.
Per-epoch content diversity of the recommended sets is logged along the way.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO

import numpy as np

from .dataset import RatingTable, TagRelevanceMatrix, UserSample, filter_to_tagged, subsample_users
from .diversity import mean_diversity, set_diversity
from .recommender import FactorModel, Hyperparams, fit, top_k_unseen

log = logging.getLogger(__name__)

# Seed derivation: the history subsample draws from config.seed, the simulated
# population from config.seed + 1, and the model refit after epoch e (0 = the
# initial fit) from hyper.seed + e.
POPULATION_SEED_OFFSET = 1


@dataclass(frozen=True)
class SimConfig:
    """Closed-loop experiment configuration."""

    n_users: int = 100
    k_per_epoch: int = 100
    n_epochs: int = 40
    history_users: int = 1000
    hyper: Hyperparams = field(default_factory=Hyperparams)
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_users", "k_per_epoch", "n_epochs", "history_users"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_users > self.history_users:
            raise ValueError("n_users cannot exceed history_users")


@dataclass(frozen=True)
class MeanSem:
    mean: float
    sem: float


@dataclass
class EpochStats:
    """Diversity statistics for one epoch.

    ``user_ids`` and ``per_user_diversity`` cover the users that received at
    least two recommendations (a diversity value needs a pair); users whose
    candidate pool was already exhausted appear in ``frozen_users`` instead.
    """

    epoch: int
    user_ids: list[int]
    per_user_diversity: list[float]
    mean: float
    sem: float
    frozen_users: list[int]


@dataclass
class DiversityTrace:
    """Full record of a simulation run."""

    baseline: MeanSem
    per_epoch: list[EpochStats]
    recommendations: list[dict[int, list[tuple[int, float]]]]

    def epoch_stats(self, epoch: int) -> EpochStats:
        if not 1 <= epoch <= len(self.per_epoch):
            raise ValueError(f"epoch {epoch} outside 1..{len(self.per_epoch)}")
        return self.per_epoch[epoch - 1]


@dataclass
class SimState:
    """Mutable loop state threaded through step_epoch."""

    table: RatingTable
    model: FactorModel
    sample: UserSample
    seen: dict[int, set[int]]
    frozen: set[int]


def baseline_diversity(
    ratings: RatingTable, sample: UserSample, genome: TagRelevanceMatrix
) -> MeanSem:
    """Mean/sem of per-user history diversity before any system exposure.

    Users with fewer than two tagged rated movies are excluded with a warning;
    at least two users must survive.
    """
    values = []
    skipped = 0
    for user in sample.user_ids:
        movies = [int(m) for m in ratings.rated_movies(user) if genome.has_movie(int(m))]
        if len(set(movies)) < 2:
            skipped += 1
            continue
        values.append(set_diversity(genome, sorted(set(movies))))
    if skipped:
        log.warning("baseline diversity: skipped %d users with <2 tagged ratings", skipped)
    if not values:
        raise ValueError("no sampled user has enough tagged ratings for a baseline")
    mean, sem = mean_diversity(values)
    return MeanSem(mean, sem)


def step_epoch(
    state: SimState,
    genome: TagRelevanceMatrix,
    config: SimConfig,
    epoch: int,
    threads: int = 1,
) -> tuple[EpochStats, dict[int, list[tuple[int, float]]]]:
    """Advance the loop by one epoch, mutating ``state`` in place.

    Each active user gets top-k unseen recommendations over the whole tagged
    candidate pool; the predicted ratings are appended (timestamp 0) and the
    model is refit on the grown table with the epoch-derived seed. Users with
    an exhausted pool are frozen and flagged, never fatal.
    """
    candidates = set(int(m) for m in genome.movie_ids)
    recs = _score_users(state, candidates, config, threads)

    new_users: list[int] = []
    new_movies: list[int] = []
    new_ratings: list[float] = []
    user_ids: list[int] = []
    per_user: list[float] = []
    epoch_recs: dict[int, list[tuple[int, float]]] = {}
    for user in state.sample.user_ids:
        user_recs = recs.get(user)
        if not user_recs:
            if user not in state.frozen:
                log.warning("user %d exhausted the candidate pool; frozen", user)
            state.frozen.add(user)
            continue
        epoch_recs[user] = user_recs
        movie_ids = [m for m, _ in user_recs]
        new_users.extend([user] * len(user_recs))
        new_movies.extend(movie_ids)
        new_ratings.extend(p for _, p in user_recs)
        state.seen[user].update(movie_ids)
        if len(movie_ids) >= 2:
            user_ids.append(user)
            per_user.append(set_diversity(genome, movie_ids))

    state.table = state.table.with_appended(
        np.array(new_users, dtype=np.int64),
        np.array(new_movies, dtype=np.int64),
        np.array(new_ratings, dtype=np.float64),
        np.zeros(len(new_users), dtype=np.int64),
    )
    state.model = fit(state.table, replace(config.hyper, seed=config.hyper.seed + epoch))

    if len(per_user) >= 2:
        mean, sem = mean_diversity(per_user)
    elif len(per_user) == 1:
        mean, sem = per_user[0], math.nan
    else:
        log.warning("epoch %d: no user received enough recommendations to measure", epoch)
        mean, sem = math.nan, math.nan
    stats = EpochStats(
        epoch=epoch,
        user_ids=user_ids,
        per_user_diversity=per_user,
        mean=mean,
        sem=sem,
        frozen_users=sorted(state.frozen),
    )
    return stats, epoch_recs


def _score_users(
    state: SimState, candidates: set[int], config: SimConfig, threads: int
) -> dict[int, list[tuple[int, float]]]:
    # Read-only model scoring; safe to fan out, and per-user results are
    # independent of the worker count.
    active = [u for u in state.sample.user_ids if u not in state.frozen]

    def score(user: int) -> list[tuple[int, float]]:
        return top_k_unseen(
            state.model, user, state.seen[user], candidates, config.k_per_epoch
        )

    if threads <= 1 or len(active) <= 1:
        return {u: score(u) for u in active}
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(score, active))
    return dict(zip(active, results))


def run_simulation(
    ratings: RatingTable,
    genome: TagRelevanceMatrix,
    config: SimConfig,
    threads: int = 1,
) -> DiversityTrace:
    """Run the full closed loop and return the diversity trace.

    The incoming table is filtered to tagged movies, a history subsample is
    drawn, the initial model is fitted, and the simulated population is drawn
    from the history. Simulated users accept every recommendation at exactly
    the predicted rating.
    """
    table = filter_to_tagged(ratings, genome)
    if len(table) == 0:
        raise ValueError("no ratings remain after filtering to tagged movies")
    history, _ = subsample_users(table, config.history_users, seed=config.seed, clamp=True)
    population_table, sample = subsample_users(
        history, config.n_users, seed=config.seed + POPULATION_SEED_OFFSET
    )
    del population_table  # the loop trains on the full history table
    baseline = baseline_diversity(history, sample, genome)

    model = fit(history, config.hyper)
    seen = {u: set(int(m) for m in history.rated_movies(u)) for u in sample.user_ids}
    state = SimState(table=history, model=model, sample=sample, seen=seen, frozen=set())

    per_epoch: list[EpochStats] = []
    recommendations: list[dict[int, list[tuple[int, float]]]] = []
    for epoch in range(1, config.n_epochs + 1):
        stats, recs = step_epoch(state, genome, config, epoch, threads=threads)
        per_epoch.append(stats)
        recommendations.append(recs)
        log.info(
            "epoch %d/%d: mean diversity %.4f (sem %.4f), %d frozen",
            epoch, config.n_epochs, stats.mean, stats.sem, len(stats.frozen_users),
        )
    return DiversityTrace(
        baseline=baseline, per_epoch=per_epoch, recommendations=recommendations
    )


def significance(trace: DiversityTrace, epoch: int) -> float:
    """Distance between baseline and epoch means in combined-sem units.

    Zero-sem pairs degenerate: equal means give 0, differing means give the
    +infinity sentinel (the difference is exact).
    """
    stats = trace.epoch_stats(epoch)
    num = abs(trace.baseline.mean - stats.mean)
    den = math.sqrt(trace.baseline.sem**2 + stats.sem**2)
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def write_trace_csv(trace: DiversityTrace, dest: str | Path | IO[str]) -> None:
    """Per-user per-epoch diversity rows: epoch, user_id, diversity."""
    _write_csv(
        dest,
        ["epoch", "user_id", "diversity"],
        (
            [stats.epoch, user, repr(value)]
            for stats in trace.per_epoch
            for user, value in zip(stats.user_ids, stats.per_user_diversity)
        ),
    )


def write_summary_csv(trace: DiversityTrace, dest: str | Path | IO[str]) -> None:
    """Per-epoch aggregates: epoch, mean, sem, significance_vs_baseline."""
    _write_csv(
        dest,
        ["epoch", "mean", "sem", "significance_vs_baseline"],
        (
            [
                stats.epoch,
                repr(stats.mean),
                repr(stats.sem),
                repr(significance(trace, stats.epoch)),
            ]
            for stats in trace.per_epoch
        ),
    )


def write_recs_csv(trace: DiversityTrace, dest: str | Path | IO[str]) -> None:
    """Recommendation log: epoch, user_id, movie_id, predicted_rating."""
    _write_csv(
        dest,
        ["epoch", "user_id", "movie_id", "predicted_rating"],
        (
            [epoch_no, user, movie, repr(pred)]
            for epoch_no, epoch_recs in enumerate(trace.recommendations, start=1)
            for user, user_recs in epoch_recs.items()
            for movie, pred in user_recs
        ),
    )


def _write_csv(dest: str | Path | IO[str], header: list[str], rows) -> None:
    own = isinstance(dest, (str, Path))
    fh = Path(dest).open("w", encoding="utf-8", newline="") if own else dest
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    finally:
        if own:
            fh.close()
