"""Synthetic corpora for fast experiments and tests.

The generator plants two content clusters: half the movies are more
relevant to the first half of the tags, the other half to the second, plus
per-movie noise. Users prefer one cluster and rate mostly inside it, with a
shared per-movie quality term so the factor model has structure to learn.

Quality also scales a movie's tag footprint: acclaimed movies spread wide
in tag space, middling ones sit near their cluster core. Recommenders work
down the quality ladder as the good unseen titles run out, so the sets they
produce drift from the wide fringe toward the tight core. That gives the
feedback loop a real diversity gradient to collapse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import RatingTable, TagRelevanceMatrix

TOY_SEED = 7


@dataclass(frozen=True)
class TwoClusterParams:
    """Knobs of the planted two-cluster corpus."""

    n_movies: int = 500
    n_tags: int = 50
    n_users: int = 200
    own_relevance: float = 0.55
    other_relevance: float = 0.35
    relevance_noise: float = 0.12
    quality_tag_spread: float = 0.9
    own_cluster_share: float = 0.8
    min_ratings: int = 30
    max_ratings: int = 60
    cluster_affinity: float = 1.1
    quality_weight: float = 0.6
    rating_noise: float = 0.35

    def __post_init__(self) -> None:
        if self.n_movies < 4 or self.n_movies % 2:
            raise ValueError("n_movies must be an even number >= 4")
        if self.n_tags < 2 or self.n_tags % 2:
            raise ValueError("n_tags must be an even number >= 2")
        if self.n_users < 2:
            raise ValueError("n_users must be >= 2")
        if not 0.0 <= self.own_cluster_share <= 1.0:
            raise ValueError("own_cluster_share must be within [0, 1]")
        if self.quality_tag_spread < 0.0:
            raise ValueError("quality_tag_spread must be >= 0")
        if not 2 <= self.min_ratings <= self.max_ratings:
            raise ValueError("need 2 <= min_ratings <= max_ratings")
        if self.max_ratings > self.n_movies:
            raise ValueError("max_ratings cannot exceed n_movies")


def movie_cluster(movie_id: int, n_movies: int) -> int:
    """Planted cluster of a movie id (first half 0, second half 1)."""
    return 0 if movie_id <= n_movies // 2 else 1


def user_cluster(user_id: int) -> int:
    """Planted preferred cluster of a user id (alternating)."""
    return (user_id - 1) % 2


def two_cluster_corpus(
    params: TwoClusterParams | None = None, seed: int = 0
) -> tuple[RatingTable, TagRelevanceMatrix]:
    """Build the planted two-cluster ratings and genome.

    Movie ids run 1..n_movies (cluster split down the middle), tag ids
    1..n_tags (ditto), user ids 1..n_users (alternating preference). Each
    movie's tag noise is scaled by its quality (quality_tag_spread). A
    user's rating is cluster affinity plus shared movie quality plus noise,
    rounded to half stars and clipped to the 0.5..5 scale.
    """
    p = params or TwoClusterParams()
    rng = np.random.default_rng(seed)

    half_tags = p.n_tags // 2
    half_movies = p.n_movies // 2
    base = np.full((p.n_tags, p.n_movies), p.other_relevance)
    base[:half_tags, :half_movies] = p.own_relevance
    base[half_tags:, half_movies:] = p.own_relevance
    quality = rng.normal(0.0, 1.0, p.n_movies)  # shared per-movie appeal
    # footprint floor 0.2 keeps even the dullest movie off the cluster core
    spread = p.relevance_noise * np.maximum(
        1.0 + p.quality_tag_spread * quality, 0.2
    )
    values = np.clip(
        base + rng.normal(0.0, 1.0, base.shape) * spread[None, :], 0.0, 1.0
    )
    genome = TagRelevanceMatrix(
        movie_ids=np.arange(1, p.n_movies + 1, dtype=np.int64),
        tag_ids=np.arange(1, p.n_tags + 1, dtype=np.int64),
        tag_names=[f"tag-{t:03d}" for t in range(1, p.n_tags + 1)],
        values=values,
    )
    users: list[int] = []
    movies: list[int] = []
    ratings: list[float] = []
    own_ids = np.arange(1, half_movies + 1, dtype=np.int64)
    other_ids = np.arange(half_movies + 1, p.n_movies + 1, dtype=np.int64)
    for user in range(1, p.n_users + 1):
        own, other = (own_ids, other_ids) if user_cluster(user) == 0 else (other_ids, own_ids)
        count = int(rng.integers(p.min_ratings, p.max_ratings + 1))
        n_own = min(round(p.own_cluster_share * count), len(own))
        n_other = min(count - n_own, len(other))
        picked = np.concatenate(
            [
                rng.choice(own, size=n_own, replace=False),
                rng.choice(other, size=n_other, replace=False),
            ]
        )
        side = np.where(np.isin(picked, own), 1.0, -1.0)
        raw = (
            3.0
            + p.cluster_affinity * side
            + p.quality_weight * quality[picked - 1]
            + rng.normal(0.0, p.rating_noise, len(picked))
        )
        stars = np.clip(np.round(raw * 2.0) / 2.0, 0.5, 5.0)
        users.extend([user] * len(picked))
        movies.extend(int(m) for m in picked)
        ratings.extend(float(r) for r in stars)
    n = len(users)
    table = RatingTable(
        np.array(users, dtype=np.int64),
        np.array(movies, dtype=np.int64),
        np.array(ratings, dtype=np.float64),
        np.arange(1, n + 1, dtype=np.int64),
    )
    return table, genome


def toy_corpus(seed: int = TOY_SEED) -> tuple[RatingTable, TagRelevanceMatrix]:
    """Tiny fixed-shape corpus for fast tests: 40 movies, 8 tags, 12 users."""
    params = TwoClusterParams(
        n_movies=40,
        n_tags=8,
        n_users=12,
        min_ratings=8,
        max_ratings=14,
    )
    return two_cluster_corpus(params, seed=seed)
