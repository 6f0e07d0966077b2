"""Content-distance and set-diversity metrics in tag space.

A movie's content is its column of the tag-relevance matrix; distance between
movies is plain Euclidean distance in that space, and the diversity of a set
is the mean distance over all unordered pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .dataset import TagRelevanceMatrix


@dataclass(frozen=True)
class MovieSet:
    """Ordered, duplicate-free movie ids all present in the genome."""

    movie_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(set(self.movie_ids)) != len(self.movie_ids):
            raise ValueError("movie set contains duplicate ids")

    def __len__(self) -> int:
        return len(self.movie_ids)


def _as_ids(m: "MovieSet | Sequence[int] | Iterable[int]") -> list[int]:
    ids = list(m.movie_ids) if isinstance(m, MovieSet) else [int(x) for x in m]
    if len(set(ids)) != len(ids):
        raise ValueError("movie set contains duplicate ids")
    return ids


def tag_distance(genome: TagRelevanceMatrix, i: int, j: int) -> float:
    """Euclidean distance between two movies in tag space."""
    a = genome.values[:, genome.col_of(i)]
    b = genome.values[:, genome.col_of(j)]
    return float(np.sqrt(np.sum((a - b) ** 2)))


def set_diversity(genome: TagRelevanceMatrix, m: "MovieSet | Sequence[int]") -> float:
    """Mean pairwise tag-space distance over all unordered pairs of the set.

    The normalizer is the pair count C(|m|, 2); sets smaller than 2 have no
    pairs and are rejected. The result is independent of the order the ids
    are given in (ids are canonicalized before accumulation).
    """
    ids = sorted(_as_ids(m))
    n = len(ids)
    if n < 2:
        raise ValueError("set diversity needs at least 2 movies")
    cols = genome.cols_of(ids)
    x = genome.values[:, cols].T  # (n, n_tags), row per movie
    total = 0.0
    for a in range(n - 1):
        d = np.sqrt(np.sum((x[a + 1 :] - x[a]) ** 2, axis=1))
        total += float(d.sum())
    return total / math.comb(n, 2)


def mean_diversity(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and standard error of the mean of per-user diversities."""
    vals = np.asarray(values, dtype=np.float64)
    if len(vals) < 2:
        raise ValueError("need at least 2 diversity values to aggregate")
    mean = float(vals.mean())
    sem = float(vals.std(ddof=1) / math.sqrt(len(vals)))
    return mean, sem


def most_similar_pair(
    genome: TagRelevanceMatrix, method: str = "auto"
) -> tuple[int, int, float]:
    """The unordered movie pair at minimal tag distance, with the distance.

    Ties break lexicographically on (smaller id, larger id). ``method`` picks
    the scan: "naive" is the direct double loop, "blocked" prefilters with a
    Gram-matrix bound and re-evaluates candidates exactly, "auto" switches on
    corpus size. Both scans return identical results.
    """
    if genome.n_movies < 2:
        raise ValueError("need at least 2 movies to find the most similar pair")
    if method not in ("auto", "naive", "blocked"):
        raise ValueError(f"unknown scan method {method!r}")
    if method == "auto":
        method = "blocked" if genome.n_movies > 512 else "naive"
    if method == "naive":
        i, j = _naive_min_pair(genome.values)
    else:
        i, j = _blocked_min_pair(genome.values)
    ids = genome.movie_ids
    a, b = (int(ids[i]), int(ids[j]))
    if a > b:
        a, b = b, a
    return a, b, tag_distance(genome, a, b)


def _exact_sqdist(values: np.ndarray, i: int, j: int) -> float:
    d = values[:, i] - values[:, j]
    return float(np.sum(d * d))


def _naive_min_pair(values: np.ndarray) -> tuple[int, int]:
    m = values.shape[1]
    best = math.inf
    winner: tuple[int, int] | None = None
    for i in range(m - 1):
        diff = values[:, i + 1 :] - values[:, i : i + 1]
        sq = np.sum(diff * diff, axis=0)
        j_rel = int(np.argmin(sq))
        if sq[j_rel] < best:
            best = float(sq[j_rel])
            winner = (i, i + 1 + j_rel)
    assert winner is not None
    return winner


def _blocked_min_pair(values: np.ndarray, block: int = 256) -> tuple[int, int]:
    # Gram-trick prefilter: d2(i,j) = n_i + n_j - 2 v_i.v_j. The subtraction
    # can misorder near-ties, so every pair within a small slack of the
    # running minimum is kept and re-evaluated with the direct formula; the
    # slack comfortably covers the rounding gap between the two formulas.
    m = values.shape[1]
    norms = np.sum(values * values, axis=0)
    best = math.inf
    slack = 1e-6
    cands: list[tuple[int, int, float]] = []
    for start in range(0, m, block):
        stop = min(start + block, m)
        gram = values[:, start:stop].T @ values  # (b, m)
        d2 = norms[start:stop, None] + norms[None, :] - 2.0 * gram
        for r in range(stop - start):
            d2[r, : start + r + 1] = math.inf  # unordered pairs: keep j > i only
        best = min(best, float(d2.min()))
        rows, cols = np.nonzero(d2 <= best + slack)
        cands.extend(
            (start + int(r), int(c), float(d2[r, c])) for r, c in zip(rows, cols)
        )
        if len(cands) > 65536:
            cands = [c for c in cands if c[2] <= best + slack]
    best_exact = math.inf
    winner: tuple[int, int] | None = None
    for i, j, _ in sorted(cands):
        sq = _exact_sqdist(values, i, j)
        if sq < best_exact:
            best_exact = sq
            winner = (i, j)
    assert winner is not None
    return winner
