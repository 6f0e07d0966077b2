"""Biased matrix-factorization recommender trained by SGD.

Predicted rating for user u and item i is mu + b_u + b_i + p_u . q_i, with
missing terms treated as zero for ids unseen at fit time and the result
clamped to the rating range. Training minimizes the regularized squared error
over observed ratings by per-rating stochastic gradient steps in a seeded
shuffled order, so a fixed seed gives a bit-reproducible model.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from .dataset import RatingTable

log = logging.getLogger(__name__)

MODEL_FORMAT = "factor-model"
MODEL_VERSION = 1


@dataclass(frozen=True)
class Hyperparams:
    """Training configuration for the factor model.

    n_factors=0 is the degenerate bias-only mode (no latent factors).
    """

    n_factors: int = 100
    n_sgd_epochs: int = 20
    learning_rate: float = 0.005
    regularization: float = 0.02
    rating_min: float = 0.5
    rating_max: float = 5.0
    init_std: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_factors < 0:
            raise ValueError("n_factors must be >= 0")
        if self.n_sgd_epochs < 0:
            raise ValueError("n_sgd_epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.regularization < 0:
            raise ValueError("regularization must be non-negative")
        if not self.rating_min < self.rating_max:
            raise ValueError("rating_min must be below rating_max")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")


@njit(cache=True)
def _sgd_pass(u_idx, i_idx, ratings, order, mu, bu, bi, p, q, lr, reg):
    n_factors = p.shape[1]
    for t in range(order.shape[0]):
        row = order[t]
        u = u_idx[row]
        i = i_idx[row]
        dot = 0.0
        for f in range(n_factors):
            dot += p[u, f] * q[i, f]
        err = ratings[row] - (mu + bu[u] + bi[i] + dot)
        bu[u] += lr * (err - reg * bu[u])
        bi[i] += lr * (err - reg * bi[i])
        for f in range(n_factors):
            puf = p[u, f]
            qif = q[i, f]
            p[u, f] = puf + lr * (err * qif - reg * puf)
            q[i, f] = qif + lr * (err * puf - reg * qif)


class FactorModel:
    """Learned parameters of the biased matrix-factorization recommender."""

    def __init__(
        self,
        global_mean: float,
        user_ids: np.ndarray,
        item_ids: np.ndarray,
        user_bias: np.ndarray,
        item_bias: np.ndarray,
        user_factors: np.ndarray,
        item_factors: np.ndarray,
        rating_min: float,
        rating_max: float,
    ):
        self.global_mean = float(global_mean)
        self.user_ids = np.asarray(user_ids, dtype=np.int64)
        self.item_ids = np.asarray(item_ids, dtype=np.int64)
        self.user_bias = np.asarray(user_bias, dtype=np.float64)
        self.item_bias = np.asarray(item_bias, dtype=np.float64)
        self.user_factors = np.asarray(user_factors, dtype=np.float64)
        self.item_factors = np.asarray(item_factors, dtype=np.float64)
        self.rating_min = float(rating_min)
        self.rating_max = float(rating_max)
        if self.user_factors.shape[0] != len(self.user_ids):
            raise ValueError("user factor rows must match user ids")
        if self.item_factors.shape[0] != len(self.item_ids):
            raise ValueError("item factor rows must match item ids")
        if self.user_factors.shape[1] != self.item_factors.shape[1]:
            raise ValueError("user and item factor widths differ")
        self._user_pos = {int(u): k for k, u in enumerate(self.user_ids)}
        self._item_pos = {int(i): k for k, i in enumerate(self.item_ids)}

    @property
    def n_factors(self) -> int:
        return self.user_factors.shape[1]

    @property
    def known_users(self) -> set[int]:
        return set(self._user_pos)

    @property
    def known_items(self) -> set[int]:
        return set(self._item_pos)

    def score_items(self, user, item_ids: np.ndarray) -> np.ndarray:
        """Clamped predicted ratings for one user over an array of item ids."""
        item_ids = np.asarray(item_ids, dtype=np.int64)
        upos = self._user_pos.get(int(user))
        base = self.global_mean
        if upos is not None:
            base += self.user_bias[upos]
        preds = np.full(len(item_ids), base)
        ipos = np.array(
            [self._item_pos.get(int(i), -1) for i in item_ids], dtype=np.int64
        )
        known = ipos >= 0
        if known.any():
            cols = ipos[known]
            preds[known] += self.item_bias[cols]
            if upos is not None and self.n_factors:
                preds[known] += self.item_factors[cols] @ self.user_factors[upos]
        return np.clip(preds, self.rating_min, self.rating_max)


def fit(ratings: RatingTable, hyper: Hyperparams) -> FactorModel:
    """Train the factor model on a rating table.

    Factors start from N(0, init_std^2) draws, biases from zero, and the
    global mean is the plain mean of the observed ratings. Each SGD epoch
    visits every rating once in a freshly drawn seeded shuffle.
    """
    if len(ratings) == 0:
        raise ValueError("cannot fit a model to an empty rating table")
    user_ids = ratings.distinct_users()
    item_ids = ratings.distinct_movies()
    u_pos = {int(u): k for k, u in enumerate(user_ids)}
    i_pos = {int(i): k for k, i in enumerate(item_ids)}
    u_idx = np.array([u_pos[int(u)] for u in ratings.users], dtype=np.int64)
    i_idx = np.array([i_pos[int(i)] for i in ratings.movies], dtype=np.int64)
    values = np.asarray(ratings.ratings, dtype=np.float64)
    mu = float(values.mean())

    rng = np.random.default_rng(hyper.seed)
    p = rng.normal(0.0, hyper.init_std, (len(user_ids), hyper.n_factors))
    q = rng.normal(0.0, hyper.init_std, (len(item_ids), hyper.n_factors))
    bu = np.zeros(len(user_ids))
    bi = np.zeros(len(item_ids))
    for _ in range(hyper.n_sgd_epochs):
        order = rng.permutation(len(values))
        _sgd_pass(
            u_idx, i_idx, values, order, mu, bu, bi, p, q,
            hyper.learning_rate, hyper.regularization,
        )
    return FactorModel(
        global_mean=mu,
        user_ids=user_ids,
        item_ids=item_ids,
        user_bias=bu,
        item_bias=bi,
        user_factors=p,
        item_factors=q,
        rating_min=hyper.rating_min,
        rating_max=hyper.rating_max,
    )


def predict(model: FactorModel, user, item) -> float:
    """Clamped predicted rating; unknown user or item terms contribute zero."""
    return float(model.score_items(user, np.array([int(item)], dtype=np.int64))[0])


def top_k_unseen(
    model: FactorModel,
    user,
    seen: set[int] | Iterable[int],
    candidates: set[int] | Iterable[int],
    k: int,
) -> list[tuple[int, float]]:
    """The k unseen candidates with the highest predicted rating, descending.

    Ties break toward the smaller item id; fewer than k pairs come back only
    when the unseen pool is exhausted.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    seen = seen if isinstance(seen, set) else set(seen)
    pool = [c for c in candidates if c not in seen]
    if not pool:
        return []
    items = np.array(sorted(pool), dtype=np.int64)
    preds = model.score_items(user, items)
    order = np.lexsort((items, -preds))[:k]
    return [(int(items[o]), float(preds[o])) for o in order]


def rmse(model: FactorModel, holdout: RatingTable) -> float:
    """Root-mean-square prediction error over a holdout table."""
    if len(holdout) == 0:
        raise ValueError("holdout table is empty")
    sq = 0.0
    for user in holdout.distinct_users():
        rows = holdout.user_rows(int(user))
        preds = model.score_items(int(user), holdout.movies[rows])
        sq += float(np.sum((holdout.ratings[rows] - preds) ** 2))
    return float(np.sqrt(sq / len(holdout)))


def save_model(model: FactorModel, path: str | Path) -> None:
    """Write the model as versioned JSON (exact float round-trip)."""
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "global_mean": model.global_mean,
        "rating_min": model.rating_min,
        "rating_max": model.rating_max,
        "n_factors": model.n_factors,
        "user_ids": model.user_ids.tolist(),
        "item_ids": model.item_ids.tolist(),
        "user_bias": model.user_bias.tolist(),
        "item_bias": model.item_bias.tolist(),
        "user_factors": model.user_factors.tolist(),
        "item_factors": model.item_factors.tolist(),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_model(path: str | Path) -> FactorModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise ValueError(f"{path} is not a supported model file")
    n_users = len(doc["user_ids"])
    n_items = len(doc["item_ids"])
    n_factors = doc["n_factors"]
    return FactorModel(
        global_mean=doc["global_mean"],
        user_ids=np.array(doc["user_ids"], dtype=np.int64),
        item_ids=np.array(doc["item_ids"], dtype=np.int64),
        user_bias=np.array(doc["user_bias"], dtype=np.float64),
        item_bias=np.array(doc["item_bias"], dtype=np.float64),
        user_factors=np.array(doc["user_factors"], dtype=np.float64).reshape(
            n_users, n_factors
        ),
        item_factors=np.array(doc["item_factors"], dtype=np.float64).reshape(
            n_items, n_factors
        ),
        rating_min=doc["rating_min"],
        rating_max=doc["rating_max"],
    )


def train_test_split(
    ratings: RatingTable, test_fraction: float, seed: int
) -> tuple[RatingTable, RatingTable]:
    """Seeded row-level split into train and test tables."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    n = len(ratings)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    test_mask = np.zeros(n, dtype=bool)
    test_mask[perm[:n_test]] = True
    return ratings.select(~test_mask), ratings.select(test_mask)
