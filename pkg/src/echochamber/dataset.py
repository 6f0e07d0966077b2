"""MovieLens-format ratings and tag-genome ingestion.

Parses ``ratings.csv`` (userId,movieId,rating,timestamp), ``genome-scores.csv``
(movieId,tagId,relevance) and ``genome-tags.csv`` (tagId,tag) into in-memory
structures, with filtering to tag-covered movies and seeded user subsampling.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np

from .errors import ParseError, ValidationError

log = logging.getLogger(__name__)

RATING_MIN = 0.5
RATING_MAX = 5.0

GENOME_CACHE_VERSION = 1


@dataclass(frozen=True)
class Rating:
    """One observed (or simulated) star rating."""

    user_id: int
    movie_id: int
    rating: float
    timestamp: int


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class RatingTable:
    """Append-only collection of ratings with per-user and per-movie row indices.

    Rows are stored as parallel column arrays. At most one rating per
    (user, movie) pair is permitted; construction rejects duplicates.
    """

    def __init__(
        self,
        users: np.ndarray,
        movies: np.ndarray,
        ratings: np.ndarray,
        timestamps: np.ndarray,
    ):
        self.users = _freeze(np.asarray(users, dtype=np.int64))
        self.movies = _freeze(np.asarray(movies, dtype=np.int64))
        self.ratings = _freeze(np.asarray(ratings, dtype=np.float64))
        self.timestamps = _freeze(np.asarray(timestamps, dtype=np.int64))
        n = len(self.users)
        if not (len(self.movies) == len(self.ratings) == len(self.timestamps) == n):
            raise ValidationError("column arrays have mismatched lengths")
        if n and (self.users.min() <= 0 or self.movies.min() <= 0):
            raise ValidationError("user and movie ids must be positive")
        self._check_unique_pairs()
        self._user_index = self._build_index(self.users)
        self._movie_index = self._build_index(self.movies)

    def _check_unique_pairs(self) -> None:
        if len(self.users) == 0:
            return
        # ids fit comfortably in 31 bits; pack the pair into one int64 key
        keys = (self.users.astype(np.int64) << 32) | self.movies.astype(np.int64)
        if len(np.unique(keys)) != len(keys):
            raise ValidationError("duplicate (user, movie) pair in rating table")

    @staticmethod
    def _build_index(ids: np.ndarray) -> dict[int, np.ndarray]:
        order = np.argsort(ids, kind="stable")
        sorted_ids = ids[order]
        uniq, starts = np.unique(sorted_ids, return_index=True)
        bounds = np.append(starts, len(ids))
        return {
            int(uniq[i]): _freeze(np.sort(order[bounds[i] : bounds[i + 1]]))
            for i in range(len(uniq))
        }

    @classmethod
    def from_rows(cls, rows: Iterable[Rating]) -> "RatingTable":
        rows = list(rows)
        return cls(
            np.array([r.user_id for r in rows], dtype=np.int64),
            np.array([r.movie_id for r in rows], dtype=np.int64),
            np.array([r.rating for r in rows], dtype=np.float64),
            np.array([r.timestamp for r in rows], dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[Rating]:
        for i in range(len(self)):
            yield self.row(i)

    def row(self, i: int) -> Rating:
        return Rating(
            int(self.users[i]),
            int(self.movies[i]),
            float(self.ratings[i]),
            int(self.timestamps[i]),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RatingTable):
            return NotImplemented
        return (
            np.array_equal(self.users, other.users)
            and np.array_equal(self.movies, other.movies)
            and np.array_equal(self.ratings, other.ratings)
            and np.array_equal(self.timestamps, other.timestamps)
        )

    @property
    def user_index(self) -> dict[int, np.ndarray]:
        return self._user_index

    @property
    def movie_index(self) -> dict[int, np.ndarray]:
        return self._movie_index

    def distinct_users(self) -> np.ndarray:
        return np.array(sorted(self._user_index), dtype=np.int64)

    def distinct_movies(self) -> np.ndarray:
        return np.array(sorted(self._movie_index), dtype=np.int64)

    def user_rows(self, user_id: int) -> np.ndarray:
        return self._user_index.get(int(user_id), np.empty(0, dtype=np.int64))

    def rated_movies(self, user_id: int) -> np.ndarray:
        """Movie ids rated by a user, in table row order."""
        return self.movies[self.user_rows(user_id)]

    def select(self, mask: np.ndarray) -> "RatingTable":
        return RatingTable(
            self.users[mask], self.movies[mask], self.ratings[mask], self.timestamps[mask]
        )

    def with_appended(
        self,
        users: np.ndarray,
        movies: np.ndarray,
        ratings: np.ndarray,
        timestamps: np.ndarray,
    ) -> "RatingTable":
        """New table with rows appended after the existing ones."""
        return RatingTable(
            np.concatenate([self.users, np.asarray(users, dtype=np.int64)]),
            np.concatenate([self.movies, np.asarray(movies, dtype=np.int64)]),
            np.concatenate([self.ratings, np.asarray(ratings, dtype=np.float64)]),
            np.concatenate([self.timestamps, np.asarray(timestamps, dtype=np.int64)]),
        )


@dataclass
class TagRelevanceMatrix:
    """Dense tag-by-movie relevance matrix with values in [0, 1].

    ``values[k, j]`` is the relevance of tag ``tag_names[k]`` to movie
    ``movie_ids[j]``. Only movies with a complete tag row survive parsing;
    ``excluded_movies`` counts the ones dropped for partial coverage.
    """

    movie_ids: np.ndarray
    tag_ids: np.ndarray
    tag_names: list[str]
    values: np.ndarray
    excluded_movies: int = 0
    _movie_col: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.movie_ids = _freeze(np.asarray(self.movie_ids, dtype=np.int64))
        self.tag_ids = _freeze(np.asarray(self.tag_ids, dtype=np.int64))
        self.values = _freeze(np.asarray(self.values, dtype=np.float64))
        if self.values.shape != (len(self.tag_names), len(self.movie_ids)):
            raise ValidationError("genome matrix shape does not match tag/movie counts")
        if len(set(self.tag_names)) != len(self.tag_names):
            raise ValidationError("tag names must be unique")
        if len(np.unique(self.movie_ids)) != len(self.movie_ids):
            raise ValidationError("movie ids must be unique")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ValidationError("relevance values must lie in [0, 1]")
        self._movie_col = {int(m): j for j, m in enumerate(self.movie_ids)}

    @property
    def n_tags(self) -> int:
        return len(self.tag_names)

    @property
    def n_movies(self) -> int:
        return len(self.movie_ids)

    def has_movie(self, movie_id: int) -> bool:
        return int(movie_id) in self._movie_col

    def col_of(self, movie_id: int) -> int:
        try:
            return self._movie_col[int(movie_id)]
        except KeyError:
            raise ValueError(f"movie {movie_id} not present in the tag genome") from None

    def cols_of(self, movie_ids: Iterable[int]) -> np.ndarray:
        return np.array([self.col_of(m) for m in movie_ids], dtype=np.int64)


@dataclass(frozen=True)
class UserSample:
    """A seeded without-replacement draw of user ids."""

    user_ids: tuple[int, ...]
    seed: int


def _open_lines(source) -> Iterable[str]:
    if isinstance(source, (str, Path)):
        return Path(source).open("r", encoding="utf-8", newline="")
    return source


def parse_ratings(stream: Iterable[str] | IO[str], header: bool = True) -> RatingTable:
    """Parse ``userId,movieId,rating,timestamp`` lines into a RatingTable.

    Duplicate (user, movie) pairs keep the rating with the latest timestamp
    (later line wins a timestamp tie). Ratings must lie in [0.5, 5.0];
    timestamp 0 is permitted for synthetic rows.
    """
    best: dict[tuple[int, int], tuple[int, int, float]] = {}
    first_seen: dict[tuple[int, int], int] = {}
    reader = csv.reader(stream)
    for lineno, fields in enumerate(reader, start=1):
        if header and lineno == 1:
            continue
        if not fields:
            continue
        if len(fields) != 4:
            raise ParseError(f"line {lineno}: expected 4 fields, got {len(fields)}")
        try:
            user = int(fields[0])
            movie = int(fields[1])
            rating = float(fields[2])
            ts = int(fields[3])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        if user <= 0 or movie <= 0:
            raise ValidationError(f"line {lineno}: user and movie ids must be positive")
        if not (RATING_MIN <= rating <= RATING_MAX):
            raise ValidationError(
                f"line {lineno}: rating {rating} outside [{RATING_MIN}, {RATING_MAX}]"
            )
        if ts < 0:
            raise ValidationError(f"line {lineno}: negative timestamp")
        key = (user, movie)
        candidate = (ts, lineno, rating)
        if key not in best:
            best[key] = candidate
            first_seen[key] = lineno
        elif candidate[:2] > best[key][:2]:
            best[key] = candidate
    keys = sorted(best, key=first_seen.__getitem__)
    return RatingTable(
        np.array([k[0] for k in keys], dtype=np.int64),
        np.array([k[1] for k in keys], dtype=np.int64),
        np.array([best[k][2] for k in keys], dtype=np.float64),
        np.array([best[k][0] for k in keys], dtype=np.int64),
    )


def load_ratings(path: str | Path, keep_movies: set[int] | None = None) -> RatingTable:
    """Load a ratings CSV file, optionally dropping rows for unlisted movies.

    ``keep_movies`` filters during the streaming parse so the full 28M-row
    MovieLens file never has to be materialized beyond the tagged subset.
    """
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        if keep_movies is None:
            return parse_ratings(fh, header=True)
        filtered = _filter_lines_by_movie(fh, keep_movies)
        return parse_ratings(filtered, header=False)


def load_movie_titles(path: str | Path) -> dict[int, str]:
    """Load ``movieId,title,genres`` rows into an id -> title mapping.

    Titles with embedded commas arrive quoted; csv handles that. The genres
    column is ignored.
    """
    titles: dict[int, str] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for lineno, fields in enumerate(reader, start=1):
            if lineno == 1 or not fields:
                continue
            if len(fields) < 2:
                raise ParseError(f"line {lineno}: expected movieId,title[,genres]")
            try:
                movie = int(fields[0])
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
            titles[movie] = fields[1]
    return titles


def _filter_lines_by_movie(lines: Iterable[str], keep: set[int]) -> Iterator[str]:
    for lineno, line in enumerate(lines, start=1):
        if lineno == 1:
            continue
        parts = line.split(",")
        if len(parts) >= 2:
            try:
                if int(parts[1]) not in keep:
                    continue
            except ValueError:
                pass  # let parse_ratings raise with a proper message
        yield line


def write_ratings(table: RatingTable, dest: str | Path | IO[str]) -> None:
    """Serialize a RatingTable back to MovieLens ratings CSV (full float precision)."""
    own = isinstance(dest, (str, Path))
    fh = Path(dest).open("w", encoding="utf-8", newline="") if own else dest
    try:
        fh.write("userId,movieId,rating,timestamp\n")
        for i in range(len(table)):
            # float() strips the numpy scalar type so !r emits plain digits
            fh.write(
                f"{table.users[i]},{table.movies[i]},{float(table.ratings[i])!r},{table.timestamps[i]}\n"
            )
    finally:
        if own:
            fh.close()


def write_genome(
    genome: TagRelevanceMatrix,
    scores_dest: str | Path | IO[str],
    tags_dest: str | Path | IO[str],
) -> None:
    """Serialize a genome to MovieLens-format scores and tags CSV files."""
    own_s = isinstance(scores_dest, (str, Path))
    own_t = isinstance(tags_dest, (str, Path))
    fs = Path(scores_dest).open("w", encoding="utf-8", newline="") if own_s else scores_dest
    ft = Path(tags_dest).open("w", encoding="utf-8", newline="") if own_t else tags_dest
    try:
        ft.write("tagId,tag\n")
        writer = csv.writer(ft, lineterminator="\n")
        for tag_id, name in zip(genome.tag_ids, genome.tag_names):
            writer.writerow([int(tag_id), name])
        fs.write("movieId,tagId,relevance\n")
        for j, movie in enumerate(genome.movie_ids):
            for k, tag_id in enumerate(genome.tag_ids):
                fs.write(f"{movie},{tag_id},{float(genome.values[k, j])!r}\n")
    finally:
        if own_s:
            fs.close()
        if own_t:
            ft.close()


def parse_genome(
    scores_stream: Iterable[str] | IO[str],
    tags_stream: Iterable[str] | IO[str],
    header: bool = True,
) -> TagRelevanceMatrix:
    """Assemble the dense tag-relevance matrix from genome scores and tag names.

    A movie is kept only when every tag has a score for it; partially covered
    movies are dropped and counted in ``excluded_movies``. Relevance values
    outside [0, 1], duplicate scores, and unknown tag ids are rejected.
    """
    tag_name_by_id: dict[int, str] = {}
    reader = csv.reader(tags_stream)
    for lineno, fields in enumerate(reader, start=1):
        if header and lineno == 1:
            continue
        if not fields:
            continue
        if len(fields) != 2:
            raise ParseError(f"tags line {lineno}: expected 2 fields, got {len(fields)}")
        try:
            tag_id = int(fields[0])
        except ValueError as exc:
            raise ParseError(f"tags line {lineno}: {exc}") from None
        if tag_id in tag_name_by_id:
            raise ValidationError(f"tags line {lineno}: duplicate tag id {tag_id}")
        tag_name_by_id[tag_id] = fields[1]
    tag_ids = sorted(tag_name_by_id)
    tag_row = {t: k for k, t in enumerate(tag_ids)}
    n_tags = len(tag_ids)
    if n_tags == 0:
        raise ValidationError("tag file defines no tags")

    columns: dict[int, np.ndarray] = {}
    filled: dict[int, int] = {}
    reader = csv.reader(scores_stream)
    for lineno, fields in enumerate(reader, start=1):
        if header and lineno == 1:
            continue
        if not fields:
            continue
        if len(fields) != 3:
            raise ParseError(f"scores line {lineno}: expected 3 fields, got {len(fields)}")
        try:
            movie = int(fields[0])
            tag_id = int(fields[1])
            rel = float(fields[2])
        except ValueError as exc:
            raise ParseError(f"scores line {lineno}: {exc}") from None
        if tag_id not in tag_row:
            raise ValidationError(f"scores line {lineno}: unknown tag id {tag_id}")
        if not (0.0 <= rel <= 1.0):
            raise ValidationError(f"scores line {lineno}: relevance {rel} outside [0, 1]")
        col = columns.get(movie)
        if col is None:
            col = np.full(n_tags, np.nan)
            columns[movie] = col
            filled[movie] = 0
        k = tag_row[tag_id]
        if not np.isnan(col[k]):
            raise ValidationError(
                f"scores line {lineno}: duplicate score for movie {movie}, tag {tag_id}"
            )
        col[k] = rel
        filled[movie] += 1

    kept = sorted(m for m, n in filled.items() if n == n_tags)
    excluded = len(columns) - len(kept)
    if excluded:
        log.warning("excluded %d movies with incomplete tag coverage", excluded)
    values = np.empty((n_tags, len(kept)))
    for j, m in enumerate(kept):
        values[:, j] = columns[m]
    return TagRelevanceMatrix(
        movie_ids=np.array(kept, dtype=np.int64),
        tag_ids=np.array(tag_ids, dtype=np.int64),
        tag_names=[tag_name_by_id[t] for t in tag_ids],
        values=values,
        excluded_movies=excluded,
    )


def _digest_files(*paths: str | Path) -> str:
    h = hashlib.sha256()
    for p in paths:
        with Path(p).open("rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def load_genome(
    scores_path: str | Path,
    tags_path: str | Path,
    cache_path: str | Path | None = None,
) -> TagRelevanceMatrix:
    """Load the genome, optionally through a versioned .npz cache.

    The cache records a digest of its source CSVs and is rebuilt whenever the
    sources change, so it is always re-derivable and never authoritative.
    """
    if cache_path is None:
        with _open_lines(scores_path) as s, _open_lines(tags_path) as t:
            return parse_genome(s, t)
    cache_path = Path(cache_path)
    digest = _digest_files(scores_path, tags_path)
    if cache_path.exists():
        with np.load(cache_path, allow_pickle=False) as npz:
            if (
                int(npz["version"]) == GENOME_CACHE_VERSION
                and str(npz["source_digest"]) == digest
            ):
                return TagRelevanceMatrix(
                    movie_ids=npz["movie_ids"],
                    tag_ids=npz["tag_ids"],
                    tag_names=[str(t) for t in npz["tag_names"]],
                    values=npz["values"],
                    excluded_movies=int(npz["excluded"]),
                )
        log.info("genome cache at %s is stale; re-parsing", cache_path)
    with _open_lines(scores_path) as s, _open_lines(tags_path) as t:
        genome = parse_genome(s, t)
    np.savez_compressed(
        cache_path,
        version=GENOME_CACHE_VERSION,
        source_digest=digest,
        movie_ids=genome.movie_ids,
        tag_ids=genome.tag_ids,
        tag_names=np.array(genome.tag_names),
        values=genome.values,
        excluded=genome.excluded_movies,
    )
    return genome


def filter_to_tagged(ratings: RatingTable, genome: TagRelevanceMatrix) -> RatingTable:
    """Restrict a rating table to movies present in the tag genome."""
    mask = np.isin(ratings.movies, genome.movie_ids)
    return ratings.select(mask)


def subsample_users(
    ratings: RatingTable, n: int, seed: int, clamp: bool = False
) -> tuple[RatingTable, UserSample]:
    """Draw n distinct users uniformly without replacement and restrict the table.

    Deterministic for a fixed (table, n, seed); row order of the surviving
    ratings is preserved. With ``clamp`` an oversized n takes every user
    (warning) instead of raising.
    """
    users = ratings.distinct_users()
    if n < 0:
        raise ValueError("sample size must be non-negative")
    if n > len(users):
        if not clamp:
            raise ValueError(f"cannot sample {n} users from {len(users)} present")
        log.warning("requested %d users but only %d exist; keeping all", n, len(users))
        sample = UserSample(user_ids=tuple(int(u) for u in users), seed=seed)
        return ratings, sample
    rng = np.random.default_rng(seed)
    chosen = rng.choice(users, size=n, replace=False)
    sample = UserSample(user_ids=tuple(int(u) for u in chosen), seed=seed)
    mask = np.isin(ratings.users, chosen)
    return ratings.select(mask), sample
