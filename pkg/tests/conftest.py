import re

import numpy as np
import pytest

from echochamber.dataset import RatingTable, TagRelevanceMatrix
from echochamber.synth import toy_corpus

# criterion number -> (status, detail), filled in by the logreport hook
_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    match = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not match:
        return
    n = int(match.group(1))
    detail = ""
    for key, value in report.user_properties:
        if key == "detail":
            detail = str(value)
    if report.when == "setup" and report.skipped:
        _ACCEPTANCE[n] = ("SKIPPED", _skip_reason(report))
    elif report.when == "call":
        if report.skipped:
            _ACCEPTANCE[n] = ("SKIPPED", _skip_reason(report) or detail)
        else:
            _ACCEPTANCE[n] = ("PASS" if report.passed else "FAIL", detail)


def _skip_reason(report) -> str:
    reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else ""
    return str(reason).removeprefix("Skipped: ")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[n]
        line = f"ACCEPTANCE {n}: {status}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy():
    """The bundled 12-user, 40-movie, 8-tag corpus."""
    return toy_corpus()


def random_genome(rng, n_tags, n_movies, movie_ids=None):
    if movie_ids is None:
        movie_ids = np.arange(1, n_movies + 1, dtype=np.int64)
    return TagRelevanceMatrix(
        movie_ids=np.asarray(movie_ids, dtype=np.int64),
        tag_ids=np.arange(1, n_tags + 1, dtype=np.int64),
        tag_names=[f"t{k}" for k in range(1, n_tags + 1)],
        values=rng.random((n_tags, n_movies)),
    )


def random_table(rng, n_users, n_movies, density=0.5):
    users, movies, ratings = [], [], []
    for u in range(1, n_users + 1):
        picked = 1 + np.flatnonzero(rng.random(n_movies) < density)
        if len(picked) == 0:
            picked = np.array([int(rng.integers(1, n_movies + 1))])
        for m in picked:
            users.append(u)
            movies.append(int(m))
            ratings.append(float(np.round(rng.uniform(0.5, 5.0) * 2) / 2))
    n = len(users)
    return RatingTable(
        np.array(users, dtype=np.int64),
        np.array(movies, dtype=np.int64),
        np.array(ratings, dtype=np.float64),
        np.arange(1, n + 1, dtype=np.int64),
    )
