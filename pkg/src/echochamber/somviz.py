"""Self-organizing map over tags plus the node-highlight rule.

Each tag is one training sample: its relevance row across all movies. The
trained map places similar tags on nearby grid nodes, Ward clustering colors
the nodes into groups, and a movie set lights up the nodes whose tags it is
unusually relevant for. Everything downstream of training is pure.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .dataset import TagRelevanceMatrix
from .diversity import MovieSet

log = logging.getLogger(__name__)

FINAL_LEARNING_RATE = 0.01
FINAL_RADIUS = 0.5
DEFAULT_GROUPS = 8
DEFAULT_PERCENTILE = 80.0
ITERATIONS_PER_TAG = 500


@dataclass(frozen=True)
class SomConfig:
    """Kohonen training configuration.

    ``train_iterations=None`` means 500 per tag; ``initial_radius=None``
    means half the larger grid side. The learning rate and radius decay
    linearly to their floors over the run.
    """

    grid_rows: int = 10
    grid_cols: int = 10
    train_iterations: int | None = None
    initial_learning_rate: float = 0.5
    initial_radius: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ValueError("grid sides must be >= 1")
        if self.grid_rows * self.grid_cols < 2:
            raise ValueError("the grid needs at least 2 nodes")
        if self.train_iterations is not None and self.train_iterations < 0:
            raise ValueError("train_iterations must be >= 0")
        if self.initial_learning_rate <= 0:
            raise ValueError("initial_learning_rate must be positive")
        if self.initial_radius is not None and self.initial_radius <= 0:
            raise ValueError("initial_radius must be positive")

    @property
    def n_nodes(self) -> int:
        return self.grid_rows * self.grid_cols

    def resolved_iterations(self, n_tags: int) -> int:
        if self.train_iterations is not None:
            return self.train_iterations
        return ITERATIONS_PER_TAG * n_tags

    def resolved_radius(self) -> float:
        if self.initial_radius is not None:
            return self.initial_radius
        return max(self.grid_rows, self.grid_cols) / 2.0


@dataclass
class SomMap:
    """Trained map: prototypes, tag placement, node grouping, grid shape."""

    prototypes: np.ndarray  # (n_nodes, n_movies)
    tag_assignment: dict[int, int]  # tag id -> node index (row-major)
    node_groups: dict[int, int]  # node index -> contiguous group id
    grid_rows: int
    grid_cols: int

    @property
    def n_nodes(self) -> int:
        return self.prototypes.shape[0]

    def node_position(self, node: int) -> tuple[int, int]:
        if not 0 <= node < self.n_nodes:
            raise ValueError(f"node {node} outside 0..{self.n_nodes - 1}")
        return divmod(node, self.grid_cols)

    def node_tags(self) -> dict[int, list[int]]:
        """Tag ids per node, ascending, empty nodes included."""
        out: dict[int, list[int]] = {n: [] for n in range(self.n_nodes)}
        for tag in sorted(self.tag_assignment):
            out[self.tag_assignment[tag]].append(tag)
        return out


@dataclass(frozen=True)
class HighlightMask:
    highlighted: frozenset[int]
    threshold_percentile: float = DEFAULT_PERCENTILE


def _grid_sqdist(rows: int, cols: int) -> np.ndarray:
    coords = np.array([divmod(n, cols) for n in range(rows * cols)], dtype=np.float64)
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sum(diff * diff, axis=2)


def train_som(genome: TagRelevanceMatrix, config: SomConfig) -> SomMap:
    """Classic sequential Kohonen training over the tag rows.

    Prototypes start uniform in [0,1) from the seeded generator; each
    iteration presents one tag (seeded reshuffle every sweep), finds the
    best-matching unit by L2 with lowest-index tie-break, and pulls every
    prototype toward the sample under a Gaussian neighborhood. Zero
    iterations leave the random prototypes untouched.
    """
    n_tags = genome.n_tags
    n_nodes = config.n_nodes
    if n_tags < n_nodes:
        log.warning("fewer tags (%d) than nodes (%d); some nodes stay empty", n_tags, n_nodes)
    samples = np.ascontiguousarray(genome.values, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    prototypes = rng.random((n_nodes, samples.shape[1]))

    total = config.resolved_iterations(n_tags)
    alpha0 = config.initial_learning_rate
    radius0 = config.resolved_radius()
    grid_d2 = _grid_sqdist(config.grid_rows, config.grid_cols)
    denom = max(total - 1, 1)
    t = 0
    while t < total:
        for s in rng.permutation(n_tags):
            if t >= total:
                break
            frac = t / denom
            alpha = alpha0 + (FINAL_LEARNING_RATE - alpha0) * frac
            radius = radius0 + (FINAL_RADIUS - radius0) * frac
            x = samples[s]
            bmu = int(np.argmin(np.sum((prototypes - x) ** 2, axis=1)))
            h = np.exp(-grid_d2[bmu] / (2.0 * radius * radius))
            prototypes += (alpha * h)[:, None] * (x - prototypes)
            t += 1

    assignment = _assign_tags(genome, prototypes)
    if n_tags > 1 and len(set(assignment.values())) == 1:
        log.warning("all %d tags share one node; the genome looks degenerate", n_tags)
    groups = _cluster_prototypes(prototypes, min(DEFAULT_GROUPS, n_nodes))
    return SomMap(
        prototypes=prototypes,
        tag_assignment=assignment,
        node_groups=groups,
        grid_rows=config.grid_rows,
        grid_cols=config.grid_cols,
    )


def _assign_tags(genome: TagRelevanceMatrix, prototypes: np.ndarray) -> dict[int, int]:
    d2 = (
        np.sum(genome.values**2, axis=1)[:, None]
        - 2.0 * genome.values @ prototypes.T
        + np.sum(prototypes**2, axis=1)[None, :]
    )
    bmus = np.argmin(d2, axis=1)  # first minimum: lowest node index on ties
    return {int(tag): int(node) for tag, node in zip(genome.tag_ids, bmus)}


def quantization_error(som: SomMap, genome: TagRelevanceMatrix) -> float:
    """Mean L2 distance from each tag vector to its BMU prototype."""
    d2 = (
        np.sum(genome.values**2, axis=1)[:, None]
        - 2.0 * genome.values @ som.prototypes.T
        + np.sum(som.prototypes**2, axis=1)[None, :]
    )
    return float(np.mean(np.sqrt(np.maximum(d2.min(axis=1), 0.0))))


def _cluster_prototypes(prototypes: np.ndarray, n_groups: int) -> dict[int, int]:
    n = prototypes.shape[0]
    if n_groups == 1 or n == 1:
        return {i: 0 for i in range(n)}
    labels = fcluster(linkage(prototypes, method="ward"), t=n_groups, criterion="maxclust")
    relabel: dict[int, int] = {}
    groups: dict[int, int] = {}
    for node in range(n):  # contiguous ids in order of first appearance
        raw = int(labels[node])
        if raw not in relabel:
            relabel[raw] = len(relabel)
        groups[node] = relabel[raw]
    return groups


def cluster_nodes(som: SomMap, n_groups: int) -> dict[int, int]:
    """Ward-linkage grouping of node prototypes, cut at n_groups clusters.

    Group ids are contiguous from 0 in order of first appearance over the
    node index, so the labeling is deterministic.
    """
    if not 1 <= n_groups <= som.n_nodes:
        raise ValueError(f"n_groups must be within 1..{som.n_nodes}")
    return _cluster_prototypes(som.prototypes, n_groups)


def nearest_rank_threshold(values: np.ndarray, percentile: float) -> float:
    """Nearest-rank percentile: the value at rank ceil(p/100 * n), 1-based."""
    n = len(values)
    if n == 0:
        raise ValueError("percentile of an empty sample")
    rank = min(max(math.ceil(percentile / 100.0 * n), 1), n)
    return float(np.sort(values)[rank - 1])


def highlight_nodes(
    som: SomMap,
    genome: TagRelevanceMatrix,
    m: MovieSet | list[int],
    percentile: float = DEFAULT_PERCENTILE,
) -> HighlightMask:
    """Nodes holding a tag whose mean relevance over m beats its percentile.

    Per tag, the threshold is the percentile of that tag's relevance over all
    movies (nearest rank), and the comparison is strict, so a constant tag
    never qualifies. Unhighlighted nodes are the white ones in a rendering.
    """
    ids = list(m.movie_ids) if isinstance(m, MovieSet) else [int(x) for x in m]
    if not ids:
        raise ValueError("highlight needs at least one movie")
    if not 0.0 <= percentile <= 100.0:
        raise ValueError("percentile must be within [0, 100]")
    cols = genome.cols_of(ids)
    avg = genome.values[:, cols].mean(axis=1)
    n_movies = genome.n_movies
    rank = min(max(math.ceil(percentile / 100.0 * n_movies), 1), n_movies)
    thresholds = np.sort(genome.values, axis=1)[:, rank - 1]
    lit: set[int] = set()
    for row, tag in enumerate(genome.tag_ids):
        if avg[row] > thresholds[row]:
            lit.add(som.tag_assignment[int(tag)])
    return HighlightMask(highlighted=frozenset(lit), threshold_percentile=float(percentile))


def export_som(
    som: SomMap,
    genome: TagRelevanceMatrix,
    mask: HighlightMask | None = None,
) -> dict:
    """JSON-ready document: grid, groups, highlight flags, weighted tag lists.

    Tag weights are mean relevance over all movies (word-cloud sizes), listed
    largest first with ascending-id tie-break.
    """
    tag_name = {int(t): name for t, name in zip(genome.tag_ids, genome.tag_names)}
    tag_weight = {
        int(t): float(w) for t, w in zip(genome.tag_ids, genome.values.mean(axis=1))
    }
    by_node = som.node_tags()
    lit = mask.highlighted if mask is not None else frozenset()
    nodes = []
    for node in range(som.n_nodes):
        row, col = som.node_position(node)
        tags = sorted(by_node[node], key=lambda t: (-tag_weight[t], t))
        nodes.append(
            {
                "node": node,
                "row": row,
                "col": col,
                "group": som.node_groups[node],
                "highlighted": node in lit,
                "tags": [
                    {"id": t, "name": tag_name[t], "weight": tag_weight[t]}
                    for t in tags
                ],
            }
        )
    doc = {
        "grid": {"rows": som.grid_rows, "cols": som.grid_cols},
        "nodes": nodes,
    }
    if mask is not None:
        doc["threshold_percentile"] = mask.threshold_percentile
    return doc


def import_som(doc: dict) -> tuple[dict[int, int], dict[int, int]]:
    """Recover (tag_assignment, node_groups) from an exported document."""
    assignment: dict[int, int] = {}
    groups: dict[int, int] = {}
    for node in doc["nodes"]:
        groups[int(node["node"])] = int(node["group"])
        for tag in node["tags"]:
            assignment[int(tag["id"])] = int(node["node"])
    return assignment, groups


def write_som_json(doc: dict, dest: str | Path | IO[str]) -> None:
    own = isinstance(dest, (str, Path))
    fh = Path(dest).open("w", encoding="utf-8", newline="") if own else dest
    try:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    finally:
        if own:
            fh.close()


def write_highlights_csv(
    som: SomMap,
    masks: dict[int, HighlightMask],
    dest: str | Path | IO[str],
) -> None:
    """One row per (epoch, node): epoch, node_row, node_col, highlighted."""
    own = isinstance(dest, (str, Path))
    fh = Path(dest).open("w", encoding="utf-8", newline="") if own else dest
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "node_row", "node_col", "highlighted"])
        for epoch in sorted(masks):
            lit = masks[epoch].highlighted
            for node in range(som.n_nodes):
                row, col = som.node_position(node)
                writer.writerow([epoch, row, col, int(node in lit)])
    finally:
        if own:
            fh.close()
