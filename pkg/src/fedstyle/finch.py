"""Parameter-free first-neighbour hierarchical clustering (FINCH).

Each point is linked to its first neighbour; the connected components of the
resulting graph form one partition. Cluster means are then clustered again,
giving a chain of successively coarser partitions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .numerics import DTYPE

METRICS = ("cosine", "euclidean")


@dataclass(frozen=True)
class PartitionHierarchy:
    """Partitions ordered finest to coarsest, each a label array over the input points."""

    levels: tuple[np.ndarray, ...]

    @property
    def counts(self) -> list[int]:
        return [int(lv.max()) + 1 for lv in self.levels]

    def level(self, which: int = -1) -> np.ndarray:
        return self.levels[which]

    def __len__(self) -> int:
        return len(self.levels)


def _similarity(points: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        norms = np.linalg.norm(points, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("cosine first neighbours need non-zero points")
        unit = points / norms[:, None]
        sim = unit @ unit.T
    elif metric == "euclidean":
        sq = np.sum(points**2, axis=1)
        sim = -(sq[:, None] + sq[None, :] - 2.0 * points @ points.T)
    else:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    np.fill_diagonal(sim, -np.inf)
    return sim


def first_neighbors(points, metric: str = "cosine") -> np.ndarray:
    """Index of each point's most similar other point, lowest index on ties."""
    pts = np.asarray(points, dtype=DTYPE)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("first_neighbors needs at least two points")
    return np.argmax(_similarity(pts, metric), axis=1)


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Relabel so clusters are numbered by first appearance."""
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first, kind="stable"), kind="stable")
    return order[inverse].astype(np.int64)


def neighbor_link_partition(points, metric: str = "cosine") -> np.ndarray:
    """One FINCH level.

    Points ``i`` and ``j`` are linked when either is the other's first
    neighbour or they share a first neighbour. Linking each point to its
    neighbour already implies the shared-neighbour case through the path
    ``i - k - j``, so the graph only needs the ``i -> kappa(i)`` edges.
    """
    kappa = first_neighbors(points, metric)
    n = kappa.size
    graph = coo_matrix((np.ones(n), (np.arange(n), kappa)), shape=(n, n))
    _, labels = connected_components(graph, directed=True, connection="weak")
    return _canonical(labels)


def _cluster_means(points: np.ndarray, labels: np.ndarray) -> np.ndarray:
    k = int(labels.max()) + 1
    sums = np.zeros((k, points.shape[1]), dtype=DTYPE)
    np.add.at(sums, labels, points)
    return sums / np.bincount(labels, minlength=k)[:, None]


def finch(points, metric: str = "cosine") -> PartitionHierarchy:
    """Full hierarchy; each coarser level is built on the previous level's cluster means.

    A recursion step that collapses everything into one cluster is not kept
    as a level, so the coarsest level still separates the top-level groups.
    The first level is always kept, even when it is already a single cluster
    (always the case for ``n <= 3``).
    """
    pts = np.asarray(points, dtype=DTYPE)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("finch needs a non-empty 2-D point array")
    n = pts.shape[0]
    if n == 1:
        return PartitionHierarchy((np.zeros(1, dtype=np.int64),))

    levels = [neighbor_link_partition(pts, metric)]
    while True:
        current = levels[-1]
        k = int(current.max()) + 1
        if k == 1:
            break
        means = _cluster_means(pts, current)
        merged = neighbor_link_partition(means, metric)
        new_k = int(merged.max()) + 1
        if new_k == 1 or new_k >= k:
            break
        levels.append(_canonical(merged[current]))
    return PartitionHierarchy(tuple(levels))


def cluster_members(labels: np.ndarray) -> list[np.ndarray]:
    """Member indices per cluster, in label order."""
    k = int(labels.max()) + 1
    return [np.flatnonzero(labels == c) for c in range(k)]
