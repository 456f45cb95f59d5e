"""
Pseudo hierarchical semantics extracted in the tangent space.

K-means first reduces the items to a few hundred sub-clusters, which are then merged
bottom-up, two closest prototypes at a time, until each predefined level count is reached.
"""

import heapq
from dataclasses import (
    dataclass,
    field,
    replace,
)
from typing import (
    List,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np
import torch
from sklearn.cluster import KMeans
from torch import Tensor

from src.errors import InvalidArgumentError
from src.geometry import (
    DTYPE,
    lift_tangent,
)
from src.logger import logger

KMEANS_ITERATIONS = 20


@dataclass
class KMeansResult:
    """Outcome of a k-means run."""

    assignments: np.ndarray
    """Cluster of every item, shape `(N,)`."""
    centroids: np.ndarray
    """Centroids, shape `(K0, D)`; each is the mean of its members."""
    sizes: np.ndarray
    """Number of members of every cluster, shape `(K0,)`."""
    inertia: float
    """Within-cluster sum of squares of the assignments."""


@dataclass
class Merge:
    """One step of the bottom-up merging."""

    a: int
    b: int
    merged: int
    distance: float


@dataclass
class Agglomeration:
    """Snapshots of the bottom-up merging, one per target count."""

    labels: List[np.ndarray]
    """Per level, cluster of every initial sub-cluster."""
    prototypes: List[np.ndarray]
    """Per level, size-weighted mean of the merged centroids."""
    merges: List[Merge]


@dataclass
class HierarchyLevel:
    """One clustering level of the hierarchy."""

    index: int
    n_clusters: int
    assignments: np.ndarray
    """Cluster of every item, shape `(N,)`."""
    prototypes: np.ndarray
    """Mean tangent vector of every cluster, shape `(N_l, M*(d+1))`."""
    lifted_prototypes: Optional[Tensor] = None
    """Prototypes mapped to the product manifold, shape `(N_l, M, d+1)`."""
    members: List[np.ndarray] = field(default_factory=list)
    """Sorted item ids of every cluster."""


@dataclass
class Hierarchy:
    """Nested clustering levels, from the finest to the coarsest."""

    levels: List[HierarchyLevel]
    merges: List[Merge] = field(default_factory=list)

    @property
    def depth(self) -> int:
        """Number of levels L."""
        return len(self.levels)

    def sample_instance_positive(
        self,
        item: int,
        level: int,
        rng: np.random.Generator,
        pool: Optional[np.ndarray] = None,
    ) -> int:
        """
        Draw another member of the cluster of an item.

        Args:
            item (int): The item.
            level (int): The level of the hierarchy.
            rng (np.random.Generator): Random generator.
            pool (Optional[np.ndarray]): Item ids the draw is restricted to (e.g. the current batch).

        Returns:
            int: A uniformly drawn cluster mate, or `item` itself when it has none.
        """
        current = self.levels[level]
        members = current.members[int(current.assignments[item])]
        if pool is not None:
            members = members[np.isin(members, pool)]

        candidates = members[members != item]
        if candidates.size == 0:
            return item

        return int(candidates[rng.integers(candidates.size)])


def _repair_empty_clusters(
    vectors: np.ndarray,
    assignments: np.ndarray,
    centroids: np.ndarray,
) -> None:
    k = centroids.shape[0]
    while (sizes := np.bincount(assignments, minlength=k)).min() == 0:
        empty = int(np.argmin(sizes))
        largest = int(np.argmax(sizes))
        members = np.flatnonzero(assignments == largest)
        spread = np.sum((vectors[members] - centroids[largest]) ** 2, axis=1)
        farthest = int(members[np.argmax(spread)])

        logger.warning(f'Empty cluster `{empty}` takes item `{farthest}` from cluster `{largest}`')

        assignments[farthest] = empty
        centroids[empty] = vectors[farthest]


def _means(
    vectors: np.ndarray,
    assignments: np.ndarray,
    k: int,
) -> Tuple[np.ndarray, np.ndarray]:
    sizes = np.bincount(assignments, minlength=k)
    sums = np.zeros((k, vectors.shape[1]), dtype=np.float64)
    np.add.at(sums, assignments, vectors)

    return sums / np.maximum(sizes, 1)[:, None], sizes


def kmeans(
    vectors: np.ndarray,
    k: int,
    iters: int = KMEANS_ITERATIONS,
    seed: int = 0,
) -> KMeansResult:
    """
    K-means with k-means++ seeding and Lloyd iterations.

    Clusters left empty are given the farthest member of the largest cluster, and the
    centroids are recomputed as the exact means of the final assignments.

    Args:
        vectors (np.ndarray): Vectors of shape `(N, D)`.
        k (int): Number of clusters.
        iters (int): Maximum number of Lloyd iterations.
        seed (int): Seed of the k-means++ draws.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if not 1 <= k <= n:
        raise InvalidArgumentError(f'Cluster count must lie in [1, {n}], got {k}')
    if iters < 1:
        raise InvalidArgumentError(f'Iteration count must be >= 1, got {iters}')

    estimator = KMeans(
        n_clusters=k,
        init='k-means++',
        n_init=1,
        max_iter=iters,
        random_state=seed,
        algorithm='lloyd',
    )
    assignments = estimator.fit_predict(vectors).astype(np.int64)
    _repair_empty_clusters(vectors, assignments, estimator.cluster_centers_.astype(np.float64))

    centroids, sizes = _means(vectors, assignments, k)
    inertia = float(np.sum((vectors - centroids[assignments]) ** 2))

    return KMeansResult(assignments, centroids, sizes, inertia)


def agglomerate(
    centroids: np.ndarray,
    sizes: np.ndarray,
    target_counts: Sequence[int],
) -> Agglomeration:
    """
    Merge the two closest clusters until every target count has been reached.

    Clusters are compared through the Euclidean distance of their prototypes; the merged
    prototype is the size-weighted mean. Equal distances merge the smallest (id_a, id_b) first.

    Args:
        centroids (np.ndarray): Initial prototypes of shape `(K0, D)`.
        sizes (np.ndarray): Initial cluster sizes of shape `(K0,)`.
        target_counts (Sequence[int]): Strictly descending cluster counts [N_1, ..., N_L].
    """
    centroids = np.asarray(centroids, dtype=np.float64)
    k0 = centroids.shape[0]
    targets = list(target_counts)
    if not targets or any(a <= b for a, b in zip(targets, targets[1:])):
        raise InvalidArgumentError(f'Target counts must be strictly descending, got {targets}')
    if targets[0] > k0 or targets[-1] < 1:
        raise InvalidArgumentError(f'Target counts must lie in [1, {k0}], got {targets}')

    prototypes: List[np.ndarray] = list(centroids)
    weights: List[float] = [float(s) for s in sizes]
    # Initial sub-clusters under every live cluster
    contents: List[List[int]] = [[i] for i in range(k0)]
    alive = [True] * k0

    upper = np.triu_indices(k0, k=1)
    pairwise = np.linalg.norm(centroids[upper[0]] - centroids[upper[1]], axis=1)
    heap: List[Tuple[float, int, int]] = list(zip(pairwise.tolist(), upper[0].tolist(), upper[1].tolist()))
    heapq.heapify(heap)

    result = Agglomeration([], [], [])

    def snapshot() -> None:
        live = sorted((i for i in range(len(alive)) if alive[i]), key=lambda i: min(contents[i]))
        labels = np.empty(k0, dtype=np.int64)
        for label, cluster in enumerate(live):
            labels[contents[cluster]] = label
        result.labels.append(labels)
        result.prototypes.append(np.stack([prototypes[i] for i in live]))

    live_count = k0
    pending = list(targets)
    if pending[0] == live_count:
        snapshot()
        pending.pop(0)

    while pending:
        distance, a, b = heapq.heappop(heap)
        if not (alive[a] and alive[b]):
            # Stale pair
            continue

        merged = len(prototypes)
        total = weights[a] + weights[b]
        prototypes.append((weights[a] * prototypes[a] + weights[b] * prototypes[b]) / total)
        weights.append(total)
        contents.append(contents[a] + contents[b])
        alive[a] = alive[b] = False
        alive.append(True)
        result.merges.append(Merge(a, b, merged, distance))

        others = [i for i in range(merged) if alive[i]]
        if others:
            gaps = np.linalg.norm(np.stack([prototypes[i] for i in others]) - prototypes[merged], axis=1)
            for other, gap in zip(others, gaps.tolist()):
                heapq.heappush(heap, (gap, other, merged))

        live_count -= 1
        if live_count == pending[0]:
            snapshot()
            pending.pop(0)

    return result


def lift_prototypes(
    level: HierarchyLevel,
    curvatures: Tensor,
) -> HierarchyLevel:
    """
    Map the prototypes of a level to the product manifold.

    Args:
        level (HierarchyLevel): The level.
        curvatures (Tensor): Curvatures of shape `(M,)`.

    Returns:
        HierarchyLevel: A copy of the level with its lifted prototypes.
    """
    curvatures = torch.as_tensor(curvatures, dtype=DTYPE).detach()
    m = curvatures.shape[0]
    width = level.prototypes.shape[1]
    if width % m or width // m < 2:
        raise InvalidArgumentError(f'Prototype dimension {width} does not split into {m} Lorentz vectors')

    segments = torch.from_numpy(np.ascontiguousarray(level.prototypes, dtype=np.float64)).reshape(-1, m, width // m)
    _, points = lift_tangent(segments, curvatures)

    return replace(level, lifted_prototypes=points.detach())


def initial_cluster_count(
    n_items: int,
    finest: int,
) -> int:
    """Number of k-means sub-clusters: 4 * N_1, capped at N/2, at least N_1."""
    return max(finest, min(4 * finest, n_items // 2))


def build_hierarchy(
    tangents: np.ndarray,
    target_counts: Sequence[int],
    curvatures: Tensor,
    seed: int = 0,
    iters: int = KMEANS_ITERATIONS,
) -> Hierarchy:
    """
    Extract the hierarchy of a set of tangent vectors.

    Args:
        tangents (np.ndarray): Clipped tangent vectors of shape `(N, M*(d+1))`.
        target_counts (Sequence[int]): Strictly descending cluster counts [N_1, ..., N_L].
        curvatures (Tensor): Curvatures of shape `(M,)` used to lift the prototypes.
        seed (int): Seed of k-means.
        iters (int): Number of Lloyd iterations.
    """
    tangents = np.asarray(tangents, dtype=np.float64)
    n = tangents.shape[0]
    if not target_counts or target_counts[0] > n:
        raise InvalidArgumentError(f'Cannot build levels {list(target_counts)} over {n} items')

    k0 = initial_cluster_count(n, target_counts[0])
    clusters = kmeans(tangents, k0, iters=iters, seed=seed)
    agglomeration = agglomerate(clusters.centroids, clusters.sizes, target_counts)

    levels: List[HierarchyLevel] = []
    for index, (labels, count) in enumerate(zip(agglomeration.labels, target_counts)):
        assignments = labels[clusters.assignments]
        prototypes, _ = _means(tangents, assignments, count)
        members = [np.flatnonzero(assignments == c) for c in range(count)]
        level = HierarchyLevel(index, count, assignments, prototypes, members=members)
        levels.append(lift_prototypes(level, curvatures))

    logger.info(f'Built hierarchy {list(target_counts)} over {n} items from {k0} sub-clusters')

    return Hierarchy(levels, agglomeration.merges)
