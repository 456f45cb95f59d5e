import csv
import os
from dataclasses import (
    astuple,
    fields,
)
from typing import (
    Dict,
    List,
    Sequence,
)

import numpy as np

from src.errors import FormatError
from src.hierarchy import Hierarchy
from src.metadata import (
    EpochMetrics,
    SearchHit,
)

_RESULTS_HEADER = ('query_id', 'rank', 'item_id', 'distance')
_HIERARCHY_HEADER = ('item_id', 'level', 'cluster_id')

_COL_QUERY_ID = 0
_COL_RANK = _COL_QUERY_ID + 1
_COL_ITEM_ID = _COL_RANK + 1
_COL_DISTANCE = _COL_ITEM_ID + 1


def add_metrics_csv(
    metrics_path: str,
    metrics: EpochMetrics,
) -> None:
    """
    Add the metrics of an epoch to a CSV file.

    Headers:

    - Epoch (1-based).
    - Mean view-augmented loss.
    - Mean prototype-wise loss.
    - Mean instance-wise loss.
    - Mean total loss.
    - Mean quantization error over the training set.
    - Learning rate at the end of the epoch.

    The header line is written along with the first epoch.

    Args:
        metrics_path (str): The path to the CSV file.
        metrics (EpochMetrics): The metrics of the epoch.
    """
    is_new = not os.path.exists(metrics_path) or os.path.getsize(metrics_path) == 0

    with open(metrics_path, 'a', newline='') as file:
        writer = csv.writer(file)

        if is_new:
            writer.writerow([f.name for f in fields(EpochMetrics)])
        writer.writerow(astuple(metrics))


def write_results_csv(
    results_path: str,
    rankings: Sequence[Sequence[SearchHit]],
) -> None:
    """
    Write search results, one line per retrieved item.

    Headers: query id (row of the query file), rank (1-based), item id, distance.

    Args:
        results_path (str): The path to the CSV file.
        rankings (Sequence[Sequence[SearchHit]]): The ranked hits of every query.
    """
    with open(results_path, 'w', newline='') as file:
        writer = csv.writer(file)

        writer.writerow(_RESULTS_HEADER)
        for query_id, hits in enumerate(rankings):
            for rank, hit in enumerate(hits, start=1):
                writer.writerow((query_id, rank, hit.item_id, repr(hit.distance)))


def read_results_csv(results_path: str) -> Dict[int, List[int]]:
    """
    Read search results.

    Args:
        results_path (str): The path to the CSV file.

    Returns:
        Dict[int, List[int]]: Query id => item ids in rank order.
    """
    rows: Dict[int, List[tuple]] = {}

    with open(results_path, 'r', newline='') as file:
        reader = csv.reader(file)

        for number, line in enumerate(reader, start=1):
            if number == 1 and tuple(line) == _RESULTS_HEADER:
                continue
            try:
                query_id = int(line[_COL_QUERY_ID])
                rows.setdefault(query_id, []).append((int(line[_COL_RANK]), int(line[_COL_ITEM_ID])))
            except (IndexError, ValueError):
                raise FormatError(f'`{results_path}`, line {number}: invalid result `{",".join(line)}`') from None

    return {query_id: [item for _, item in sorted(hits)] for query_id, hits in rows.items()}


def write_hierarchy_csv(
    hierarchy_path: str,
    hierarchy: Hierarchy,
) -> None:
    """
    Write the cluster of every item at every level.

    Headers: item id, level (0 is the finest), cluster.
    Clusters of a level are numbered by their smallest member id.

    Args:
        hierarchy_path (str): The path to the CSV file.
        hierarchy (Hierarchy): The hierarchy.
    """
    with open(hierarchy_path, 'w', newline='') as file:
        writer = csv.writer(file)

        writer.writerow(_HIERARCHY_HEADER)
        for level in hierarchy.levels:
            # First occurrence of each cluster, in item order
            _, first = np.unique(level.assignments, return_index=True)
            order = level.assignments[np.sort(first)]
            renumber = np.empty(level.n_clusters, dtype=np.int64)
            renumber[order] = np.arange(len(order))

            for item, cluster in enumerate(level.assignments):
                writer.writerow((item, level.index, int(renumber[cluster])))
