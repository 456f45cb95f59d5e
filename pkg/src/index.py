"""
Database encoding and retrieval.

The asymmetric search scores a database item by summing M entries of a query
look-up table. The brute-force oracle decodes the items and evaluates the
distances directly; both accumulate the per-subspace distances in the same
order, so they rank identically.
"""

import math
from dataclasses import dataclass
from typing import (
    List,
    Optional,
    Sequence,
    Set,
)

import numpy as np
import torch
from torch import Tensor

from src.constants import ACOSH_EPS
from src.errors import (
    FormatError,
    InvalidArgumentError,
)
from src.geometry import DTYPE
from src.logger import logger
from src.metadata import SearchHit
from src.model import Model
from src.quantizer import (
    Codebook,
    QuantCode,
    decode,
    encode,
)
from src.trainer import embed_all


@dataclass
class EncodedDatabase:
    """Codes of the database items."""

    codes: QuantCode
    """Codes of shape `(N, M)`."""
    ids: np.ndarray
    """Item ids of shape `(N,)`."""
    codebook_hash: bytes
    """Content hash of the codebook the items were encoded with."""

    @property
    def size(self) -> int:
        """Number of items N."""
        return self.codes.indices.shape[0]

    def check_codebook(self, codebook: Codebook) -> None:
        """
        Make sure the codes were produced by a codebook.

        Args:
            codebook (Codebook): The codebook used to search.
        """
        if self.codebook_hash != codebook.content_hash():
            raise FormatError('Codes were encoded with another codebook (hash mismatch)')
        if self.codes.M != codebook.M or self.codes.K != codebook.K:
            raise FormatError(
                f'Codes (M={self.codes.M}, K={self.codes.K}) do not match the codebook (M={codebook.M}, K={codebook.K})'
            )

    def decode(self, codebook: Codebook) -> Tensor:
        """
        Quantized embeddings of the items.

        Args:
            codebook (Codebook): The codebook.

        Returns:
            Tensor: Product points of shape `(N, M, d+1)`.
        """
        self.check_codebook(codebook)

        return decode(self.codes, codebook)


@dataclass
class LookupTable:
    """Distances between the query and every codeword of every subspace."""

    table: np.ndarray
    """Distances of shape `(M, K)`."""


@dataclass
class ScanStats:
    """Operation counts of the asymmetric scans."""

    items: int = 0
    lookups: int = 0
    additions: int = 0


def encode_database(
    model: Model,
    features: np.ndarray,
    ids: Optional[np.ndarray] = None,
) -> EncodedDatabase:
    """
    Embed (without augmentation) and hard-quantize database items.

    Args:
        model (Model): The trained model.
        features (np.ndarray): Features of shape `(N, D_in)`.
        ids (Optional[np.ndarray]): Item ids, the row indices by default.
    """
    codebook = model.codebook
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 2 and features.shape[0] == 0:
        # An empty feature file reads as (0, 0)
        features = features.reshape(0, model.input_dim)
    elif features.ndim != 2 or features.shape[1] != model.input_dim:
        raise InvalidArgumentError(f'Expected features of shape (N, {model.input_dim}), got {features.shape}')
    n = features.shape[0]

    if n == 0:
        codes = QuantCode(np.zeros((0, codebook.M), dtype=np.int64), codebook.K)
    else:
        _, points = embed_all(model, features)
        codes = encode(points, codebook)

    ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    if ids.shape != (n,):
        raise InvalidArgumentError(f'Expected {n} item ids, got {ids.shape}')

    logger.info(f'Encoded {n} items with {codebook.bits}-bit codes')

    return EncodedDatabase(codes, ids, codebook.content_hash())


_acosh = np.vectorize(math.acosh, otypes=[np.float64])


def _distances(
    points: np.ndarray,
    query: np.ndarray,
    theta: float,
) -> np.ndarray:
    """
    Lorentzian distances between rows of `points` and one query point.

    Every value depends on its own row only, whatever the number of rows.
    """
    inner = -points[:, 0] * query[0]
    for j in range(1, points.shape[1]):
        inner = inner + points[:, j] * query[j]
    z = np.maximum(-theta * inner, 1.0)
    far = z > 1.0 + ACOSH_EPS
    values = np.zeros_like(z)
    if far.any():
        values[far] = _acosh(z[far])

    return values / math.sqrt(theta)


def _check_query(h_q: Tensor, codebook: Codebook) -> Tensor:
    h_q = torch.as_tensor(h_q, dtype=DTYPE)
    if h_q.shape != codebook.codewords.shape[::2]:
        raise InvalidArgumentError(
            f'Query of shape {tuple(h_q.shape)} does not match the codebook {tuple(codebook.codewords.shape)}'
        )

    return h_q


@torch.no_grad()
def build_lookup_table(
    h_q: Tensor,
    codebook: Codebook,
) -> LookupTable:
    """
    Query-specific look-up table T[m, k] = d_L(h_q^m, c_k^m).

    Args:
        h_q (Tensor): Continuous query embedding of shape `(M, d+1)`.
        codebook (Codebook): The codebook.
    """
    h_q = _check_query(h_q, codebook)
    codewords = codebook.codewords.detach().numpy()
    curvatures = codebook.curvatures.detach().tolist()
    query = h_q.numpy()

    table = np.stack([_distances(codewords[m], query[m], curvatures[m]) for m in range(codebook.M)])

    return LookupTable(table)


def _accumulate(columns: Sequence[np.ndarray]) -> np.ndarray:
    # Left-to-right over the subspaces, whatever the caller
    total = columns[0].copy()
    for column in columns[1:]:
        total = total + column

    return total


def _rank(
    distances: np.ndarray,
    ids: np.ndarray,
    top_n: int,
) -> List[SearchHit]:
    if top_n < 1:
        raise InvalidArgumentError(f'top N must be >= 1, got {top_n}')

    # Ascending distance, ties by ascending id
    order = np.lexsort((ids, distances))[:top_n]

    return [SearchHit(int(ids[i]), float(distances[i])) for i in order]


def adc_search(
    table: LookupTable,
    db: EncodedDatabase,
    top_n: int,
    stats: Optional[ScanStats] = None,
) -> List[SearchHit]:
    """
    Rank the database by asymmetric distance.

    Args:
        table (LookupTable): The query look-up table.
        db (EncodedDatabase): The encoded database.
        top_n (int): Number of results.
        stats (Optional[ScanStats]): Operation counters to update.
    """
    m_count, k_count = table.table.shape
    if db.codes.M != m_count or db.codes.K != k_count:
        raise InvalidArgumentError(f'Table {table.table.shape} does not match codes (M={db.codes.M}, K={db.codes.K})')
    if db.size == 0:
        return _rank(np.zeros(0), db.ids, top_n)

    indices = db.codes.indices
    distances = _accumulate([table.table[m, indices[:, m]] for m in range(m_count)])

    if stats is not None:
        stats.items += db.size
        stats.lookups += db.size * m_count
        stats.additions += db.size * (m_count - 1)

    return _rank(distances, db.ids, top_n)


@torch.no_grad()
def brute_force_search(
    h_q: Tensor,
    db: EncodedDatabase,
    codebook: Codebook,
    top_n: int,
) -> List[SearchHit]:
    """
    Rank the database by the product distance to the decoded items.

    Args:
        h_q (Tensor): Continuous query embedding of shape `(M, d+1)`.
        db (EncodedDatabase): The encoded database.
        codebook (Codebook): The codebook the database was encoded with.
        top_n (int): Number of results.
    """
    h_q = _check_query(h_q, codebook)
    if db.size == 0:
        return _rank(np.zeros(0), db.ids, top_n)

    decoded = db.decode(codebook).numpy()
    curvatures = codebook.curvatures.detach().tolist()
    query = h_q.numpy()
    distances = _accumulate([_distances(decoded[:, m], query[m], curvatures[m]) for m in range(codebook.M)])

    return _rank(distances, db.ids, top_n)


def search_features(
    model: Model,
    db: EncodedDatabase,
    queries: np.ndarray,
    top_n: int,
) -> List[List[SearchHit]]:
    """
    Asymmetric search of a batch of query feature vectors.

    Args:
        model (Model): The model the database was encoded with.
        db (EncodedDatabase): The encoded database.
        queries (np.ndarray): Query features of shape `(Q, D_in)`.
        top_n (int): Number of results per query.
    """
    db.check_codebook(model.codebook)

    _, points = embed_all(model, queries)
    stats = ScanStats()
    rankings = [adc_search(build_lookup_table(h_q, model.codebook), db, top_n, stats) for h_q in points]
    logger.info(f'Searched {len(rankings)} queries over {db.size} items ({stats.lookups} lookups)')

    return rankings


def average_precision(
    retrieved: Sequence[int],
    query_labels: Set[int],
    db_labels: Sequence[Set[int]],
    n: int,
) -> float:
    """
    Average precision over the top N results, 0 when none is relevant.

    Args:
        retrieved (Sequence[int]): Ranked item ids.
        query_labels (Set[int]): Labels of the query.
        db_labels (Sequence[Set[int]]): Labels of the database items, by item id.
        n (int): Cut-off.
    """
    hits = 0
    precision_sum = 0.0
    for rank, item in enumerate(retrieved[:n], start=1):
        if query_labels & db_labels[item]:
            hits += 1
            precision_sum += hits / rank

    return precision_sum / hits if hits else 0.0


def map_at_n(
    rankings: Sequence[Sequence[int]],
    query_labels: Sequence[Set[int]],
    db_labels: Sequence[Set[int]],
    n: int,
) -> float:
    """
    Mean average precision at N; two items are relevant when they share a label.

    Args:
        rankings (Sequence[Sequence[int]]): Ranked item ids, one list per query.
        query_labels (Sequence[Set[int]]): Labels of the queries.
        db_labels (Sequence[Set[int]]): Labels of the database items, by item id.
        n (int): Cut-off.
    """
    if n < 1:
        raise InvalidArgumentError(f'N must be >= 1, got {n}')
    if len(rankings) != len(query_labels):
        raise InvalidArgumentError(f'{len(rankings)} rankings for {len(query_labels)} labelled queries')
    if not rankings:
        return 0.0

    return float(np.mean([average_precision(r, q, db_labels, n) for r, q in zip(rankings, query_labels)]))
