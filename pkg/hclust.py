"""
CellBench - Hierarchical Clustering Module
Greedy agglomerative clustering with nearest-neighbour lists and Lance-Williams
updates, and dendrogram cuts into K clusters
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Collection, Hashable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp_sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import pdist, squareform

from dimred import Embedding
from persistence import write_table

logger = logging.getLogger(__name__)


class ClusteringError(ValueError):
    """Raised for invalid clustering input or cut requests"""


class Linkage(Enum):
    WARD = "ward"
    AVERAGE = "average"
    COMPLETE = "complete"


@dataclass(frozen=True)
class Merge:
    """One agglomeration; node ids >= leaf_count name earlier merges"""
    node_a: int
    node_b: int
    height: float
    size: int


@dataclass(frozen=True)
class Dendrogram:
    merges: Tuple[Merge, ...]
    leaf_count: int
    linkage: Linkage = Linkage.WARD

    def __post_init__(self):
        if len(self.merges) != self.leaf_count - 1:
            raise ClusteringError(
                f"{len(self.merges)} merges for {self.leaf_count} leaves"
            )

    @property
    def heights(self) -> np.ndarray:
        return np.array([m.height for m in self.merges], dtype=np.float64)

    def to_scipy_linkage(self) -> np.ndarray:
        """(n-1) x 4 array in scipy.cluster.hierarchy layout"""
        return np.array([[m.node_a, m.node_b, m.height, m.size] for m in self.merges],
                        dtype=np.float64).reshape(-1, 4)


@dataclass(frozen=True)
class Partition:
    """Cluster id per item; ids are 0..k-1 and every cluster is non-empty"""
    labels: np.ndarray
    names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise ClusteringError("partition labels must be 1-D")
        if labels.size:
            present = np.unique(labels)
            if labels.min() < 0 or not np.array_equal(present, np.arange(present.size)):
                raise ClusteringError("partition labels must cover 0..k-1 with no gaps")
        labels.flags.writeable = False
        object.__setattr__(self, 'labels', labels)
        if self.names is not None:
            names = tuple(str(n) for n in self.names)
            if len(names) != self.k:
                raise ClusteringError(f"{len(names)} names for {self.k} clusters")
            object.__setattr__(self, 'names', names)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def k(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @classmethod
    def from_labels(cls, labels: Sequence[Hashable]) -> 'Partition':
        """Canonical ids by first appearance; original labels kept as names"""
        codes, uniques = pd.factorize(pd.Series(list(labels), dtype=object), sort=False)
        return cls(codes, tuple(str(u) for u in uniques))

    def label_names(self) -> Tuple[str, ...]:
        return self.names if self.names is not None else tuple(str(i) for i in range(self.k))

    def take(self, indices: Sequence[int]) -> 'Partition':
        """Labels of resampled items, re-canonicalised"""
        picked = self.labels[np.asarray(indices, dtype=np.intp)]
        names = self.label_names()
        return Partition.from_labels([names[i] for i in picked])


def _lance_williams(method: Linkage, d_ik: np.ndarray, d_jk: np.ndarray, d_ij: float,
                    n_i: int, n_j: int, n_k: np.ndarray) -> np.ndarray:
    if method is Linkage.WARD:
        return ((n_i + n_k) * d_ik + (n_j + n_k) * d_jk - n_k * d_ij) / (n_i + n_j + n_k)
    if method is Linkage.AVERAGE:
        return (n_i * d_ik + n_j * d_jk) / (n_i + n_j)
    return np.maximum(d_ik, d_jk)


def _agglomerate(distances: np.ndarray, method: Linkage) -> List[Tuple[int, int, float]]:
    """Greedy global-minimum merges as (slot_a, slot_b, height), slot_a < slot_b.

    Equal heights go to the smallest (slot_a, slot_b); a slot is named by the
    smallest leaf it holds. Each slot keeps its nearest neighbour among the
    higher slots, so only rows that pointed at a merged slot are searched again.
    """
    n = distances.shape[0]
    d = distances.copy()
    np.fill_diagonal(d, np.inf)
    size = np.ones(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    nearest = np.full(n, n, dtype=np.int64)
    nearest_d = np.full(n, np.inf)

    def search(i: int):
        row = d[i, i + 1:]
        if row.size == 0:
            nearest[i], nearest_d[i] = n, np.inf
            return
        j = int(np.argmin(row))
        nearest[i], nearest_d[i] = i + 1 + j, row[j]

    for i in range(n):
        search(i)

    merges = []
    for _ in range(n - 1):
        a = int(np.argmin(nearest_d))
        b = int(nearest[a])
        height = float(nearest_d[a])
        merges.append((a, b, height))

        updated = _lance_williams(method, d[a], d[b], height, size[a], size[b], size)
        updated[~active] = np.inf
        d[a, :] = updated
        d[:, a] = updated
        d[a, a] = np.inf
        d[b, :] = np.inf
        d[:, b] = np.inf
        size[a] += size[b]
        active[b] = False
        nearest[b], nearest_d[b] = n, np.inf

        lower = np.flatnonzero(active[:a])
        column = d[lower, a]
        closer = (column < nearest_d[lower]) | ((column == nearest_d[lower]) & (a < nearest[lower]))
        nearest[lower[closer]] = a
        nearest_d[lower[closer]] = column[closer]
        for i in np.flatnonzero(active & ((nearest == a) | (nearest == b))):
            search(int(i))
        search(a)
    return merges


def _relabel(raw: List[Tuple[int, int, float]], n: int, method: Linkage) -> Dendrogram:
    """Name nodes scipy-style (leaves 0..n-1, merges n..) in merge order"""
    parent = list(range(n))
    node_of = list(range(n))
    size = [1] * n

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    merges = []
    for step, (a, b, height) in enumerate(raw):
        root_a, root_b = find(a), find(b)
        node_a, node_b = node_of[root_a], node_of[root_b]
        parent[root_b] = root_a
        size[root_a] += size[root_b]
        node_of[root_a] = n + step
        merges.append(Merge(min(node_a, node_b), max(node_a, node_b), height, size[root_a]))
    return Dendrogram(tuple(merges), n, method)


def linkage(points: Union[Embedding, np.ndarray], method: Linkage = Linkage.WARD) -> Dendrogram:
    """Agglomerative clustering; Ward works on squared Euclidean distances"""
    coords = points.coords if isinstance(points, Embedding) else np.asarray(points, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[0] < 2:
        raise ClusteringError("clustering needs at least 2 points")
    if not np.all(np.isfinite(coords)):
        raise ClusteringError("non-finite input coordinates")
    metric = 'sqeuclidean' if method is Linkage.WARD else 'euclidean'
    distances = squareform(pdist(coords, metric))
    raw = _agglomerate(distances, method)
    dendrogram = _relabel(raw, coords.shape[0], method)
    logger.debug(f"{method.value} linkage on {coords.shape[0]} points")
    return dendrogram


def ward_linkage(points: Union[Embedding, np.ndarray]) -> Dendrogram:
    return linkage(points, Linkage.WARD)


def cut(dendrogram: Dendrogram, k: int) -> Partition:
    """Undo the last k-1 merges; clusters numbered by their smallest leaf"""
    n = dendrogram.leaf_count
    if not 1 <= k <= n:
        raise ClusteringError(f"k must lie in [1, {n}], got {k}")
    kept = dendrogram.merges[:n - k]
    total = n + len(kept)
    rows = [n + i for i in range(len(kept)) for _ in (0, 1)]
    cols = [node for m in kept for node in (m.node_a, m.node_b)]
    graph = sp_sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(total, total))
    _, component = connected_components(graph, directed=False)
    leaf_component = component[:n]
    _, first_leaf = np.unique(leaf_component, return_index=True)
    rank = np.empty(first_leaf.size, dtype=np.int64)
    rank[np.argsort(first_leaf)] = np.arange(first_leaf.size)
    _, inverse = np.unique(leaf_component, return_inverse=True)
    return Partition(rank[inverse])


def write_labels(partition: Partition, cell_ids: Sequence[str], path: Union[str, Path]):
    """cell_id <-> integer label table"""
    if len(cell_ids) != len(partition):
        raise ClusteringError(f"{len(cell_ids)} cell ids for {len(partition)} labels")
    frame = pd.DataFrame({'cell_id': list(cell_ids), 'label': partition.labels})
    write_table(frame, path)


HEADER_IDS = frozenset({'cell_id', 'cell', 'barcode'})


def read_labels(path: Union[str, Path],
                known_ids: Optional[Collection[str]] = None) -> Tuple[Tuple[str, ...], Tuple[str, ...]]:
    """(cell_ids, labels) from a two-column label file, header row optional.

    With known_ids, a first row whose id is not a known cell is a header, as in
    load_annotation; otherwise a header is recognised by its id column name.
    """
    path = Path(path)
    sep = ',' if path.suffix.lower() == '.csv' else '\t'
    frame = pd.read_csv(path, sep=sep, header=None, dtype=str, keep_default_na=False)
    if frame.shape[1] < 2:
        raise ClusteringError(f"label file {path} needs two columns")
    if frame.shape[0]:
        first = frame.iloc[0, 0]
        header = first not in known_ids if known_ids is not None else first.lower() in HEADER_IDS
        if header:
            frame = frame.iloc[1:]
    return tuple(frame.iloc[:, 0]), tuple(frame.iloc[:, 1])
