"""
CellBench - Partition Metrics Module
Agreement between a predicted clustering and reference labels: contingency
table, adjusted Rand index, pair-counting Jaccard, NMI and purity
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import FrozenSet, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import entropy
from sklearn.metrics import mutual_info_score
from sklearn.metrics.cluster import contingency_matrix

from hclust import Partition
from persistence import write_table

logger = logging.getLogger(__name__)

NMI_NORMALIZATION = "arithmetic"


class MetricError(ValueError):
    """Raised when a metric is undefined for the given partitions"""


class DegenerateFlag(Enum):
    BOTH_TRIVIAL = "both_trivial"
    SINGLETON_CLUSTERS = "singleton_clusters"


@dataclass(frozen=True)
class ContingencyTable:
    """Rows are truth classes, columns are predicted clusters"""
    counts: np.ndarray
    row_names: Tuple[str, ...]
    col_names: Tuple[str, ...]

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64)
        if counts.ndim != 2:
            raise MetricError("contingency counts must be 2-D")
        if np.any(counts < 0):
            raise MetricError("contingency counts must be non-negative")
        if counts.shape != (len(self.row_names), len(self.col_names)):
            raise MetricError(
                f"counts shape {counts.shape} does not match "
                f"{len(self.row_names)} x {len(self.col_names)} names"
            )
        counts.flags.writeable = False
        object.__setattr__(self, 'counts', counts)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.counts, columns=list(self.col_names))
        frame.insert(0, 'truth', list(self.row_names))
        return frame


@dataclass(frozen=True)
class MetricReport:
    ari: float
    jaccard: float
    nmi: float
    purity: float
    n: int
    degenerate_flags: FrozenSet[DegenerateFlag] = field(default_factory=frozenset)
    nmi_normalization: str = NMI_NORMALIZATION

    def to_dict(self) -> dict:
        return {
            'ari': self.ari,
            'jaccard': self.jaccard,
            'nmi': self.nmi,
            'purity': self.purity,
            'n': self.n,
            'degenerate_flags': sorted(f.value for f in self.degenerate_flags),
            'nmi_normalization': self.nmi_normalization,
        }


def _pairs(x) -> int:
    x = np.asarray(x, dtype=np.int64)
    return int(np.sum(x * (x - 1) // 2))


def contingency(truth: Partition, pred: Partition) -> ContingencyTable:
    if len(truth) != len(pred):
        raise MetricError(f"length mismatch: {len(truth)} truth vs {len(pred)} predicted labels")
    if len(truth) == 0:
        return ContingencyTable(np.zeros((0, 0), dtype=np.int64), (), ())
    counts = contingency_matrix(truth.labels, pred.labels)
    return ContingencyTable(counts, truth.label_names(), pred.label_names())


def _pair_counts(t: ContingencyTable) -> Tuple[int, int, int, int]:
    """(pairs together in both, in truth, in prediction, all pairs)"""
    if t.n < 2:
        raise MetricError(f"pair-counting metrics need n >= 2, got {t.n}")
    return _pairs(t.counts), _pairs(t.row_sums), _pairs(t.col_sums), t.n * (t.n - 1) // 2


def ari(t: ContingencyTable) -> float:
    """Adjusted Rand index; 1 when the expected and maximum index coincide"""
    both, truth, pred, total = _pair_counts(t)
    # Scaled by 2 * total to stay in exact integer arithmetic
    numerator = 2 * total * both - 2 * truth * pred
    denominator = total * (truth + pred) - 2 * truth * pred
    if denominator == 0:
        return 1.0
    return numerator / denominator


def jaccard_pairs(t: ContingencyTable) -> float:
    """N11 / (N11 + N10 + N01) over item pairs"""
    both, truth, pred, _ = _pair_counts(t)
    union = truth + pred - both
    if union == 0:
        return 1.0
    return both / union


def nmi(t: ContingencyTable) -> float:
    """Mutual information over the arithmetic mean of the two entropies (nats)"""
    if t.n < 1:
        raise MetricError("nmi needs at least one item")
    h_truth = float(entropy(t.row_sums))
    h_pred = float(entropy(t.col_sums))
    if h_truth == 0.0 and h_pred == 0.0:
        return 1.0
    if h_truth == 0.0 or h_pred == 0.0:
        return 0.0
    mi = mutual_info_score(None, None, contingency=t.counts)
    return float(np.clip(mi / ((h_truth + h_pred) / 2.0), 0.0, 1.0))


def purity(t: ContingencyTable) -> float:
    """Share of items in their cluster's majority truth class"""
    if t.n < 1:
        raise MetricError("purity needs at least one item")
    return float(t.counts.max(axis=0).sum() / t.n)


def degenerate_flags(t: ContingencyTable) -> FrozenSet[DegenerateFlag]:
    flags = set()
    if t.counts.shape[0] <= 1 and t.counts.shape[1] <= 1:
        flags.add(DegenerateFlag.BOTH_TRIVIAL)
    if t.n >= 1 and (np.all(t.row_sums == 1) or np.all(t.col_sums == 1)):
        flags.add(DegenerateFlag.SINGLETON_CLUSTERS)
    return frozenset(flags)


def evaluate(truth: Partition, pred: Partition) -> MetricReport:
    """All four agreement metrics from one contingency table"""
    table = contingency(truth, pred)
    flags = degenerate_flags(table)
    if flags:
        logger.debug(f"Degenerate partitions: {sorted(f.value for f in flags)}")
    return MetricReport(
        ari=ari(table),
        jaccard=jaccard_pairs(table),
        nmi=nmi(table),
        purity=purity(table),
        n=table.n,
        degenerate_flags=flags,
    )


def write_contingency(table: ContingencyTable, path: Union[str, Path]):
    """Truth classes as rows, predicted clusters as columns"""
    write_table(table.to_frame(), path)
