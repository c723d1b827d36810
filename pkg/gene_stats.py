"""
CellBench - Gene Statistics Module
Per-gene fidelity statistics (mean, sd, zero fraction), mean-binned curves,
histograms, and per-gene R^2 between two datasets
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from expression import ExpressionMatrix
from persistence import write_json, write_table

logger = logging.getLogger(__name__)

DEFAULT_BINS = 30


class StatsError(ValueError):
    """Raised when a statistic is undefined for the given input"""


class Statistic(Enum):
    MEAN = "mean"
    SD = "sd"
    ZERO_FRACTION = "zero_fraction"


@dataclass(frozen=True)
class GeneSummary:
    gene_id: str
    mean: float
    sd: float
    zero_fraction: float

    def get(self, stat: Statistic) -> float:
        return getattr(self, stat.value)


@dataclass(frozen=True)
class BinnedCurve:
    """Per-bin values over equal-width bins; empty bins hold NaN"""
    stat: str
    bin_edges: np.ndarray
    bin_centers: np.ndarray
    y_values: np.ndarray
    bin_counts: np.ndarray
    excluded_genes: Tuple[str, ...] = ()

    @property
    def occupied(self) -> np.ndarray:
        return self.bin_counts > 0

    def to_dict(self) -> dict:
        return {
            'stat': self.stat,
            'bin_edges': self.bin_edges.tolist(),
            'bin_centers': self.bin_centers.tolist(),
            'y_values': self.y_values.tolist(),
            'bin_counts': self.bin_counts.tolist(),
            'excluded_genes': list(self.excluded_genes),
        }


@dataclass(frozen=True)
class R2Result:
    """Squared Pearson correlation per gene; NaN marks excluded genes"""
    gene_ids: Tuple[str, ...]
    per_gene: np.ndarray
    mean_r2: float
    excluded_genes: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            'mean_r2': self.mean_r2,
            'n_genes': len(self.gene_ids),
            'n_excluded': len(self.excluded_genes),
            'excluded_genes': list(self.excluded_genes),
            'definition': 'squared pearson correlation across cells',
        }


@dataclass(frozen=True)
class FidelityComparison:
    """Reference vs other dataset on shared mean bins"""
    reference: Dict[str, BinnedCurve]
    other: Dict[str, BinnedCurve]
    lower_fraction: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'reference': {k: v.to_dict() for k, v in self.reference.items()},
            'other': {k: v.to_dict() for k, v in self.other.items()},
            'lower_fraction': dict(self.lower_fraction),
        }


def _summary_arrays(m: ExpressionMatrix) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = m.n_cells
    if n < 2:
        raise StatsError(f"gene summaries need at least 2 cells, got {n}")
    if m.is_sparse:
        values = m.values
        means = np.asarray(values.sum(axis=1)).ravel() / n
        nonzero = np.diff(values.indptr)
        row_of = np.repeat(np.arange(m.n_genes), nonzero)
        deviations = (values.data - means[row_of]) ** 2
        squares = np.bincount(row_of, weights=deviations, minlength=m.n_genes)
        squares += (n - nonzero) * means ** 2
        sds = np.sqrt(squares / (n - 1))
        constant = (nonzero == 0) | ((nonzero == n) & (
            np.asarray(values.max(axis=1).todense()).ravel()
            == np.asarray(values.min(axis=1).todense()).ravel()))
        zero_fraction = (n - nonzero) / n
    else:
        values = m.values
        means = values.mean(axis=1)
        sds = values.std(axis=1, ddof=1)
        constant = values.max(axis=1) == values.min(axis=1)
        zero_fraction = (values == 0).sum(axis=1) / n
    sds = np.where(constant, 0.0, sds)
    return means, sds, zero_fraction


def gene_summaries(m: ExpressionMatrix) -> List[GeneSummary]:
    """One mean / sample sd / zero-fraction summary per gene, in gene order"""
    means, sds, zero_fraction = _summary_arrays(m)
    return [
        GeneSummary(gene_id, float(mean), float(sd), float(zf))
        for gene_id, mean, sd, zf in zip(m.gene_ids, means, sds, zero_fraction)
    ]


def summaries_frame(summaries: Sequence[GeneSummary]) -> pd.DataFrame:
    return pd.DataFrame(
        [(s.gene_id, s.mean, s.sd, s.zero_fraction) for s in summaries],
        columns=['gene_id', 'mean', 'sd', 'zero_fraction'],
    )


def _edges(x: np.ndarray, n_bins: int, lo: Optional[float] = None,
           hi: Optional[float] = None) -> np.ndarray:
    if n_bins < 1:
        raise StatsError(f"n_bins must be >= 1, got {n_bins}")
    if x.size == 0:
        raise StatsError("at least one gene is required")
    lo = float(np.min(x)) if lo is None else lo
    hi = float(np.max(x)) if hi is None else hi
    return np.linspace(lo, hi, n_bins + 1)


def _bin_index(x: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Bins are (left, right]; the first bin also holds its left edge"""
    n_bins = edges.size - 1
    index = np.searchsorted(edges, x, side='left') - 1
    return np.clip(index, 0, n_bins - 1)


def _curve(stat: str, x: np.ndarray, y: np.ndarray, edges: np.ndarray,
           frequency: bool = False) -> BinnedCurve:
    n_bins = edges.size - 1
    index = _bin_index(x, edges)
    counts = np.bincount(index, minlength=n_bins)
    if frequency:
        y_values = counts / counts.sum()
    else:
        sums = np.bincount(index, weights=y, minlength=n_bins)
        with np.errstate(invalid='ignore', divide='ignore'):
            y_values = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    centers = (edges[:-1] + edges[1:]) / 2.0
    return BinnedCurve(stat, edges, centers, y_values, counts)


def binned_curve(summaries: Sequence[GeneSummary], y: Statistic = Statistic.SD,
                 n_bins: int = DEFAULT_BINS, edges: Optional[np.ndarray] = None) -> BinnedCurve:
    """Average of sd or zero_fraction within equal-width bins of mean expression"""
    if y is Statistic.MEAN:
        raise StatsError("binned_curve plots sd or zero_fraction against mean")
    means = np.array([s.mean for s in summaries], dtype=np.float64)
    values = np.array([s.get(y) for s in summaries], dtype=np.float64)
    if edges is None:
        edges = _edges(means, n_bins)
    elif means.size == 0:
        raise StatsError("at least one gene is required")
    return _curve(y.value, means, values, edges)


def summary_histogram(summaries: Sequence[GeneSummary], stat: Statistic = Statistic.MEAN,
                      n_bins: int = DEFAULT_BINS) -> BinnedCurve:
    """Relative frequency of a statistic over equal-width bins"""
    x = np.array([s.get(stat) for s in summaries], dtype=np.float64)
    edges = _edges(x, n_bins)
    return _curve(stat.value, x, x, edges, frequency=True)


def compare_fidelity(reference: Sequence[GeneSummary], other: Sequence[GeneSummary],
                     n_bins: int = DEFAULT_BINS) -> FidelityComparison:
    """Binned sd and zero-fraction curves for two datasets over shared mean bins"""
    means = np.array([s.mean for s in list(reference) + list(other)], dtype=np.float64)
    edges = _edges(means, n_bins)
    ref_curves = {}
    other_curves = {}
    lower = {}
    for stat in (Statistic.SD, Statistic.ZERO_FRACTION):
        ref_curves[stat.value] = binned_curve(reference, stat, edges=edges)
        other_curves[stat.value] = binned_curve(other, stat, edges=edges)
        both = ref_curves[stat.value].occupied & other_curves[stat.value].occupied
        if both.any():
            below = other_curves[stat.value].y_values[both] < ref_curves[stat.value].y_values[both]
            lower[stat.value] = float(below.mean())
        else:
            lower[stat.value] = float('nan')
    return FidelityComparison(ref_curves, other_curves, lower)


def per_gene_r2(a: ExpressionMatrix, b: ExpressionMatrix) -> R2Result:
    """Squared Pearson correlation of each gene across cells between a and b"""
    if a.shape != b.shape or a.gene_ids != b.gene_ids or a.cell_ids != b.cell_ids:
        raise StatsError(
            f"matrices must share gene and cell ids (shape mismatch {a.shape} vs {b.shape} "
            f"or differing ids)"
        )
    if a.n_cells < 2:
        raise StatsError("per-gene correlation needs at least 2 cells")
    x = a.dense()
    y = b.dense()
    xc = x - x.mean(axis=1, keepdims=True)
    yc = y - y.mean(axis=1, keepdims=True)
    sxy = np.einsum('ij,ij->i', xc, yc)
    sxx = np.einsum('ij,ij->i', xc, xc)
    syy = np.einsum('ij,ij->i', yc, yc)

    degenerate = (x.max(axis=1) == x.min(axis=1)) | (y.max(axis=1) == y.min(axis=1))
    with np.errstate(invalid='ignore', divide='ignore'):
        r2 = np.where(degenerate, np.nan, (sxy * sxy) / (sxx * syy))
    r2 = np.where(degenerate, np.nan, np.clip(r2, 0.0, 1.0))
    if degenerate.all():
        raise StatsError("all genes have zero variance in at least one matrix")

    excluded = tuple(g for g, d in zip(a.gene_ids, degenerate) if d)
    if excluded:
        logger.warning(f"Excluded {len(excluded)} zero-variance genes from mean R^2")
    mean_r2 = float(np.mean(r2[~degenerate]))
    r2.flags.writeable = False
    return R2Result(a.gene_ids, r2, mean_r2, excluded)


# --- Report emitters ---

def write_summaries(summaries: Sequence[GeneSummary], path: Union[str, Path]):
    write_table(summaries_frame(summaries), path)


def write_curve(curve: BinnedCurve, path: Union[str, Path], metadata: Optional[dict] = None):
    document = curve.to_dict()
    if metadata:
        document['metadata'] = metadata
    write_json(document, path)


def write_r2(result: R2Result, path: Union[str, Path], metadata: Optional[dict] = None):
    """Per-gene table next to a JSON summary"""
    path = Path(path)
    excluded = set(result.excluded_genes)
    frame = pd.DataFrame({
        'gene_id': result.gene_ids,
        'r2': result.per_gene,
        'excluded': [g in excluded for g in result.gene_ids],
    })
    write_table(frame, path.with_suffix('.tsv'))
    document = result.to_dict()
    if metadata:
        document['metadata'] = metadata
    write_json(document, path.with_suffix('.json'))
