"""
CellBench - Expression Core Module
Loads, validates, filters, normalizes and saves gene x cell expression matrices
"""

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.io as sp_io
import scipy.sparse as sp_sparse

logger = logging.getLogger(__name__)

# Stored sparse above this zero fraction
SPARSE_ZERO_FRACTION = 0.5

Values = Union[np.ndarray, sp_sparse.csr_matrix]


class MatrixFormatError(ValueError):
    """Raised when an input file cannot be parsed into a matrix"""


class MatrixValidationError(ValueError):
    """Raised when a matrix or annotation violates its invariants"""


class Layer(Enum):
    """Which transform has been applied to the values"""
    RAW_COUNTS = "raw_counts"
    NORMALIZED = "normalized"


class AnnotationLevel(Enum):
    """Granularity of biologist-assigned labels"""
    MAJOR = "major"
    SUBTYPE = "subtype"


def _zero_fraction(values: Values) -> float:
    total = values.shape[0] * values.shape[1]
    if total == 0:
        return 0.0
    if sp_sparse.issparse(values):
        return 1.0 - values.count_nonzero() / total
    return 1.0 - np.count_nonzero(values) / total


def _choose_representation(values: Values) -> Values:
    """Sparse when mostly zero, dense otherwise"""
    if _zero_fraction(values) > SPARSE_ZERO_FRACTION:
        matrix = sp_sparse.csr_matrix(values, dtype=np.float64, copy=True)
        matrix.eliminate_zeros()
        matrix.sort_indices()
        return matrix
    if sp_sparse.issparse(values):
        return np.asarray(values.toarray(), dtype=np.float64)
    return np.array(values, dtype=np.float64)


def _find_duplicates(ids: Sequence[str]) -> list:
    return [item for item, count in Counter(ids).items() if count > 1]


@dataclass(frozen=True)
class ExpressionMatrix:
    """Immutable genes x cells matrix with identifiers and a layer tag"""
    values: Values
    gene_ids: Tuple[str, ...]
    cell_ids: Tuple[str, ...]
    layer: Layer = Layer.RAW_COUNTS
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'gene_ids', tuple(str(g) for g in self.gene_ids))
        object.__setattr__(self, 'cell_ids', tuple(str(c) for c in self.cell_ids))
        object.__setattr__(self, 'values', _choose_representation(self.values))
        self._validate()
        if isinstance(self.values, np.ndarray):
            self.values.flags.writeable = False
        else:
            self.values.data.flags.writeable = False

    def _validate(self):
        n_genes, n_cells = self.values.shape
        if len(self.gene_ids) != n_genes:
            raise MatrixValidationError(
                f"gene_ids has {len(self.gene_ids)} entries for {n_genes} rows"
            )
        if len(self.cell_ids) != n_cells:
            raise MatrixValidationError(
                f"cell_ids has {len(self.cell_ids)} entries for {n_cells} columns"
            )
        for kind, ids in (('gene', self.gene_ids), ('cell', self.cell_ids)):
            duplicates = _find_duplicates(ids)
            if duplicates:
                raise MatrixValidationError(f"duplicate id in {kind} ids: {duplicates[:5]}")

        data = self.values.data if sp_sparse.issparse(self.values) else self.values
        if not np.all(np.isfinite(data)):
            raise MatrixValidationError("matrix contains non-finite values")
        if np.any(data < 0):
            raise MatrixValidationError("matrix contains negative values")
        if self.layer is Layer.RAW_COUNTS and not np.all(data == np.round(data)):
            raise MatrixValidationError("raw_counts layer contains non-integer values")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def n_genes(self) -> int:
        return self.values.shape[0]

    @property
    def n_cells(self) -> int:
        return self.values.shape[1]

    @property
    def is_sparse(self) -> bool:
        return sp_sparse.issparse(self.values)

    def dense(self) -> np.ndarray:
        """Return the values as a dense float array (read-only view when already dense)"""
        if self.is_sparse:
            return self.values.toarray()
        return self.values

    def cell_totals(self) -> np.ndarray:
        """Library size per cell (column sums)"""
        return np.asarray(self.values.sum(axis=0)).ravel()

    def gene_nonzero_counts(self) -> np.ndarray:
        if self.is_sparse:
            return np.diff(self.values.indptr)
        return np.count_nonzero(self.values, axis=1)

    def with_values(self, values: Values, layer: Optional[Layer] = None,
                    metadata: Optional[Mapping[str, Any]] = None) -> 'ExpressionMatrix':
        """New matrix with the same ids"""
        merged = dict(self.metadata)
        if metadata:
            merged.update(metadata)
        return ExpressionMatrix(
            values=values,
            gene_ids=self.gene_ids,
            cell_ids=self.cell_ids,
            layer=layer or self.layer,
            metadata=merged,
        )

    def select(self, gene_index: Optional[np.ndarray] = None,
               cell_index: Optional[np.ndarray] = None) -> 'ExpressionMatrix':
        """Positional selection of genes and/or cells (no duplicates)"""
        values = self.values
        gene_ids = self.gene_ids
        cell_ids = self.cell_ids
        if gene_index is not None:
            gene_index = np.asarray(gene_index, dtype=np.intp)
            values = values[gene_index, :]
            gene_ids = tuple(gene_ids[i] for i in gene_index)
        if cell_index is not None:
            cell_index = np.asarray(cell_index, dtype=np.intp)
            values = values[:, cell_index]
            cell_ids = tuple(cell_ids[i] for i in cell_index)
        return replace(self, values=values, gene_ids=gene_ids, cell_ids=cell_ids)

    def subset(self, gene_ids: Optional[Sequence[str]] = None,
               cell_ids: Optional[Sequence[str]] = None) -> 'ExpressionMatrix':
        """Select genes and/or cells by identifier, in the order given"""
        gene_index = None
        cell_index = None
        if gene_ids is not None:
            lookup = {g: i for i, g in enumerate(self.gene_ids)}
            missing = [g for g in gene_ids if g not in lookup]
            if missing:
                raise MatrixValidationError(f"unknown gene ids: {missing[:5]}")
            gene_index = np.array([lookup[g] for g in gene_ids], dtype=np.intp)
        if cell_ids is not None:
            lookup = {c: i for i, c in enumerate(self.cell_ids)}
            missing = [c for c in cell_ids if c not in lookup]
            if missing:
                raise MatrixValidationError(f"unknown cell ids: {missing[:5]}")
            cell_index = np.array([lookup[c] for c in cell_ids], dtype=np.intp)
        return self.select(gene_index, cell_index)

    def take_cells(self, indices: Sequence[int]) -> 'ExpressionMatrix':
        """Resample cells by position; repeated cells get '<id>~<n>' suffixes"""
        indices = np.asarray(indices, dtype=np.intp)
        seen: Dict[int, int] = {}
        cell_ids = []
        for i in indices:
            n = seen.get(int(i), 0)
            seen[int(i)] = n + 1
            base = self.cell_ids[i]
            cell_ids.append(base if n == 0 else f"{base}~{n}")
        return replace(self, values=self.values[:, indices], cell_ids=tuple(cell_ids))

    def content_hash(self) -> str:
        """SHA-256 over ids, layer and values; independent of representation"""
        digest = hashlib.sha256()
        digest.update(self.layer.value.encode())
        digest.update("\n".join(self.gene_ids).encode())
        digest.update(b"\0")
        digest.update("\n".join(self.cell_ids).encode())
        digest.update(b"\0")
        coo = sp_sparse.coo_matrix(self.values)
        order = np.lexsort((coo.col, coo.row))
        digest.update(np.asarray(coo.row[order], dtype='<i8').tobytes())
        digest.update(np.asarray(coo.col[order], dtype='<i8').tobytes())
        digest.update(np.asarray(coo.data[order], dtype='<f8').tobytes())
        return digest.hexdigest()

    def equals(self, other: 'ExpressionMatrix') -> bool:
        """Value equality of ids, layer and entries"""
        if self.gene_ids != other.gene_ids or self.cell_ids != other.cell_ids:
            return False
        if self.layer is not other.layer or self.shape != other.shape:
            return False
        return np.array_equal(self.dense(), other.dense())


@dataclass(frozen=True)
class CellAnnotation:
    """Per-cell labels aligned to a matrix's cell_ids"""
    cell_ids: Tuple[str, ...]
    labels: Tuple[str, ...]
    level: AnnotationLevel = AnnotationLevel.MAJOR

    def __post_init__(self):
        object.__setattr__(self, 'cell_ids', tuple(self.cell_ids))
        object.__setattr__(self, 'labels', tuple(str(label) for label in self.labels))
        if len(self.cell_ids) != len(self.labels):
            raise MatrixValidationError(
                f"annotation has {len(self.labels)} labels for {len(self.cell_ids)} cells"
            )
        if any(label == "" for label in self.labels):
            raise MatrixValidationError("every cell must have exactly one label")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices: Sequence[int]) -> 'CellAnnotation':
        """Labels of resampled cells, duplicates kept"""
        return CellAnnotation(
            cell_ids=tuple(self.cell_ids[i] for i in indices),
            labels=tuple(self.labels[i] for i in indices),
            level=self.level,
        )

    def check_aligned(self, m: ExpressionMatrix):
        if self.cell_ids != m.cell_ids:
            raise MatrixValidationError("annotation is not aligned to the matrix cell ids")


# --- Matrix Market ---

def _read_ids(path: Union[str, Path]) -> list:
    with open(path, 'r') as f:
        return [line.rstrip('\n').split('\t')[0] for line in f if line.strip()]


def load_mtx(path: Union[str, Path], genes_path: Union[str, Path],
             cells_path: Union[str, Path], layer: Optional[Layer] = None) -> ExpressionMatrix:
    """Load a Matrix Market coordinate file with one-id-per-line gene and cell files"""
    path = Path(path)
    with open(path, 'r') as f:
        header = f.readline().strip()
    parts = header.split()
    if (len(parts) != 5 or parts[0] != '%%MatrixMarket' or parts[1] != 'matrix'
            or parts[2] != 'coordinate' or parts[3] not in ('integer', 'real')
            or parts[4] != 'general'):
        raise MatrixFormatError(f"malformed header in {path}: {header!r}")
    try:
        n_rows, n_cols, n_entries, _, field_type, _ = sp_io.mminfo(str(path))
    except Exception as e:
        raise MatrixFormatError(f"malformed header in {path}: {e}") from e

    try:
        body = np.loadtxt(path, comments='%', skiprows=1, ndmin=2, dtype=np.float64)
    except ValueError as e:
        raise MatrixFormatError(f"malformed entry line in {path}: {e}") from e
    if body.shape[0] == 0:
        raise MatrixFormatError(f"malformed header in {path}: missing size line")
    # First non-comment line is the size line
    size_line, entries = body[0], body[1:]
    if size_line.shape[0] != 3 or (
            (int(size_line[0]), int(size_line[1]), int(size_line[2])) != (n_rows, n_cols, n_entries)):
        raise MatrixFormatError(f"malformed header in {path}: size line does not match")
    if entries.shape[0] != n_entries:
        raise MatrixFormatError(
            f"entry count mismatch in {path}: header declares {n_entries}, found {entries.shape[0]}"
        )
    if n_entries and entries.shape[1] != 3:
        raise MatrixFormatError(f"malformed entry line in {path}")

    rows = entries[:, 0].astype(np.int64) if n_entries else np.zeros(0, dtype=np.int64)
    cols = entries[:, 1].astype(np.int64) if n_entries else np.zeros(0, dtype=np.int64)
    data = entries[:, 2] if n_entries else np.zeros(0)
    if np.any((rows < 1) | (rows > n_rows) | (cols < 1) | (cols > n_cols)):
        raise MatrixFormatError(f"index out of range in {path} for a {n_rows}x{n_cols} matrix")
    flat = (rows - 1) * n_cols + (cols - 1)
    if np.unique(flat).shape[0] != flat.shape[0]:
        raise MatrixFormatError(f"duplicate coordinate in {path}")
    if np.any(data < 0):
        raise MatrixFormatError(f"negative value in {path}")

    values = sp_sparse.csr_matrix((data, (rows - 1, cols - 1)), shape=(n_rows, n_cols))
    gene_ids = _read_ids(genes_path)
    cell_ids = _read_ids(cells_path)
    if layer is None:
        layer = Layer.RAW_COUNTS if field_type == 'integer' or np.all(data == np.round(data)) \
            else Layer.NORMALIZED
    logger.info(f"Loaded {n_rows} genes x {n_cols} cells from {path} ({n_entries} entries)")
    try:
        return ExpressionMatrix(values, gene_ids, cell_ids, layer, {'source': str(path)})
    except MatrixValidationError as e:
        raise MatrixFormatError(str(e)) from e


def save_mtx(m: ExpressionMatrix, path: Union[str, Path],
             genes_path: Union[str, Path], cells_path: Union[str, Path]):
    """Write a Matrix Market coordinate file plus gene and cell id files"""
    field_type = 'integer' if m.layer is Layer.RAW_COUNTS else 'real'
    coo = sp_sparse.coo_matrix(m.values)
    if field_type == 'integer':
        coo = sp_sparse.coo_matrix((coo.data.astype(np.int64), (coo.row, coo.col)), shape=coo.shape)
    # mmwrite emits entries in coordinate order; precision=17 keeps real values exact
    sp_io.mmwrite(str(path), coo, field=field_type, symmetry='general', precision=17)
    written = Path(str(path) if str(path).endswith('.mtx') else f"{path}.mtx")
    if written != Path(path):
        written.replace(path)
    Path(genes_path).write_text("".join(f"{g}\n" for g in m.gene_ids))
    Path(cells_path).write_text("".join(f"{c}\n" for c in m.cell_ids))
    logger.info(f"Saved {m.n_genes} x {m.n_cells} matrix to {path}")


# --- Delimited text ---

def load_csv(path: Union[str, Path], delimiter: str = ',',
             layer: Optional[Layer] = None) -> ExpressionMatrix:
    """Load a delimited gene x cell grid; first row = cell ids, first column = gene ids"""
    path = Path(path)
    # pandas pads short rows silently, so widths are checked up front
    with open(path, 'r') as f:
        widths = [len(line.rstrip('\r\n').split(delimiter)) for line in f if line.strip()]
    if not widths:
        raise MatrixFormatError(f"empty table in {path}")
    for line_no, width in enumerate(widths, start=1):
        if width != widths[0]:
            raise MatrixFormatError(
                f"ragged row at line {line_no} in {path}: {width} fields, expected {widths[0]}"
            )
    try:
        frame = pd.read_csv(path, sep=delimiter, header=None, dtype=str,
                            keep_default_na=False, na_filter=False, skip_blank_lines=True)
    except pd.errors.ParserError as e:
        raise MatrixFormatError(f"ragged row in {path}: {e}") from e

    cell_ids = list(frame.iloc[0, 1:])
    gene_ids = list(frame.iloc[1:, 0])
    for kind, ids in (('gene', gene_ids), ('cell', cell_ids)):
        duplicates = _find_duplicates(ids)
        if duplicates:
            raise MatrixFormatError(f"duplicate id in {kind} ids of {path}: {duplicates[:5]}")

    body = frame.iloc[1:, 1:]
    try:
        values = body.to_numpy(dtype=object).astype(np.float64).reshape(len(gene_ids), len(cell_ids))
    except ValueError as e:
        raise MatrixFormatError(f"non-numeric body cell in {path}: {e}") from e
    if np.any(values < 0):
        raise MatrixFormatError(f"negative value in {path}")
    if layer is None:
        layer = Layer.RAW_COUNTS if np.all(values == np.round(values)) else Layer.NORMALIZED
    logger.info(f"Loaded {len(gene_ids)} genes x {len(cell_ids)} cells from {path}")
    try:
        return ExpressionMatrix(values, gene_ids, cell_ids, layer, {'source': str(path)})
    except MatrixValidationError as e:
        raise MatrixFormatError(str(e)) from e


def save_csv(m: ExpressionMatrix, path: Union[str, Path], delimiter: str = ','):
    """Write a delimited gene x cell grid that load_csv reads back bit-exactly"""
    values = m.dense()
    body = values.astype(np.int64) if m.layer is Layer.RAW_COUNTS else values
    frame = pd.DataFrame(body, index=list(m.gene_ids), columns=list(m.cell_ids))
    frame.index.name = 'gene'
    # 17 significant digits round-trip every float64
    frame.to_csv(path, sep=delimiter, float_format='%.17g')
    logger.info(f"Saved {m.n_genes} x {m.n_cells} matrix to {path}")


def load_matrix(path: Union[str, Path], genes_path: Optional[Union[str, Path]] = None,
                cells_path: Optional[Union[str, Path]] = None,
                layer: Optional[Layer] = None) -> ExpressionMatrix:
    """Dispatch on suffix: .mtx (with id files), .csv, .tsv/.txt"""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == '.mtx':
        stem = path.with_suffix('')
        genes_path = genes_path or Path(f"{stem}.genes.txt")
        cells_path = cells_path or Path(f"{stem}.cells.txt")
        return load_mtx(path, genes_path, cells_path, layer)
    if suffix == '.csv':
        return load_csv(path, ',', layer)
    if suffix in ('.tsv', '.txt'):
        return load_csv(path, '\t', layer)
    raise MatrixFormatError(f"unsupported matrix format: {path}")


def save_matrix(m: ExpressionMatrix, path: Union[str, Path]):
    """Counterpart of load_matrix"""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == '.mtx':
        stem = path.with_suffix('')
        save_mtx(m, path, Path(f"{stem}.genes.txt"), Path(f"{stem}.cells.txt"))
    elif suffix == '.csv':
        save_csv(m, path, ',')
    elif suffix in ('.tsv', '.txt'):
        save_csv(m, path, '\t')
    else:
        raise MatrixFormatError(f"unsupported matrix format: {path}")


def load_annotation(path: Union[str, Path], m: ExpressionMatrix,
                    level: AnnotationLevel = AnnotationLevel.MAJOR,
                    delimiter: Optional[str] = None) -> CellAnnotation:
    """Read a two-column cell_id -> label file and align it to m by id"""
    path = Path(path)
    if delimiter is None:
        delimiter = ',' if path.suffix.lower() == '.csv' else '\t'
    frame = pd.read_csv(path, sep=delimiter, header=None, dtype=str,
                        keep_default_na=False, usecols=[0, 1])
    # Skip a header row if its first field is not a known cell id
    known = set(m.cell_ids)
    if frame.shape[0] and frame.iloc[0, 0] not in known:
        frame = frame.iloc[1:]
    mapping: Dict[str, str] = {}
    for cell_id, label in frame.itertuples(index=False):
        if cell_id in mapping:
            raise MatrixFormatError(f"duplicate id in annotation {path}: {cell_id}")
        mapping[cell_id] = label
    missing = [c for c in m.cell_ids if c not in mapping]
    if missing:
        raise MatrixValidationError(
            f"{len(missing)} cells have no label in {path}, e.g. {missing[:5]}"
        )
    logger.info(f"Loaded {level.value} annotation for {m.n_cells} cells from {path}")
    return CellAnnotation(m.cell_ids, tuple(mapping[c] for c in m.cell_ids), level)


def save_annotation(annotation: CellAnnotation, path: Union[str, Path]):
    frame = pd.DataFrame({'cell_id': annotation.cell_ids, 'label': annotation.labels})
    frame.to_csv(path, sep='\t', index=False)


# --- Transforms ---

def filter_reference(m: ExpressionMatrix, min_cell_total: float = 1000,
                     min_gene_nonzero_fraction: float = 0.1) -> ExpressionMatrix:
    """Keep high-quality cells, then genes nonzero in enough of the kept cells.

    Dropping genes lowers cell totals, so the two passes repeat until neither
    removes anything; the result is a fixed point of the filter.
    """
    if m.layer is not Layer.RAW_COUNTS:
        raise MatrixValidationError("filter_reference requires a raw_counts matrix")
    if not 0.0 <= min_gene_nonzero_fraction <= 1.0:
        raise MatrixValidationError("min_gene_nonzero_fraction must lie in [0, 1]")

    filtered = m
    rounds = 0
    while True:
        rounds += 1
        keep_cells = np.flatnonzero(filtered.cell_totals() >= min_cell_total)
        if keep_cells.size == 0:
            raise MatrixValidationError(f"filter removes all cells (min_cell_total={min_cell_total})")
        cells_kept = filtered.select(cell_index=keep_cells)

        fractions = cells_kept.gene_nonzero_counts() / cells_kept.n_cells
        keep_genes = np.flatnonzero(fractions >= min_gene_nonzero_fraction)
        if keep_genes.size == 0:
            raise MatrixValidationError(
                f"filter removes all genes (min_gene_nonzero_fraction={min_gene_nonzero_fraction})"
            )
        unchanged = keep_cells.size == filtered.n_cells and keep_genes.size == cells_kept.n_genes
        filtered = cells_kept.select(gene_index=keep_genes)
        if unchanged:
            break
    logger.info(
        f"Reference filter kept {filtered.n_genes}/{m.n_genes} genes "
        f"and {filtered.n_cells}/{m.n_cells} cells after {rounds} round(s)"
    )
    return filtered.with_values(filtered.values, metadata={
        'filter': {
            'min_cell_total': min_cell_total,
            'min_gene_nonzero_fraction': min_gene_nonzero_fraction,
        }
    })


def normalize(m: ExpressionMatrix) -> ExpressionMatrix:
    """log1p(raw * median library size / cell library size)"""
    if m.layer is not Layer.RAW_COUNTS:
        raise MatrixValidationError("normalize requires a raw_counts matrix")
    totals = m.cell_totals()
    zero = np.flatnonzero(totals <= 0)
    if zero.size:
        raise MatrixValidationError(
            f"zero-sum cell cannot be normalized: {[m.cell_ids[i] for i in zero[:5]]}"
        )
    scale = np.median(totals) / totals
    if m.is_sparse:
        values = m.values.multiply(scale[np.newaxis, :]).tocsr()
        values.data = np.log1p(values.data)
    else:
        values = np.log1p(m.values * scale[np.newaxis, :])
    return m.with_values(values, layer=Layer.NORMALIZED, metadata={
        'normalization': 'median_library_size_log1p'
    })
