import numpy as np
import pytest

from expression import (
    AnnotationLevel,
    CellAnnotation,
    ExpressionMatrix,
    Layer,
    MatrixFormatError,
    MatrixValidationError,
    filter_reference,
    load_annotation,
    load_csv,
    load_matrix,
    load_mtx,
    normalize,
    save_csv,
    save_matrix,
)

HEADER = "%%MatrixMarket matrix coordinate integer general"


def write_mtx(tmp_path, lines, header=HEADER, genes=("g1", "g2"), cells=("c1", "c2", "c3")):
    path = tmp_path / "m.mtx"
    path.write_text("\n".join([header] + list(lines)) + "\n")
    genes_path = tmp_path / "genes.txt"
    cells_path = tmp_path / "cells.txt"
    genes_path.write_text("\n".join(genes) + "\n")
    cells_path.write_text("\n".join(cells) + "\n")
    return path, genes_path, cells_path


def matrix(values, layer=Layer.RAW_COUNTS):
    values = np.asarray(values, dtype=float)
    genes = [f"g{i + 1}" for i in range(values.shape[0])]
    cells = [f"c{j + 1}" for j in range(values.shape[1])]
    return ExpressionMatrix(values, genes, cells, layer)


# --- Matrix Market ---

def test_load_mtx_parses_coordinates(tmp_path):
    m = load_mtx(*write_mtx(tmp_path, ["2 3 2", "1 1 5", "2 3 1"]))
    np.testing.assert_array_equal(m.dense(), [[5, 0, 0], [0, 0, 1]])
    assert m.gene_ids == ("g1", "g2")
    assert m.cell_ids == ("c1", "c2", "c3")
    assert m.layer is Layer.RAW_COUNTS


def test_load_mtx_skips_comment_lines(tmp_path):
    m = load_mtx(*write_mtx(tmp_path, ["% written by hand", "2 3 1", "2 2 7"]))
    assert m.dense()[1, 1] == 7


@pytest.mark.parametrize("lines, message", [
    (["2 3 3", "1 1 5", "2 3 1"], "entry count mismatch"),
    (["2 3 1", "3 1 2"], "index out of range"),
    (["2 3 1", "1 4 2"], "index out of range"),
    (["2 3 2", "1 1 5", "1 1 2"], "duplicate coordinate"),
])
def test_load_mtx_rejects_bad_bodies(tmp_path, lines, message):
    with pytest.raises(MatrixFormatError, match=message):
        load_mtx(*write_mtx(tmp_path, lines))


def test_load_mtx_rejects_negative_values(tmp_path):
    paths = write_mtx(tmp_path, ["2 3 1", "1 1 -1.5"],
                      header="%%MatrixMarket matrix coordinate real general")
    with pytest.raises(MatrixFormatError, match="negative value"):
        load_mtx(*paths)


def test_load_mtx_rejects_malformed_header(tmp_path):
    paths = write_mtx(tmp_path, ["2 3", "1 2 3 4 5 6"],
                      header="%%MatrixMarket matrix array real general")
    with pytest.raises(MatrixFormatError, match="malformed header"):
        load_mtx(*paths)


def test_load_mtx_rejects_duplicate_gene_ids(tmp_path):
    paths = write_mtx(tmp_path, ["2 3 1", "1 1 5"], genes=("Gad1", "Gad1"))
    with pytest.raises(MatrixFormatError, match="duplicate id"):
        load_mtx(*paths)


def test_mtx_round_trip(tmp_path):
    values = np.zeros((4, 5))
    values[0, 1] = 3
    values[2, 4] = 12
    values[3, 0] = 1
    m = matrix(values)
    save_matrix(m, tmp_path / "x.mtx")
    assert (tmp_path / "x.genes.txt").exists()
    loaded = load_matrix(tmp_path / "x.mtx")
    assert loaded.equals(m)
    assert loaded.content_hash() == m.content_hash()


def test_mtx_round_trip_of_real_values(tmp_path):
    values = np.zeros((3, 4))
    values[0, 0] = np.log1p(2.0)
    values[2, 3] = 1.0 / 3.0
    m = matrix(values, Layer.NORMALIZED)
    save_matrix(m, tmp_path / "n.mtx")
    loaded = load_matrix(tmp_path / "n.mtx")
    assert loaded.layer is Layer.NORMALIZED
    np.testing.assert_allclose(loaded.dense(), m.dense(), rtol=1e-15)


# --- Delimited text ---

def test_load_csv_grid(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("gene,c1,c2\ng1,0,1\ng2,2,3\n")
    m = load_csv(path)
    np.testing.assert_array_equal(m.dense(), [[0, 1], [2, 3]])
    assert m.gene_ids == ("g1", "g2")
    assert m.cell_ids == ("c1", "c2")
    assert not m.is_sparse


@pytest.mark.parametrize("text, message", [
    ("gene,c1,c2,c3\ng1,0,1\n", "ragged row"),
    ("gene,c1,c2\nGad1,0,1\nGad1,2,3\n", "duplicate id"),
    ("gene,c1,c1\ng1,0,1\n", "duplicate id"),
    ("gene,c1,c2\ng1,zero,1\n", "non-numeric"),
    ("gene,c1,c2\ng1,-1,1\n", "negative value"),
])
def test_load_csv_rejects_bad_tables(tmp_path, text, message):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(MatrixFormatError, match=message):
        load_csv(path)


def test_csv_round_trip_is_exact(tmp_path):
    m = matrix(np.log1p([[1.0, 2.0, 0.5], [3.0, 0.0, 7.25]]), Layer.NORMALIZED)
    save_csv(m, tmp_path / "n.csv")
    loaded = load_csv(tmp_path / "n.csv")
    assert loaded.layer is Layer.NORMALIZED
    assert loaded.equals(m)


def test_tsv_dispatch(tmp_path):
    m = matrix([[1, 2], [3, 4]])
    save_matrix(m, tmp_path / "m.tsv")
    assert load_matrix(tmp_path / "m.tsv").equals(m)


def test_unsupported_suffix(tmp_path):
    with pytest.raises(MatrixFormatError, match="unsupported"):
        load_matrix(tmp_path / "m.h5ad")


# --- Matrix invariants ---

def test_mostly_zero_matrix_is_sparse():
    values = np.zeros((10, 10))
    values[0, 0] = 1
    assert matrix(values).is_sparse
    assert not matrix(np.ones((3, 3))).is_sparse


def test_values_are_read_only():
    dense = matrix(np.ones((2, 2)))
    with pytest.raises(ValueError):
        dense.values[0, 0] = 5
    values = np.zeros((10, 10))
    values[1, 1] = 2
    sparse = matrix(values)
    with pytest.raises(ValueError):
        sparse.values.data[0] = 5


@pytest.mark.parametrize("values, layer, message", [
    ([[1, -1]], Layer.RAW_COUNTS, "negative"),
    ([[1, np.nan]], Layer.NORMALIZED, "non-finite"),
    ([[1, 0.5]], Layer.RAW_COUNTS, "non-integer"),
])
def test_invalid_values(values, layer, message):
    with pytest.raises(MatrixValidationError, match=message):
        matrix(values, layer)


def test_duplicate_ids_rejected():
    with pytest.raises(MatrixValidationError, match="duplicate id"):
        ExpressionMatrix(np.ones((2, 1)), ["Gad1", "Gad1"], ["c1"])


def test_dimension_mismatch_rejected():
    with pytest.raises(MatrixValidationError):
        ExpressionMatrix(np.ones((2, 2)), ["g1"], ["c1", "c2"])


def test_take_cells_suffixes_duplicates():
    m = matrix([[1, 2, 3], [4, 5, 6]])
    resampled = m.take_cells([0, 0, 2, 0])
    assert resampled.cell_ids == ("c1", "c1~1", "c3", "c1~2")
    np.testing.assert_array_equal(resampled.dense(), [[1, 1, 3, 1], [4, 4, 6, 4]])


def test_subset_by_id_keeps_requested_order():
    m = matrix([[1, 2, 3], [4, 5, 6]])
    sub = m.subset(gene_ids=["g2"], cell_ids=["c3", "c1"])
    np.testing.assert_array_equal(sub.dense(), [[6, 4]])
    with pytest.raises(MatrixValidationError, match="unknown cell"):
        m.subset(cell_ids=["c9"])


def test_content_hash_tracks_values():
    a = matrix([[1, 2], [3, 4]])
    b = matrix([[1, 2], [3, 4]])
    c = matrix([[1, 2], [3, 5]])
    assert a.content_hash() == b.content_hash()
    assert a.content_hash() != c.content_hash()


# --- Reference filter ---

def test_vacuous_filter_returns_input():
    m = matrix([[0, 1, 2], [3, 0, 0]])
    assert filter_reference(m, 0, 0).equals(m)


def test_filter_drops_low_total_cells():
    m = matrix([[6, 1], [4, 0]])
    filtered = filter_reference(m, min_cell_total=5, min_gene_nonzero_fraction=0)
    assert filtered.cell_ids == ("c1",)


def test_filter_drops_genes_after_cell_filter():
    m = matrix([[1, 0], [2, 3]])
    filtered = filter_reference(m, min_cell_total=0, min_gene_nonzero_fraction=0.6)
    assert filtered.gene_ids == ("g2",)
    assert filtered.metadata["filter"]["min_gene_nonzero_fraction"] == 0.6


def test_filter_repeats_until_totals_hold():
    # Dropping g3 leaves c3 with a total of 2
    m = matrix([[3, 3, 2], [3, 3, 0], [0, 0, 3]])
    once = filter_reference(m, 5, 0.6)
    assert once.cell_ids == ("c1", "c2")
    assert once.gene_ids == ("g1", "g2")
    assert filter_reference(once, 5, 0.6).equals(once)


@pytest.mark.parametrize("seed", range(20))
def test_filter_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    rates = rng.gamma(0.5, 4.0, (40, 1)) * rng.uniform(0.5, 1.5, (1, 30))
    m = matrix(rng.poisson(rates))
    threshold = 0.5 * float(np.median(m.cell_totals()))
    once = filter_reference(m, threshold, 0.3)
    assert np.all(once.cell_totals() >= threshold)
    assert np.all(once.gene_nonzero_counts() / once.n_cells >= 0.3)
    assert filter_reference(once, threshold, 0.3).equals(once)


def test_filter_removing_everything_is_an_error():
    m = matrix([[1, 0], [2, 3]])
    with pytest.raises(MatrixValidationError, match="removes all cells"):
        filter_reference(m, min_cell_total=100)
    with pytest.raises(MatrixValidationError, match="removes all genes"):
        filter_reference(matrix([[1, 0], [0, 1]]), 0, 1.0)


# --- Normalization ---

def test_normalize_equal_library_sizes():
    n = normalize(matrix([[2, 0], [0, 2]]))
    assert n.layer is Layer.NORMALIZED
    assert n.dense()[0, 0] == pytest.approx(np.log1p(2.0))
    assert n.dense()[0, 0] == pytest.approx(1.0986, abs=1e-4)


def test_normalize_scales_to_median_library_size():
    n = normalize(matrix([[0, 0], [1, 3]])).dense()
    np.testing.assert_array_equal(n[0], [0, 0])
    assert n[1, 1] == pytest.approx(np.log1p(3 * 2 / 3))
    assert n[1, 0] == pytest.approx(np.log1p(2.0))


def test_normalize_sparse_matches_formula():
    rng = np.random.default_rng(3)
    values = np.where(rng.random((30, 12)) < 0.2, rng.integers(1, 20, (30, 12)), 0)
    values[0, :] = 1
    m = matrix(values)
    assert m.is_sparse
    totals = values.sum(axis=0)
    expected = np.log1p(values * np.median(totals) / totals)
    np.testing.assert_allclose(normalize(m).dense(), expected, rtol=1e-12)


def test_normalize_keeps_zero_pattern_and_order_within_cells():
    rng = np.random.default_rng(4)
    values = np.where(rng.random((25, 15)) < 0.4, rng.integers(1, 50, (25, 15)), 0)
    values[0, :] += 1
    raw = matrix(values).dense()
    normed = normalize(matrix(values)).dense()
    np.testing.assert_array_equal(normed == 0, raw == 0)
    for cell in range(raw.shape[1]):
        a, b = raw[:, cell], normed[:, cell]
        lower = a[:, np.newaxis] < a[np.newaxis, :]
        assert np.all((b[:, np.newaxis] < b[np.newaxis, :])[lower])


def test_normalize_rejects_zero_sum_cell():
    with pytest.raises(MatrixValidationError, match="zero-sum cell"):
        normalize(matrix([[1, 0], [2, 0]]))


def test_normalize_requires_raw_counts():
    with pytest.raises(MatrixValidationError):
        normalize(matrix([[0.5, 1.5]], Layer.NORMALIZED))


# --- Annotations ---

def test_load_annotation_aligns_by_id(tmp_path):
    m = matrix([[1, 2, 3]])
    path = tmp_path / "labels.tsv"
    path.write_text("cell_id\tlabel\nc3\tneuron\nc1\tglia\nc2\tneuron\n")
    annotation = load_annotation(path, m)
    assert annotation.labels == ("glia", "neuron", "neuron")
    assert annotation.level is AnnotationLevel.MAJOR
    annotation.check_aligned(m)


def test_load_annotation_requires_every_cell(tmp_path):
    m = matrix([[1, 2, 3]])
    path = tmp_path / "labels.tsv"
    path.write_text("c1\tglia\nc2\tneuron\n")
    with pytest.raises(MatrixValidationError, match="no label"):
        load_annotation(path, m)


def test_load_annotation_rejects_duplicates(tmp_path):
    m = matrix([[1, 2]])
    path = tmp_path / "labels.tsv"
    path.write_text("c1\tglia\nc1\tneuron\nc2\tneuron\n")
    with pytest.raises(MatrixFormatError, match="duplicate id"):
        load_annotation(path, m)


def test_annotation_take_keeps_duplicates():
    annotation = CellAnnotation(("c1", "c2"), ("a", "b"))
    assert annotation.take([1, 1, 0]).labels == ("b", "b", "a")


def test_annotation_requires_labels():
    with pytest.raises(MatrixValidationError):
        CellAnnotation(("c1", "c2"), ("a",))
