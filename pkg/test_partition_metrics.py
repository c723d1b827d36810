from itertools import combinations

import numpy as np
import pytest

from hclust import Partition
from partition_metrics import (
    NMI_NORMALIZATION,
    DegenerateFlag,
    MetricError,
    ari,
    contingency,
    evaluate,
    jaccard_pairs,
    nmi,
    purity,
    write_contingency,
)


def P(labels):
    return Partition.from_labels(labels)


def pair_oracle(truth, pred):
    """ARI, Jaccard, NMI and purity by exhaustive pair and label enumeration"""
    n = len(truth)
    n11 = n10 = n01 = n00 = 0
    for i, j in combinations(range(n), 2):
        same_truth = truth[i] == truth[j]
        same_pred = pred[i] == pred[j]
        if same_truth and same_pred:
            n11 += 1
        elif same_truth:
            n10 += 1
        elif same_pred:
            n01 += 1
        else:
            n00 += 1
    denominator = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11)
    ari_value = 1.0 if denominator == 0 else 2.0 * (n00 * n11 - n01 * n10) / denominator
    union = n11 + n10 + n01
    jaccard_value = 1.0 if union == 0 else n11 / union

    def entropy(labels):
        values = [labels.count(v) / n for v in set(labels)]
        return -sum(p * np.log(p) for p in values)

    h_t, h_p = entropy(list(truth)), entropy(list(pred))
    mi = 0.0
    for t in set(truth):
        for p in set(pred):
            joint = sum(1 for a, b in zip(truth, pred) if a == t and b == p) / n
            if joint > 0:
                mi += joint * np.log(joint / (list(truth).count(t) / n * list(pred).count(p) / n))
    if h_t == 0 and h_p == 0:
        nmi_value = 1.0
    elif h_t == 0 or h_p == 0:
        nmi_value = 0.0
    else:
        nmi_value = mi / ((h_t + h_p) / 2)

    majority = sum(max(sum(1 for a, b in zip(truth, pred) if b == p and a == t) for t in set(truth))
                   for p in set(pred))
    return ari_value, jaccard_value, nmi_value, majority / n


def test_contingency_counts():
    table = contingency(P([0, 0, 1, 1]), P([0, 1, 0, 1]))
    np.testing.assert_array_equal(table.counts, np.ones((2, 2)))
    assert table.n == 4
    diagonal = contingency(P(["a", "b", "b"]), P(["a", "b", "b"]))
    np.testing.assert_array_equal(diagonal.counts, [[1, 0], [0, 2]])
    assert diagonal.row_names == ("a", "b")


def test_contingency_matches_per_item_tally():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 13))
        truth = P(rng.integers(0, 3, n))
        pred = P(rng.integers(0, 4, n))
        expected = np.zeros((truth.k, pred.k), dtype=np.int64)
        for t, p in zip(truth.labels, pred.labels):
            expected[t, p] += 1
        np.testing.assert_array_equal(contingency(truth, pred).counts, expected)


def test_length_mismatch():
    with pytest.raises(MetricError, match="length mismatch"):
        contingency(P([0, 1]), P([0, 1, 1]))


def test_independent_split_example():
    report = evaluate(P([1, 1, 2, 2]), P([1, 2, 1, 2]))
    assert report.ari == pytest.approx(-0.5)
    assert report.jaccard == 0.0
    assert report.nmi == pytest.approx(0.0, abs=1e-12)
    assert report.purity == 0.5
    assert report.n == 4


def test_purity_example():
    table = contingency(P([1, 2, 2, 2]), P([1, 1, 2, 2]))
    assert purity(table) == pytest.approx(0.75)


def test_identical_partitions():
    labels = [0, 0, 1, 2, 2, 2, 3]
    report = evaluate(P(labels), P(labels))
    assert (report.ari, report.jaccard, report.purity) == (1.0, 1.0, 1.0)
    assert report.nmi == pytest.approx(1.0)
    assert report.degenerate_flags == frozenset()
    assert report.nmi_normalization == NMI_NORMALIZATION


def test_both_single_cluster():
    report = evaluate(P(["x"] * 5), P([0] * 5))
    assert report.ari == 1.0
    assert report.jaccard == 1.0
    assert report.nmi == 1.0
    assert report.purity == 1.0
    assert DegenerateFlag.BOTH_TRIVIAL in report.degenerate_flags


def test_both_all_singletons():
    report = evaluate(P(range(6)), P(range(6)))
    assert report.ari == 1.0
    assert report.jaccard == 1.0
    assert report.nmi == pytest.approx(1.0)
    assert DegenerateFlag.SINGLETON_CLUSTERS in report.degenerate_flags


def test_singleton_prediction_has_full_purity():
    table = contingency(P([0, 0, 1, 1, 1]), P(range(5)))
    assert purity(table) == 1.0


def test_one_trivial_side_gives_zero_nmi():
    table = contingency(P([0] * 4), P([0, 0, 1, 1]))
    assert nmi(table) == 0.0
    assert ari(table) == 0.0


def test_pair_metrics_need_two_items():
    table = contingency(P([0]), P([0]))
    with pytest.raises(MetricError):
        ari(table)
    with pytest.raises(MetricError):
        jaccard_pairs(table)
    assert nmi(table) == 1.0
    assert purity(table) == 1.0


def test_metrics_match_exhaustive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(500):
        n = int(rng.integers(2, 13))
        truth = rng.integers(0, int(rng.integers(1, 5)), n)
        pred = rng.integers(0, int(rng.integers(1, 6)), n)
        report = evaluate(P(truth), P(pred))
        expected = pair_oracle(truth.tolist(), pred.tolist())
        got = (report.ari, report.jaccard, report.nmi, report.purity)
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)
        assert 0.0 <= report.nmi <= 1.0
        assert -1.0 <= report.ari <= 1.0


def test_relabeling_and_reordering_invariance():
    rng = np.random.default_rng(2)
    truth = rng.integers(0, 3, 30)
    pred = rng.integers(0, 4, 30)
    base = evaluate(P(truth), P(pred))
    renamed = evaluate(P([f"t{9 - t}" for t in truth]), P([(p + 2) % 4 for p in pred]))
    order = rng.permutation(30)
    reordered = evaluate(P(truth[order]), P(pred[order]))
    for other in (renamed, reordered):
        assert other.ari == pytest.approx(base.ari, abs=1e-15)
        assert other.jaccard == pytest.approx(base.jaccard, abs=1e-15)
        assert other.nmi == pytest.approx(base.nmi, abs=1e-12)
        assert other.purity == base.purity


def test_random_partitions_have_ari_near_zero():
    rng = np.random.default_rng(3)
    values = [evaluate(P(rng.integers(0, 5, 100)), P(rng.integers(0, 5, 100))).ari
              for _ in range(1000)]
    assert abs(np.mean(values)) < 0.02


def test_splitting_a_cluster_never_lowers_purity():
    rng = np.random.default_rng(4)
    truth = P(rng.integers(0, 3, 40))
    labels = rng.integers(0, 4, 40)
    before = purity(contingency(truth, P(labels)))
    split = labels.copy()
    members = np.flatnonzero(labels == 0)
    split[members[::2]] = 4
    assert purity(contingency(truth, P(split))) >= before


def test_duplicated_items_count_as_distinct():
    truth = P(["a", "a", "b", "b"])
    pred = P([0, 1, 1, 1])
    indices = [0, 0, 1, 2, 3, 3]
    report = evaluate(truth.take(indices), pred.take(indices))
    expected = pair_oracle(["a", "a", "a", "b", "b", "b"], [0, 0, 1, 1, 1, 1])
    np.testing.assert_allclose((report.ari, report.jaccard, report.nmi, report.purity),
                               expected, atol=1e-12)


def test_report_to_dict():
    document = evaluate(P([0, 0, 1]), P([0, 0, 0])).to_dict()
    assert set(document) == {'ari', 'jaccard', 'nmi', 'purity', 'n',
                             'degenerate_flags', 'nmi_normalization'}
    assert document['degenerate_flags'] == []
    assert document['nmi'] == 0.0


def test_write_contingency(tmp_path):
    table = contingency(P(["b", "a", "b"]), P([1, 1, 0]))
    write_contingency(table, tmp_path / "table.csv")
    lines = (tmp_path / "table.csv").read_text().splitlines()
    assert lines[0] == "truth,1,0"
    assert lines[1] == "b,1,1"
    assert lines[2] == "a,1,0"
