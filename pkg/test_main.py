import json

import numpy as np
import pandas as pd
import pytest
import yaml

import main
from expression import CellAnnotation, ExpressionMatrix, Layer, load_matrix, save_annotation, save_matrix


@pytest.fixture
def dataset(tmp_path):
    """Raw counts for three separated cell groups plus their labels, saved to disk"""
    rng = np.random.default_rng(0)
    rates = np.full((30, 45), 1.0)
    for group in range(3):
        rates[group * 10:(group + 1) * 10, group * 15:(group + 1) * 15] = 40.0
    values = rng.poisson(rates).astype(float)
    m = ExpressionMatrix(values, [f"g{i}" for i in range(30)], [f"c{j}" for j in range(45)],
                         Layer.RAW_COUNTS)
    truth = CellAnnotation(m.cell_ids, [f"type{j // 15}" for j in range(45)])
    save_matrix(m, tmp_path / 'counts.csv')
    save_annotation(truth, tmp_path / 'truth.tsv')
    return m, tmp_path


def run(tmp_path, *argv):
    return main.main(['--out-dir', str(tmp_path / 'out'), *argv])


def test_ingest_filters_cells(dataset):
    m, tmp_path = dataset
    totals = m.cell_totals()
    threshold = float(np.median(totals))
    assert run(tmp_path, 'ingest', '--in', str(tmp_path / 'counts.csv'),
               '--min-cell-total', str(threshold), '--out', 'ref.csv') == 0
    filtered = load_matrix(tmp_path / 'out' / 'ref.csv')
    assert filtered.n_cells == int(np.sum(totals >= threshold))
    sidecar = json.loads((tmp_path / 'out' / 'ref.csv.json').read_text())
    assert sidecar['source_hash'] == m.content_hash()
    assert sidecar['content_hash'] == filtered.content_hash()


def test_stats_writes_curves(dataset):
    _, tmp_path = dataset
    assert run(tmp_path, 'stats', '--in', str(tmp_path / 'counts.csv'), '--bins', '5') == 0
    out = tmp_path / 'out'
    summaries = pd.read_csv(out / 'gene_summaries.tsv', sep='\t')
    assert len(summaries) == 30
    curve = json.loads((out / 'curve_sd.json').read_text())
    assert len(curve['bin_edges']) == 6
    assert curve['metadata']['layer'] == 'raw_counts'
    for name in ('curve_zero_fraction.json', 'histogram_mean.json', 'histogram_sd.json'):
        assert (out / name).exists()


def test_simulate_then_compare(dataset):
    m, tmp_path = dataset
    assert run(tmp_path, '--seed', '7', 'simulate', '--in', str(tmp_path / 'counts.csv'),
               '--out', 'syn.csv') == 0
    out = tmp_path / 'out'
    synthetic = load_matrix(out / 'syn.csv')
    assert synthetic.gene_ids == m.gene_ids and synthetic.cell_ids == m.cell_ids
    tau = pd.read_csv(out / 'syn.tau.tsv', sep='\t')
    assert len(tau) == m.n_cells and (tau['tau'] > 0).all()
    provenance = json.loads((out / 'syn.csv.json').read_text())['provenance']
    assert provenance['seed'] == 7

    assert run(tmp_path, 'compare', '--reference', str(tmp_path / 'counts.csv'),
               '--other', str(out / 'syn.csv'), '--bins', '4') == 0
    fidelity = json.loads((out / 'fidelity.json').read_text())
    assert set(fidelity['lower_fraction']) == {'sd', 'zero_fraction'}
    assert (out / 'r2.json').exists() and (out / 'r2.tsv').exists()


def test_pca_cluster_evaluate_pipeline(dataset):
    _, tmp_path = dataset
    out = tmp_path / 'out'
    assert run(tmp_path, 'pca', '--in', str(tmp_path / 'counts.csv'), '--pcs', '3',
               '--out', 'pca.tsv') == 0
    assert run(tmp_path, 'cluster', '--in', str(out / 'pca.tsv'), '--k', '3',
               '--out', 'labels.tsv') == 0
    assert run(tmp_path, 'evaluate', '--truth', str(tmp_path / 'truth.tsv'),
               '--pred', str(out / 'labels.tsv'), '--contingency', 'table.csv') == 0
    report = json.loads((out / 'report.json').read_text())
    assert report['ari'] == pytest.approx(1.0)
    assert report['purity'] == 1.0
    assert report['nmi_normalization'] == 'arithmetic'
    table = pd.read_csv(out / 'table.csv')
    assert table.drop(columns=['truth']).to_numpy().sum() == 45


def test_embed(dataset):
    _, tmp_path = dataset
    out = tmp_path / 'out'
    assert run(tmp_path, 'pca', '--in', str(tmp_path / 'counts.csv'), '--pcs', '3',
               '--out', 'pca.tsv') == 0
    assert run(tmp_path, 'embed', '--in', str(out / 'pca.tsv'), '--perplexity', '5',
               '--iter', '60', '--out', 'tsne.tsv') == 0
    frame = pd.read_csv(out / 'tsne.tsv', sep='\t')
    assert list(frame.columns) == ['cell_id', 'tSNE1', 'tSNE2']
    assert len(frame) == 45


def test_evaluate_rejects_mismatched_cells(dataset):
    _, tmp_path = dataset
    pd.DataFrame({'cell_id': ['c0', 'c1'], 'label': [0, 1]}).to_csv(
        tmp_path / 'short.tsv', sep='\t', index=False)
    assert run(tmp_path, 'evaluate', '--truth', str(tmp_path / 'truth.tsv'),
               '--pred', str(tmp_path / 'short.tsv')) == 1


def test_bench_from_config_file(dataset):
    _, tmp_path = dataset
    config = tmp_path / 'bench.yaml'
    config.write_text(yaml.safe_dump({
        'k_values': [3],
        'n_pcs': 3,
        'n_bootstrap': 2,
        'datasets': {'counts': 'counts.csv'},
        'truth': 'truth.tsv',
        'system': {'log_level': 'WARNING', 'log_file': None},
    }))
    assert main.main(['--config', str(config), '--out-dir', str(tmp_path / 'out'),
                      'bench', '--bootstrap', '3']) == 0
    summary = json.loads((tmp_path / 'out' / 'summary.json').read_text())
    assert summary['mode']['n_bootstrap'] == 3
    assert summary['summary']['counts']['3']['ari']['median'] == pytest.approx(1.0)
    frame = pd.read_csv(tmp_path / 'out' / 'replicates.csv')
    assert len(frame) == 3


def test_bench_dataset_and_truth_flags(dataset):
    _, tmp_path = dataset
    assert run(tmp_path, 'bench', '--k', '2,3', '--pcs', '3', '--bootstrap', '1',
               '--dataset', f"counts={tmp_path / 'counts.csv'}",
               '--truth', str(tmp_path / 'truth.tsv')) == 0
    frame = pd.read_csv(tmp_path / 'out' / 'replicates.csv')
    assert sorted(frame['k']) == [2, 3]


def test_bench_without_datasets_fails(tmp_path):
    config = tmp_path / 'empty.yaml'
    config.write_text("k_values: [3]\n")
    assert main.main(['--config', str(config), '--out-dir', str(tmp_path / 'out'), 'bench']) == 1


def test_unreadable_config(tmp_path):
    assert main.main(['--config', str(tmp_path / 'missing.yaml'), 'bench']) == 1


def test_subcommand_flags_after_the_subcommand(dataset):
    m, tmp_path = dataset
    out = tmp_path / 'late'
    assert main.main(['simulate', '--reference', str(tmp_path / 'counts.csv'),
                      '--gamma-shape', '10', '--gamma-scale', '0.1', '--seed', '11',
                      '--out', 'syn.csv', '--out-dir', str(out)]) == 0
    provenance = json.loads((out / 'syn.csv.json').read_text())['provenance']
    assert provenance['seed'] == 11

    assert main.main(['pca', '--in', str(tmp_path / 'counts.csv'), '--components', '4',
                      '--out', 'pca.tsv', '--out-dir', str(out)]) == 0
    frame = pd.read_csv(out / 'pca.tsv', sep='\t')
    assert frame.shape == (m.n_cells, 5)

    assert main.main(['embed', '--in', str(out / 'pca.tsv'), '--perplexity', '5',
                      '--iter', '30', '--seed', '3', '--out', 'tsne.tsv',
                      '--out-dir', str(out)]) == 0
    assert (out / 'tsne.tsv').exists()


def test_late_seed_does_not_clear_global_flags():
    args = main.build_parser().parse_args(['--seed', '5', '--out-dir', 'x', 'pca',
                                          '--in', 'm.csv', '--out', 'p.tsv'])
    assert (args.seed, args.out_dir, args.pcs) == (5, 'x', None)
    args = main.build_parser().parse_args(['--seed', '5', 'pca', '--in', 'm.csv',
                                          '--out', 'p.tsv', '--seed', '9'])
    assert args.seed == 9


def test_evaluate_accepts_headerless_truth(dataset):
    _, tmp_path = dataset
    (tmp_path / 'truth_plain.tsv').write_text("c0\tA\nc1\tA\nc2\tB\nc3\tB\n")
    pd.DataFrame({'cell_id': ['c0', 'c1', 'c2', 'c3'], 'label': [0, 0, 1, 1]}).to_csv(
        tmp_path / 'pred.tsv', sep='\t', index=False)
    assert run(tmp_path, 'evaluate', '--truth', str(tmp_path / 'truth_plain.tsv'),
               '--pred', str(tmp_path / 'pred.tsv')) == 0
    report = json.loads((tmp_path / 'out' / 'report.json').read_text())
    assert report['n'] == 4
    assert report['ari'] == 1.0


def test_default_config_paths_follow_the_project(tmp_path):
    document = {'datasets': {'x': 'data/x.mtx'}, 'truth': {3: 'data/t.tsv'}, 'k_values': [3]}
    args = main.build_parser().parse_args(['bench'])
    cfg = main._bench_config(args, document)
    assert cfg.datasets[0].matrix == main.PROJECT_DIR / 'data' / 'x.mtx'
    assert cfg.truth[3] == main.PROJECT_DIR / 'data' / 't.tsv'

    config = tmp_path / 'bench.yaml'
    args = main.build_parser().parse_args(['--config', str(config), 'bench'])
    assert main._bench_config(args, document).datasets[0].matrix == tmp_path / 'data' / 'x.mtx'
