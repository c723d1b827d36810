#!/usr/bin/env python3
"""
CellBench - Main Application Entry Point
Command-line tools for benchmarking single-cell imputation: ingest, fidelity
statistics, semi-synthetic simulation, PCA / tSNE, clustering, evaluation and
the bootstrap benchmark
"""

import sys
import os
import signal
import logging
import argparse
import threading
from pathlib import Path
from typing import List, Optional

import pandas as pd
import yaml

# Add project directory to path
PROJECT_DIR = Path(__file__).parent.absolute()
sys.path.insert(0, str(PROJECT_DIR))

import bench
import gene_stats
from dimred import TsneConfig, pca, read_embedding, tsne, write_embedding
from expression import ExpressionMatrix, Layer, filter_reference, load_matrix, normalize, save_matrix
from hclust import Linkage, Partition, cut, linkage, read_labels, write_labels
from partition_metrics import contingency, evaluate, write_contingency
from persistence import OutputDirectory, write_sidecar, write_table
from synth import SynthConfig, generate

shutdown_event = threading.Event()

logger = logging.getLogger(__name__)


def setup_logging(log_level: str, log_file: str = None):
    """Configure logging"""
    level = getattr(logging, log_level.upper(), logging.INFO)

    handlers = [logging.StreamHandler()]

    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir and not os.path.exists(log_dir):
            os.makedirs(log_dir, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True
    )


def load_config(config_path: Optional[str]) -> dict:
    """Load configuration from YAML file; empty when no file is given"""
    if not config_path:
        default = PROJECT_DIR / 'config.yaml'
        if not default.exists():
            return {}
        config_path = str(default)
    with open(config_path, 'r') as f:
        document = yaml.safe_load(f) or {}
    if not isinstance(document, dict):
        raise bench.ConfigError(f"{config_path} must contain a mapping")
    return document


def signal_handler(signum, frame):
    """Handle shutdown signals"""
    logger.info(f"Received signal {signum}, initiating shutdown...")
    shutdown_event.set()


def _seed(args, config: dict) -> int:
    return args.seed if args.seed is not None else int(config.get('seed', 0))


def _threads(args, config: dict) -> int:
    return args.threads if args.threads is not None else int(config.get('threads', 1))


def _normalized_input(path: str) -> ExpressionMatrix:
    m = load_matrix(path)
    if m.layer is Layer.RAW_COUNTS:
        logger.info(f"{path} holds raw counts; normalizing")
        m = normalize(m)
    return m


# --- Subcommands ---

def cmd_ingest(args, config: dict, output: OutputDirectory):
    options = config.get('filter', {})
    min_total = args.min_cell_total if args.min_cell_total is not None \
        else options.get('min_cell_total', 1000)
    min_fraction = args.min_gene_fraction if args.min_gene_fraction is not None \
        else options.get('min_gene_nonzero_fraction', 0.1)
    m = load_matrix(args.input, args.genes, args.cells)
    filtered = filter_reference(m, min_total, min_fraction)
    target = output.path(args.out)
    save_matrix(filtered, target)
    write_sidecar(target, {
        'source': str(args.input),
        'source_hash': m.content_hash(),
        'content_hash': filtered.content_hash(),
        'layer': filtered.layer.value,
        'metadata': filtered.metadata,
    })


def cmd_stats(args, config: dict, output: OutputDirectory):
    options = config.get('stats', {})
    n_bins = args.bins or options.get('n_bins', gene_stats.DEFAULT_BINS)
    layer = Layer(args.layer or options.get('layer', Layer.RAW_COUNTS.value))
    m = load_matrix(args.input)
    if layer is Layer.NORMALIZED and m.layer is Layer.RAW_COUNTS:
        m = normalize(m)
    elif layer is not m.layer:
        logger.warning(f"Requested {layer.value} statistics but {args.input} holds {m.layer.value}")
    summaries = gene_stats.gene_summaries(m)
    metadata = {'layer': m.layer.value, 'n_bins': n_bins, 'source_hash': m.content_hash()}

    gene_stats.write_summaries(summaries, output.path('gene_summaries.tsv'))
    for stat in (gene_stats.Statistic.SD, gene_stats.Statistic.ZERO_FRACTION):
        curve = gene_stats.binned_curve(summaries, stat, n_bins)
        gene_stats.write_curve(curve, output.path(f"curve_{stat.value}.json"), metadata)
    for stat in gene_stats.Statistic:
        histogram = gene_stats.summary_histogram(summaries, stat, n_bins)
        gene_stats.write_curve(histogram, output.path(f"histogram_{stat.value}.json"), metadata)


def cmd_compare(args, config: dict, output: OutputDirectory):
    n_bins = args.bins or config.get('stats', {}).get('n_bins', gene_stats.DEFAULT_BINS)
    reference = load_matrix(args.reference)
    other = load_matrix(args.other)
    metadata = {
        'reference': str(args.reference),
        'reference_hash': reference.content_hash(),
        'other': str(args.other),
        'other_hash': other.content_hash(),
        'n_bins': n_bins,
    }
    comparison = gene_stats.compare_fidelity(
        gene_stats.gene_summaries(reference), gene_stats.gene_summaries(other), n_bins
    )
    document = comparison.to_dict()
    document['metadata'] = metadata
    output.write_json('fidelity.json', document)

    if reference.gene_ids == other.gene_ids and reference.cell_ids == other.cell_ids:
        gene_stats.write_r2(gene_stats.per_gene_r2(reference, other), output.path('r2'), metadata)
    else:
        logger.warning("Matrices do not share gene and cell ids; skipping per-gene R^2")


def cmd_simulate(args, config: dict, output: OutputDirectory):
    options = config.get('synth', {})
    cfg = SynthConfig(
        gamma_shape=args.gamma_shape or options.get('gamma_shape', 10.0),
        gamma_scale=args.gamma_scale or options.get('gamma_scale', 0.1),
        seed=_seed(args, config),
    )
    reference = load_matrix(args.input)
    counts, tau = generate(reference, cfg, threads=_threads(args, config))
    target = output.path(args.out)
    save_matrix(counts, target)
    write_sidecar(target, {
        'content_hash': counts.content_hash(),
        'provenance': counts.metadata['provenance'],
    })
    write_table(pd.DataFrame({'cell_id': counts.cell_ids, 'tau': tau.tau}),
                output.path(f"{Path(args.out).stem}.tau.tsv"))


def cmd_pca(args, config: dict, output: OutputDirectory):
    m = _normalized_input(args.input)
    n_pcs = args.pcs or int(config.get('n_pcs', 10))
    embedding = pca(m, n_pcs, scale=args.scale, seed=_seed(args, config))
    write_embedding(embedding, output.path(args.out))


def cmd_embed(args, config: dict, output: OutputDirectory):
    options = dict(config.get('tsne', {}))
    for key in ('perplexity', 'n_iter', 'learning_rate'):
        if getattr(args, key) is not None:
            options[key] = getattr(args, key)
    options['seed'] = _seed(args, config)
    cfg = TsneConfig(**options)
    points = read_embedding(args.input)
    write_embedding(tsne(points, cfg), output.path(args.out))


def cmd_cluster(args, config: dict, output: OutputDirectory):
    points = read_embedding(args.input)
    method = bench.parse_linkage(args.linkage or config.get('linkage', 'ward'))
    partition = cut(linkage(points, method), args.k)
    target = output.path(args.out)
    write_labels(partition, points.cell_ids, target)
    write_sidecar(target, {
        'linkage': method.value,
        'distance': 'squared_euclidean' if method is Linkage.WARD else 'euclidean',
        'k': args.k,
        'source': str(args.input),
        'source_method': points.method.value,
    })


def cmd_evaluate(args, config: dict, output: OutputDirectory):
    pred_ids, pred_labels = read_labels(args.pred)
    truth_ids, truth_labels = read_labels(args.truth, known_ids=set(pred_ids))
    lookup = dict(zip(pred_ids, pred_labels))
    missing = [c for c in truth_ids if c not in lookup]
    if missing or len(pred_ids) != len(truth_ids):
        raise ValueError(
            f"label files do not cover the same cells ({len(missing)} truth cells unlabelled)"
        )
    truth = Partition.from_labels(truth_labels)
    pred = Partition.from_labels([lookup[c] for c in truth_ids])
    report = evaluate(truth, pred)
    document = report.to_dict()
    document['truth'] = str(args.truth)
    document['pred'] = str(args.pred)
    output.write_json(args.out, document)
    if args.contingency:
        write_contingency(contingency(truth, pred), output.path(args.contingency))
    logger.info(f"ARI={report.ari:.4f} Jaccard={report.jaccard:.4f} "
                f"NMI={report.nmi:.4f} purity={report.purity:.4f}")


def _bench_config(args, config: dict) -> bench.BenchConfig:
    # Relative paths follow the config file, including the default one
    base_dir = Path(args.config).parent if args.config else PROJECT_DIR
    cfg = bench.BenchConfig.from_dict(config, base_dir)
    overrides = {
        'k_values': bench.parse_k_values(args.k) if args.k else None,
        'n_pcs': args.pcs,
        'n_bootstrap': args.bootstrap,
        'seed': args.seed,
        'threads': args.threads,
        'linkage': bench.parse_linkage(args.linkage) if args.linkage else None,
        'fixed_pcs': True if args.fixed_pcs else None,
        'resample_order': bench.parse_resample_order(args.resample_order)
        if args.resample_order else None,
    }
    if args.dataset:
        specs = []
        for entry in args.dataset:
            name, sep, path = entry.partition('=')
            if not sep or not name or not path:
                raise bench.ConfigError(f"--dataset expects name=path, got {entry!r}")
            specs.append(bench.DatasetSpec(name, Path(path)))
        overrides['datasets'] = tuple(specs)
    cfg = cfg.with_overrides(**overrides)
    if args.truth:
        truth = dict(cfg.truth)
        for entry in args.truth:
            k, sep, path = entry.partition('=')
            if sep:
                truth.update(bench.parse_truth({k: path}, cfg.k_values))
            else:
                truth.update(bench.parse_truth(entry, cfg.k_values))
        cfg = cfg.with_overrides(truth=truth)
    return cfg


def cmd_bench(args, config: dict, output: OutputDirectory):
    cfg = _bench_config(args, config)
    logger.info(f"Benchmark: {len(cfg.datasets)} dataset(s), K={list(cfg.k_values)}, "
                f"{cfg.n_bootstrap} bootstrap replicates, seed={cfg.seed}")
    bench.run_benchmark(cfg, output.root, shutdown_event)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='CellBench - single-cell imputation benchmark')
    parser.add_argument('--config', '-c', help='Path to configuration file')
    parser.add_argument('--seed', type=int, help='Master RNG seed (unsigned 64-bit)')
    parser.add_argument('--threads', type=int, help='Worker threads')
    parser.add_argument('--out-dir', default='.', help='Directory for outputs')
    parser.add_argument('--debug', action='store_true', help='Enable debug logging')

    # Also accepted after the subcommand; unset values keep the global ones
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument('--seed', type=int, default=argparse.SUPPRESS)
    shared.add_argument('--threads', type=int, default=argparse.SUPPRESS)
    shared.add_argument('--out-dir', default=argparse.SUPPRESS)

    commands = parser.add_subparsers(dest='command', required=True)

    p = commands.add_parser('ingest', parents=[shared], help='Load, filter and save a reference matrix')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--genes')
    p.add_argument('--cells')
    p.add_argument('--min-cell-total', type=float)
    p.add_argument('--min-gene-fraction', type=float)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_ingest)

    p = commands.add_parser('stats', parents=[shared], help='Per-gene summaries, binned curves and histograms')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--layer', choices=[layer.value for layer in Layer])
    p.add_argument('--bins', type=int)
    p.set_defaults(handler=cmd_stats)

    p = commands.add_parser('compare', parents=[shared], help='Fidelity curves and per-gene R^2 of two matrices')
    p.add_argument('--reference', required=True)
    p.add_argument('--other', required=True)
    p.add_argument('--bins', type=int)
    p.set_defaults(handler=cmd_compare)

    p = commands.add_parser('simulate', parents=[shared], help='Poisson-Gamma semi-synthetic counts')
    p.add_argument('--reference', '--in', dest='input', required=True)
    p.add_argument('--gamma-shape', type=float)
    p.add_argument('--gamma-scale', type=float)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_simulate)

    p = commands.add_parser('pca', parents=[shared], help='Principal component projection')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--components', '--pcs', dest='pcs', type=int)
    p.add_argument('--scale', action='store_true', help='Scale genes to unit variance')
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_pca)

    p = commands.add_parser('embed', parents=[shared], help='Exact tSNE of an embedding')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--perplexity', type=float)
    p.add_argument('--iter', dest='n_iter', type=int)
    p.add_argument('--learning-rate', type=float)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_embed)

    p = commands.add_parser('cluster', parents=[shared], help='Hierarchical clustering cut at K')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--k', type=int, required=True)
    p.add_argument('--linkage', choices=[m.value for m in Linkage])
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_cluster)

    p = commands.add_parser('evaluate', parents=[shared], help='Agreement metrics between two label files')
    p.add_argument('--truth', required=True)
    p.add_argument('--pred', required=True)
    p.add_argument('--out', default='report.json')
    p.add_argument('--contingency', help='Also write the contingency table here')
    p.set_defaults(handler=cmd_evaluate)

    p = commands.add_parser('bench', parents=[shared], help='Bootstrap clustering benchmark')
    p.add_argument('--k', help='Comma-separated K values, e.g. 9,47')
    p.add_argument('--pcs', type=int)
    p.add_argument('--bootstrap', type=int)
    p.add_argument('--linkage', choices=[m.value for m in Linkage])
    p.add_argument('--fixed-pcs', action='store_true',
                   help='Compute PCs once and resample PC coordinates')
    p.add_argument('--resample-order', choices=[m.value for m in bench.ResampleOrder])
    p.add_argument('--dataset', action='append', help='name=path, repeatable')
    p.add_argument('--truth', action='append', help='[K=]path, repeatable')
    p.set_defaults(handler=cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    # Load configuration
    try:
        config = load_config(args.config)
    except Exception as e:
        print(f"Error loading configuration: {e}")
        return 1

    # Setup logging
    log_level = 'DEBUG' if args.debug else config.get('system', {}).get('log_level', 'INFO')
    log_file = config.get('system', {}).get('log_file')
    setup_logging(log_level, log_file)

    # Register signal handlers
    signal.signal(signal.SIGINT, signal_handler)
    signal.signal(signal.SIGTERM, signal_handler)

    try:
        output = OutputDirectory(args.out_dir)
        logger.info(f"Running '{args.command}'")
        args.handler(args, config, output)
    except bench.BenchCancelled as e:
        logger.warning(str(e))
        return 1
    except Exception as e:
        logger.exception(f"'{args.command}' failed: {e}")
        return 1

    logger.info(f"'{args.command}' complete")
    return 0


if __name__ == '__main__':
    sys.exit(main())
