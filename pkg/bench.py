"""
CellBench - Benchmark Module
Bootstrap benchmark of candidate matrices: resample cells, project onto
principal components, cluster at each K and score against reference labels
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from threading import Event, Lock
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml

import streams
from dimred import Embedding, pca
from expression import (
    AnnotationLevel,
    CellAnnotation,
    ExpressionMatrix,
    Layer,
    load_annotation,
    load_matrix,
    normalize,
)
from hclust import Linkage, Partition, cut, linkage
from partition_metrics import NMI_NORMALIZATION, MetricReport, evaluate
from persistence import OutputDirectory, provenance

logger = logging.getLogger(__name__)

METRICS = ('ari', 'jaccard', 'nmi', 'purity')
MAX_RESAMPLE_ATTEMPTS = 100

# Sections of the shared config file that belong to other subcommands
_OTHER_SECTIONS = ('system', 'filter', 'stats', 'tsne', 'synth')

ClusterFn = Callable[[Embedding, int], Partition]


class ConfigError(ValueError):
    """Raised for invalid benchmark configuration"""


class DatasetLoadError(ValueError):
    """Raised when one or more datasets fail to load; lists every failure"""

    def __init__(self, failures: Mapping[str, str]):
        self.failures = dict(failures)
        lines = [f"  {name}: {reason}" for name, reason in self.failures.items()]
        super().__init__("failed to load datasets:\n" + "\n".join(lines))


class BenchCancelled(RuntimeError):
    """Raised when a shutdown request stops the benchmark early"""


class ResampleOrder(Enum):
    RESAMPLE_FIRST = "resample_first"
    NORMALIZE_FIRST = "normalize_first"


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    matrix: Path
    genes: Optional[Path] = None
    cells: Optional[Path] = None
    layer: Optional[Layer] = None

    @classmethod
    def parse(cls, name: str, entry: Any, base_dir: Path = Path('.')) -> 'DatasetSpec':
        """Accept a bare path or a {matrix, genes, cells, layer} mapping"""
        def resolve(value):
            return None if value is None else base_dir / Path(value)

        if isinstance(entry, (str, Path)):
            return cls(str(name), resolve(entry))
        if isinstance(entry, Mapping):
            if 'matrix' not in entry:
                raise ConfigError(f"dataset '{name}' needs a 'matrix' path")
            try:
                layer = Layer(entry['layer']) if entry.get('layer') else None
            except ValueError:
                raise ConfigError(f"dataset '{name}': unknown layer {entry['layer']!r}")
            return cls(str(name), resolve(entry['matrix']), resolve(entry.get('genes')),
                       resolve(entry.get('cells')), layer)
        raise ConfigError(f"dataset '{name}' must be a path or a mapping")

    def to_dict(self) -> dict:
        return {
            'matrix': str(self.matrix),
            'genes': None if self.genes is None else str(self.genes),
            'cells': None if self.cells is None else str(self.cells),
            'layer': None if self.layer is None else self.layer.value,
        }


def _positive_int(name: str, value: Any, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


@dataclass(frozen=True)
class BenchConfig:
    k_values: Tuple[int, ...] = (9, 47)
    n_pcs: int = 10
    n_bootstrap: int = 100
    seed: int = 0
    linkage: Linkage = Linkage.WARD
    fixed_pcs: bool = False
    resample_order: ResampleOrder = ResampleOrder.RESAMPLE_FIRST
    threads: int = 1
    datasets: Tuple[DatasetSpec, ...] = ()
    # K -> annotation file
    truth: Mapping[int, Path] = field(default_factory=dict)

    def __post_init__(self):
        k_values = tuple(self.k_values)
        if not k_values:
            raise ConfigError("k_values must not be empty")
        for k in k_values:
            _positive_int('k', k, minimum=2)
        if len(set(k_values)) != len(k_values):
            raise ConfigError(f"k_values contains duplicates: {list(k_values)}")
        object.__setattr__(self, 'k_values', tuple(int(k) for k in k_values))
        _positive_int('n_pcs', self.n_pcs)
        _positive_int('n_bootstrap', self.n_bootstrap)
        _positive_int('threads', self.threads)
        try:
            streams.check_seed(self.seed)
        except ValueError as e:
            raise ConfigError(str(e))
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate dataset names: {names}")
        object.__setattr__(self, 'datasets', tuple(self.datasets))
        object.__setattr__(self, 'truth', {int(k): Path(v) for k, v in self.truth.items()})

    @classmethod
    def from_dict(cls, document: Optional[Mapping[str, Any]],
                  base_dir: Union[str, Path] = '.') -> 'BenchConfig':
        """Build from a parsed config document; unknown keys are rejected"""
        document = dict(document or {})
        base_dir = Path(base_dir)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(document) - known - set(_OTHER_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")

        values: Dict[str, Any] = {}
        for key in ('n_pcs', 'n_bootstrap', 'seed', 'threads'):
            if key in document:
                values[key] = document[key]
        if 'k_values' in document:
            values['k_values'] = parse_k_values(document['k_values'])
        if 'fixed_pcs' in document:
            if not isinstance(document['fixed_pcs'], bool):
                raise ConfigError(f"fixed_pcs must be true or false, got {document['fixed_pcs']!r}")
            values['fixed_pcs'] = document['fixed_pcs']
        if 'linkage' in document:
            values['linkage'] = parse_linkage(document['linkage'])
        if 'resample_order' in document:
            values['resample_order'] = parse_resample_order(document['resample_order'])
        datasets = document.get('datasets') or {}
        if not isinstance(datasets, Mapping):
            raise ConfigError("datasets must map names to matrix paths")
        values['datasets'] = tuple(
            DatasetSpec.parse(name, entry, base_dir) for name, entry in datasets.items()
        )
        if document.get('truth') is not None:
            values['truth'] = parse_truth(document['truth'], values.get('k_values', cls.k_values),
                                          base_dir)
        return cls(**values)

    def with_overrides(self, **overrides) -> 'BenchConfig':
        """Copy with the given non-None fields replaced"""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> dict:
        return {
            'k_values': list(self.k_values),
            'n_pcs': self.n_pcs,
            'n_bootstrap': self.n_bootstrap,
            'seed': self.seed,
            'linkage': self.linkage.value,
            'fixed_pcs': self.fixed_pcs,
            'resample_order': self.resample_order.value,
            'datasets': {d.name: d.to_dict() for d in self.datasets},
            'truth': {str(k): str(v) for k, v in sorted(self.truth.items())},
        }


def parse_k_values(value: Any) -> Tuple[int, ...]:
    """'9,47', [9, 47] or 9"""
    if isinstance(value, str):
        try:
            return tuple(int(part) for part in value.split(',') if part.strip())
        except ValueError:
            raise ConfigError(f"k_values must be integers, got {value!r}")
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return (int(value),)
    if isinstance(value, Sequence):
        return tuple(value)
    raise ConfigError(f"k_values must be a list of integers, got {value!r}")


def parse_linkage(value: Any) -> Linkage:
    try:
        return value if isinstance(value, Linkage) else Linkage(str(value).lower())
    except ValueError:
        raise ConfigError(f"linkage must be one of {[m.value for m in Linkage]}, got {value!r}")


def parse_resample_order(value: Any) -> ResampleOrder:
    try:
        return value if isinstance(value, ResampleOrder) else ResampleOrder(str(value).lower())
    except ValueError:
        raise ConfigError(
            f"resample_order must be one of {[m.value for m in ResampleOrder]}, got {value!r}"
        )


def parse_truth(value: Any, k_values: Sequence[int], base_dir: Path = Path('.')) -> Dict[int, Path]:
    """One annotation path for every K, or a {K: path} mapping"""
    if isinstance(value, (str, Path)):
        return {int(k): base_dir / Path(value) for k in k_values}
    if isinstance(value, Mapping):
        try:
            return {int(k): base_dir / Path(v) for k, v in value.items()}
        except (TypeError, ValueError):
            raise ConfigError(f"truth keys must be integers K, got {list(value)}")
    raise ConfigError("truth must be a path or a mapping from K to path")


def load_bench_config(path: Optional[Union[str, Path]] = None,
                      document: Optional[Mapping[str, Any]] = None) -> BenchConfig:
    """Config from a YAML file (or an already parsed document); defaults otherwise"""
    base_dir = Path('.')
    if document is None and path is not None:
        path = Path(path)
        try:
            with open(path, 'r') as f:
                document = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}")
        base_dir = path.parent
    if document is not None and not isinstance(document, Mapping):
        raise ConfigError("config file must contain a mapping")
    return BenchConfig.from_dict(document, base_dir)


# --- Replicates ---

def bootstrap_indices(n_cells: int, replicate: int, seed: int, attempt: int = 0) -> np.ndarray:
    """n_cells uniform draws with replacement from the (seed, replicate, attempt) substream"""
    if n_cells < 2:
        raise ValueError(f"bootstrap needs at least 2 cells, got {n_cells}")
    rng = streams.substream(seed, streams.Purpose.BOOTSTRAP, replicate, attempt)
    return rng.integers(0, n_cells, size=n_cells)


@dataclass(frozen=True)
class PreparedDataset:
    """Per-dataset work shared by all replicates"""
    matrix: ExpressionMatrix
    normalized: Optional[ExpressionMatrix] = None
    embedding: Optional[Embedding] = None
    normalized_by_pipeline: bool = False


def _normalized(m: ExpressionMatrix) -> Tuple[ExpressionMatrix, bool]:
    if m.layer is Layer.RAW_COUNTS:
        return normalize(m), True
    return m, False


def prepare_dataset(m: ExpressionMatrix, cfg: BenchConfig) -> PreparedDataset:
    if not cfg.fixed_pcs and cfg.resample_order is ResampleOrder.RESAMPLE_FIRST:
        return PreparedDataset(m, normalized_by_pipeline=m.layer is Layer.RAW_COUNTS)
    normalized, by_pipeline = _normalized(m)
    embedding = pca(normalized, cfg.n_pcs, seed=cfg.seed) if cfg.fixed_pcs else None
    return PreparedDataset(m, normalized, embedding, by_pipeline)


def _default_cluster_fn(method: Linkage) -> ClusterFn:
    def cluster(embedding: Embedding, k: int) -> Partition:
        return cut(linkage(embedding, method), k)
    return cluster


def _resample(m: ExpressionMatrix, k: int, replicate: int, seed: int) -> Tuple[np.ndarray, int]:
    if m.n_cells < k:
        raise ValueError(f"cannot form {k} clusters from {m.n_cells} cells")
    for attempt in range(MAX_RESAMPLE_ATTEMPTS):
        indices = bootstrap_indices(m.n_cells, replicate, seed, attempt)
        distinct = np.unique(indices).size
        if distinct >= k:
            return indices, attempt
        logger.warning(
            f"Replicate {replicate}: resample has {distinct} distinct cells (< k={k}), "
            f"retrying with attempt {attempt + 1}"
        )
    raise ValueError(f"replicate {replicate}: no resample with {k} distinct cells "
                     f"after {MAX_RESAMPLE_ATTEMPTS} attempts")


def run_replicate(m: ExpressionMatrix, truth: CellAnnotation, cfg: BenchConfig, k: int,
                  replicate: int, prepared: Optional[PreparedDataset] = None,
                  cluster_fn: Optional[ClusterFn] = None) -> MetricReport:
    """One bootstrap replicate: resample, normalize, PCA, cluster at k, score"""
    truth.check_aligned(m)
    prepared = prepared or prepare_dataset(m, cfg)
    cluster_fn = cluster_fn or _default_cluster_fn(cfg.linkage)
    indices, _ = _resample(m, k, replicate, cfg.seed)

    if prepared.embedding is not None:
        embedding = prepared.embedding.take(indices)
    elif prepared.normalized is not None:
        embedding = pca(prepared.normalized.take_cells(indices), cfg.n_pcs, seed=cfg.seed)
    else:
        resampled, _ = _normalized(m.take_cells(indices))
        embedding = pca(resampled, cfg.n_pcs, seed=cfg.seed)

    predicted = cluster_fn(embedding, k)
    expected = Partition.from_labels(truth.take(indices).labels)
    return evaluate(expected, predicted)


# --- Benchmark ---

@dataclass(frozen=True)
class ReplicateResult:
    dataset: str
    k: int
    replicate: int
    report: MetricReport

    def to_row(self) -> dict:
        row = {'dataset': self.dataset, 'k': self.k, 'replicate': self.replicate}
        row.update({metric: getattr(self.report, metric) for metric in METRICS})
        return row


def quartiles(values: Sequence[float]) -> Dict[str, float]:
    """Boxplot summary: median, q1, q3, min, max"""
    values = np.asarray(values, dtype=np.float64)
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    return {
        'median': float(median),
        'q1': float(q1),
        'q3': float(q3),
        'min': float(values.min()),
        'max': float(values.max()),
    }


@dataclass(frozen=True)
class BenchResult:
    config: BenchConfig
    replicates: Tuple[ReplicateResult, ...]
    # dataset -> K -> metric -> quartile summary
    summary: Dict[str, Dict[int, Dict[str, Dict[str, float]]]]
    datasets: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def frame(self) -> pd.DataFrame:
        columns = ['dataset', 'k', 'replicate', *METRICS]
        return pd.DataFrame([r.to_row() for r in self.replicates], columns=columns)

    def summary_document(self) -> dict:
        return {
            'mode': {
                'fixed_pcs': self.config.fixed_pcs,
                'resample_order': self.config.resample_order.value,
                'linkage': self.config.linkage.value,
                'n_pcs': self.config.n_pcs,
                'n_bootstrap': self.config.n_bootstrap,
                'nmi_normalization': NMI_NORMALIZATION,
                'jaccard': 'pair_counting',
            },
            'datasets': self.datasets,
            'summary': {
                name: {str(k): metrics for k, metrics in per_k.items()}
                for name, per_k in self.summary.items()
            },
        }


def summarize(replicates: Sequence[ReplicateResult]) -> Dict[str, Dict[int, Dict[str, Dict[str, float]]]]:
    grouped: Dict[str, Dict[int, List[MetricReport]]] = {}
    for result in replicates:
        grouped.setdefault(result.dataset, {}).setdefault(result.k, []).append(result.report)
    return {
        name: {
            k: {metric: quartiles([getattr(r, metric) for r in reports]) for metric in METRICS}
            for k, reports in per_k.items()
        }
        for name, per_k in grouped.items()
    }


class BenchRunner:
    """Runs the dataset x K x replicate grid on a bounded worker pool"""

    def __init__(self, cfg: BenchConfig, shutdown_event: Optional[Event] = None,
                 cluster_fn: Optional[ClusterFn] = None):
        self.cfg = cfg
        self.shutdown_event = shutdown_event or Event()
        self.cluster_fn = cluster_fn
        self._lock = Lock()
        self._abort = Event()
        self._completed = 0
        self._total = 0
        self._matrices: Dict[str, ExpressionMatrix] = {}
        self._truth: Dict[Tuple[str, int], CellAnnotation] = {}
        self._prepared: Dict[str, PreparedDataset] = {}

    def _check_config(self):
        if not self.cfg.datasets:
            raise ConfigError("no datasets configured")
        missing = [k for k in self.cfg.k_values if k not in self.cfg.truth]
        if missing:
            raise ConfigError(f"no truth annotation for K = {missing}")

    def load(self):
        """Load and align every dataset and truth file before any compute"""
        self._check_config()
        failures: Dict[str, str] = {}
        for spec in self.cfg.datasets:
            try:
                m = load_matrix(spec.matrix, spec.genes, spec.cells, spec.layer)
                coarsest = min(self.cfg.k_values)
                for k in self.cfg.k_values:
                    level = AnnotationLevel.MAJOR if k == coarsest else AnnotationLevel.SUBTYPE
                    self._truth[(spec.name, k)] = load_annotation(self.cfg.truth[k], m, level)
                self._matrices[spec.name] = m
                logger.info(f"Dataset '{spec.name}': {m.n_genes} genes x {m.n_cells} cells "
                            f"({m.layer.value})")
            except (OSError, ValueError) as e:
                failures[spec.name] = str(e)
                logger.error(f"Dataset '{spec.name}' failed to load: {e}")
        if failures:
            raise DatasetLoadError(failures)

    def use(self, name: str, m: ExpressionMatrix, truth: Mapping[int, CellAnnotation]):
        """Register an in-memory dataset instead of loading it from disk"""
        for k in self.cfg.k_values:
            truth[k].check_aligned(m)
            self._truth[(name, k)] = truth[k]
        self._matrices[name] = m

    def _task(self, name: str, k: int, replicate: int) -> Optional[ReplicateResult]:
        if self.shutdown_event.is_set() or self._abort.is_set():
            return None
        report = run_replicate(self._matrices[name], self._truth[(name, k)], self.cfg, k,
                               replicate, self._prepared[name], self.cluster_fn)
        with self._lock:
            self._completed += 1
            done = self._completed
        if done % max(1, self._total // 10) == 0 or done == self._total:
            logger.info(f"Completed {done}/{self._total} replicates")
        return ReplicateResult(name, k, replicate, report)

    def run(self) -> BenchResult:
        if not self._matrices:
            self.load()
        names = list(self._matrices)
        for name in names:
            self._prepared[name] = prepare_dataset(self._matrices[name], self.cfg)

        grid = [(name, k, r) for name in names for k in self.cfg.k_values
                for r in range(self.cfg.n_bootstrap)]
        self._total = len(grid)
        logger.info(f"Running {self._total} replicates on {self.cfg.threads} thread(s)")

        with ThreadPoolExecutor(max_workers=self.cfg.threads) as executor:
            futures = [executor.submit(self._task, *cell) for cell in grid]
            results = []
            for future in futures:
                try:
                    results.append(future.result())
                except Exception:
                    # Remaining queued replicates return immediately
                    self._abort.set()
                    raise

        if self.shutdown_event.is_set() or any(r is None for r in results):
            raise BenchCancelled(f"benchmark cancelled after {self._completed}/{self._total} replicates")

        order = {name: i for i, name in enumerate(names)}
        results.sort(key=lambda r: (order[r.dataset], r.k, r.replicate))
        datasets = {
            name: {
                'content_hash': self._matrices[name].content_hash(),
                'layer': self._matrices[name].layer.value,
                'normalized_by_pipeline': self._prepared[name].normalized_by_pipeline,
                'n_genes': self._matrices[name].n_genes,
                'n_cells': self._matrices[name].n_cells,
            }
            for name in names
        }
        return BenchResult(self.cfg, tuple(results), summarize(results), datasets)


def write_result(result: BenchResult, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """replicates.csv, summary.json and provenance.json under out_dir"""
    output = OutputDirectory(out_dir)
    inputs = {name: info['content_hash'] for name, info in result.datasets.items()}
    return {
        'replicates': output.write_table('replicates.csv', result.frame()),
        'summary': output.write_json('summary.json', result.summary_document()),
        'provenance': output.write_json('provenance.json',
                                        provenance(result.config.to_dict(), inputs)),
    }


def run_benchmark(cfg: BenchConfig, out_dir: Optional[Union[str, Path]] = None,
                  shutdown_event: Optional[Event] = None,
                  cluster_fn: Optional[ClusterFn] = None) -> BenchResult:
    """Full grid of dataset x K x replicate with quartile summaries"""
    result = BenchRunner(cfg, shutdown_event, cluster_fn).run()
    if out_dir is not None:
        write_result(result, out_dir)
    return result
