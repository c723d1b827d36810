"""
CellBench - Semi-Synthetic Data Module
Poisson-Gamma generator: lambda is the observed reference expression, each
cell gets a Gamma size factor tau, and counts are Poisson(tau * lambda)
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np
import scipy.sparse as sp_sparse

import samplers
import streams
from expression import ExpressionMatrix, Layer, MatrixValidationError

logger = logging.getLogger(__name__)

LAMBDA_ESTIMATOR = "plug-in observed"


class SynthError(ValueError):
    """Raised when semi-synthetic generation cannot proceed"""


class SynthConfigError(SynthError):
    """Raised for invalid generator parameters"""


@dataclass(frozen=True)
class SynthConfig:
    """Gamma parameters for tau and the RNG seed"""
    gamma_shape: float = 10.0
    gamma_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ('gamma_shape', 'gamma_scale'):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise SynthConfigError(f"{name} must be strictly positive, got {value}")
        try:
            streams.check_seed(self.seed)
        except ValueError as e:
            raise SynthConfigError(str(e)) from e

    @property
    def tau_mean(self) -> float:
        return self.gamma_shape * self.gamma_scale

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SizeFactors:
    """Per-cell multiplicative scaling of expected expression"""
    tau: np.ndarray

    def __post_init__(self):
        tau = np.array(self.tau, dtype=np.float64)
        if tau.ndim != 1 or tau.size == 0:
            raise SynthError("size factors must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(tau)) or np.any(tau <= 0):
            raise SynthError("size factors must be strictly positive and finite")
        tau.flags.writeable = False
        object.__setattr__(self, 'tau', tau)

    def __len__(self) -> int:
        return self.tau.size


def estimate_lambda(reference: ExpressionMatrix) -> ExpressionMatrix:
    """lambda-hat is the observed value itself"""
    return reference.with_values(reference.values, metadata={
        'lambda_estimator': LAMBDA_ESTIMATOR,
        'lambda_source_hash': reference.content_hash(),
    })


def sample_tau(n_cells: int, cfg: SynthConfig) -> SizeFactors:
    """i.i.d. Gamma(shape, scale) size factors from the seed's tau substream"""
    if n_cells < 1:
        raise SynthError(f"n_cells must be >= 1, got {n_cells}")
    rng = streams.substream(cfg.seed, streams.Purpose.SIZE_FACTORS)
    tau = samplers.gamma(rng, cfg.gamma_shape, cfg.gamma_scale, n_cells)
    # A Gamma draw can underflow to exactly 0 for tiny shapes
    tau = np.maximum(tau, np.finfo(np.float64).tiny)
    return SizeFactors(tau)


def _simulate_cell(cfg: SynthConfig, cell: int, rates: np.ndarray) -> np.ndarray:
    rng = streams.substream(cfg.seed, streams.Purpose.COUNTS, cell)
    return samplers.poisson(rng, rates)


def simulate_counts(lam: ExpressionMatrix, tau: SizeFactors, cfg: SynthConfig,
                    threads: int = 1) -> ExpressionMatrix:
    """Independent Poisson(tau_c * lambda_cg) draws; one substream per cell"""
    if len(tau) != lam.n_cells:
        raise SynthError(f"tau has {len(tau)} entries for {lam.n_cells} cells")

    by_cell = sp_sparse.csc_matrix(lam.values)
    by_cell.eliminate_zeros()
    by_cell.sort_indices()
    rates = by_cell.data * np.repeat(tau.tau, np.diff(by_cell.indptr))
    if not np.all(np.isfinite(rates)):
        raise SynthError("non-finite rate in tau * lambda")

    def run(cell: int) -> np.ndarray:
        start, end = by_cell.indptr[cell], by_cell.indptr[cell + 1]
        return _simulate_cell(cfg, cell, rates[start:end])

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        per_cell = list(pool.map(run, range(lam.n_cells)))

    data = np.concatenate(per_cell) if per_cell else np.zeros(0)
    counts = sp_sparse.csc_matrix(
        (data.astype(np.float64), by_cell.indices.copy(), by_cell.indptr.copy()),
        shape=lam.shape,
    )
    try:
        return ExpressionMatrix(counts, lam.gene_ids, lam.cell_ids, Layer.RAW_COUNTS)
    except MatrixValidationError as e:
        raise SynthError(str(e)) from e


def generate(reference: ExpressionMatrix, cfg: SynthConfig,
             threads: int = 1) -> Tuple[ExpressionMatrix, SizeFactors]:
    """estimate_lambda -> sample_tau -> simulate_counts, with provenance"""
    if reference.layer is not Layer.RAW_COUNTS:
        raise SynthError("generate requires a raw_counts reference")
    lam = estimate_lambda(reference)
    tau = sample_tau(reference.n_cells, cfg)
    counts = simulate_counts(lam, tau, cfg, threads=threads)
    provenance = {
        'generator': 'poisson-gamma',
        'seed': cfg.seed,
        'gamma_shape': cfg.gamma_shape,
        'gamma_scale': cfg.gamma_scale,
        'lambda_estimator': LAMBDA_ESTIMATOR,
        'reference_hash': lam.metadata['lambda_source_hash'],
        'rng': streams.describe(),
    }
    logger.info(
        f"Generated {counts.n_genes} x {counts.n_cells} semi-synthetic matrix "
        f"(k={cfg.gamma_shape}, theta={cfg.gamma_scale}, seed={cfg.seed})"
    )
    return counts.with_values(counts.values, metadata={'provenance': provenance}), tau
