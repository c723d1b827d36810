"""
CellBench - Dimensionality Reduction Module
Truncated PCA by subspace iteration and exact two-dimensional tSNE
"""

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse as sp_sparse
from scipy.sparse.linalg import LinearOperator
from scipy.spatial.distance import pdist, squareform
from scipy.special import rel_entr

import streams
from expression import ExpressionMatrix, Layer
from persistence import read_json, sidecar_path, write_sidecar, write_table

logger = logging.getLogger(__name__)

# Randomized subspace iteration settings
OVERSAMPLING = 10
MAX_SUBSPACE_ITERATIONS = 300
RESIDUAL_TOLERANCE = 1e-12

# Perplexity search
PERPLEXITY_TOLERANCE = 1e-5
MAX_BISECTION_STEPS = 50
MAX_BRACKET_STEPS = 200

KL_TRACE_EVERY = 50
MIN_GAIN = 0.01


class DimRedError(ValueError):
    """Raised when a projection or embedding cannot be computed"""


class EmbeddingMethod(Enum):
    PCA = "pca"
    TSNE = "tsne"


@dataclass(frozen=True)
class Embedding:
    """cells x d coordinates with their provenance"""
    coords: np.ndarray
    cell_ids: Tuple[str, ...]
    method: EmbeddingMethod
    explained_variance: Optional[np.ndarray] = None
    provenance: Dict[str, Any] = field(default_factory=dict)
    # genes x d loadings, PCA only
    loadings: Optional[np.ndarray] = None

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 2:
            raise DimRedError("coordinates must be a 2-D array")
        if coords.shape[0] != len(self.cell_ids):
            raise DimRedError(f"{coords.shape[0]} rows for {len(self.cell_ids)} cell ids")
        if not np.all(np.isfinite(coords)):
            raise DimRedError("embedding coordinates must be finite")
        coords.flags.writeable = False
        object.__setattr__(self, 'coords', coords)
        object.__setattr__(self, 'cell_ids', tuple(self.cell_ids))
        if self.explained_variance is not None:
            ev = np.array(self.explained_variance, dtype=np.float64)
            if np.any(ev < 0) or np.any(np.diff(ev) > 0):
                raise DimRedError("explained variance must be non-negative and non-increasing")
            ev.flags.writeable = False
            object.__setattr__(self, 'explained_variance', ev)

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    @classmethod
    def from_array(cls, coords, cell_ids: Optional[Sequence[str]] = None,
                   method: EmbeddingMethod = EmbeddingMethod.PCA) -> 'Embedding':
        coords = np.asarray(coords, dtype=np.float64)
        if cell_ids is None:
            cell_ids = [f"cell{i}" for i in range(coords.shape[0])]
        return cls(coords, tuple(cell_ids), method)

    def take(self, indices: Sequence[int]) -> 'Embedding':
        """Rows by position, duplicates allowed"""
        indices = np.asarray(indices, dtype=np.intp)
        return Embedding(self.coords[indices], tuple(self.cell_ids[i] for i in indices),
                         self.method, self.explained_variance, dict(self.provenance),
                         self.loadings)

    def column_names(self) -> List[str]:
        prefix = 'PC' if self.method is EmbeddingMethod.PCA else 'tSNE'
        return [f"{prefix}{j + 1}" for j in range(self.d)]


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    n_iter: int = 1000
    learning_rate: float = 200.0
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not self.perplexity > 1:
            raise DimRedError(f"perplexity must be > 1, got {self.perplexity}")
        if self.n_iter < 1:
            raise DimRedError("n_iter must be >= 1")
        if not self.learning_rate > 0:
            raise DimRedError("learning_rate must be positive")
        if self.early_exaggeration < 1:
            raise DimRedError("early_exaggeration must be >= 1")
        for name in ('momentum_early', 'momentum_late'):
            if not 0 <= getattr(self, name) < 1:
                raise DimRedError(f"{name} must lie in [0, 1)")
        streams.check_seed(self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


# --- PCA ---

def _centered_operator(x, means: np.ndarray) -> LinearOperator:
    """x - 1 means^T without materialising the centered matrix"""
    n, p = x.shape

    def matmat(v):
        v = np.asarray(v).reshape(p, -1)
        return np.asarray(x @ v) - np.outer(np.ones(n), means @ v)

    def rmatmat(u):
        u = np.asarray(u).reshape(n, -1)
        return np.asarray(x.T @ u) - np.outer(means, u.sum(axis=0))

    return LinearOperator(
        (n, p), dtype=np.float64,
        matvec=lambda v: matmat(v).ravel(),
        rmatvec=lambda u: rmatmat(u).ravel(),
        matmat=matmat, rmatmat=rmatmat,
    )


def _orthonormal(y: np.ndarray) -> np.ndarray:
    q, _ = scipy.linalg.qr(y, mode='economic')
    return q


def _subspace_svd(op: LinearOperator, k: int, rng: np.random.Generator):
    """Top-k singular triplets by randomized subspace iteration with Rayleigh-Ritz"""
    n, p = op.shape
    width = min(k + OVERSAMPLING, n, p)
    q = _orthonormal(op.matmat(rng.standard_normal((p, width))))
    for iteration in range(1, MAX_SUBSPACE_ITERATIONS + 1):
        q = _orthonormal(op.matmat(_orthonormal(op.rmatmat(q))))
        b = op.rmatmat(q).T
        u_small, s, vt = scipy.linalg.svd(b, full_matrices=False)
        u = q @ u_small[:, :k]
        v = vt[:k].T
        residual = np.linalg.norm(op.matmat(v) - u * s[:k], axis=0).max()
        if s[0] == 0 or residual <= RESIDUAL_TOLERANCE * s[0]:
            logger.debug(f"Subspace iteration converged after {iteration} iterations")
            return u, s[:k], v
    logger.warning(
        f"Subspace iteration stopped after {MAX_SUBSPACE_ITERATIONS} iterations "
        f"(relative residual {residual / s[0]:.2e})"
    )
    return u, s[:k], v


def pca(m: ExpressionMatrix, n_components: int = 10, scale: bool = False,
        seed: int = 0) -> Embedding:
    """Project cells onto the top principal directions of the gene-centered matrix"""
    if m.layer is not Layer.NORMALIZED:
        raise DimRedError("pca expects the normalized layer")
    n, p = m.n_cells, m.n_genes
    if n < 2:
        raise DimRedError(f"pca needs at least 2 cells, got {n}")
    if n_components < 1 or n_components > min(n, p):
        raise DimRedError(
            f"n_components too large: {n_components} requested, at most {min(n, p)} possible"
        )

    x = m.values.T.tocsr() if m.is_sparse else np.asarray(m.values.T)
    means = np.asarray(x.mean(axis=0)).ravel()
    if m.is_sparse:
        squares = np.asarray(x.multiply(x).sum(axis=0)).ravel()
    else:
        squares = (x * x).sum(axis=0)
    gene_ss = np.maximum(squares - n * means ** 2, 0.0)

    scaling = None
    if scale:
        sd = np.sqrt(gene_ss / (n - 1))
        scaling = np.where(sd > 0, sd, 1.0)
        x = x.multiply(1.0 / scaling).tocsr() if m.is_sparse else x / scaling
        means = means / scaling

    dense_path = n_components + OVERSAMPLING >= min(n, p) / 1.25
    if dense_path:
        centered = (x.toarray() if sp_sparse.issparse(x) else x) - means
        total_variance = float((centered * centered).sum()) / (n - 1)
        if total_variance <= 0:
            raise DimRedError("all-constant matrix has no principal components")
        u, s, vt = scipy.linalg.svd(centered, full_matrices=False)
        u, s, v = u[:, :n_components], s[:n_components], vt[:n_components].T
    else:
        op = _centered_operator(x, means)
        total_variance = float(gene_ss.sum() if scaling is None
                               else (gene_ss / scaling ** 2).sum()) / (n - 1)
        if total_variance <= 0:
            raise DimRedError("all-constant matrix has no principal components")
        rng = streams.substream(seed, streams.Purpose.PCA)
        u, s, v = _subspace_svd(op, n_components, rng)

    # Largest-magnitude loading of each component is positive
    pivots = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[pivots, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    u = u * signs
    v = v * signs

    explained = s ** 2 / (n - 1)
    coords = u * s
    provenance = {
        'source_hash': m.content_hash(),
        'n_components': n_components,
        'scale': scale,
        'solver': 'dense_svd' if dense_path else 'randomized_subspace_iteration',
        'total_variance': total_variance,
        'explained_variance_ratio': (explained / total_variance).tolist(),
        'loadings_gene_ids': list(m.gene_ids),
    }
    logger.info(
        f"PCA: {n_components} components explain "
        f"{100.0 * explained.sum() / total_variance:.1f}% of variance ({provenance['solver']})"
    )
    return Embedding(coords, m.cell_ids, EmbeddingMethod.PCA, explained, provenance, loadings=v)


# --- tSNE ---

def _row_entropy(d: np.ndarray, beta: float) -> Tuple[float, np.ndarray]:
    p = np.exp(-d * beta)
    total = p.sum()
    entropy = np.log(total) + beta * np.dot(d, p) / total
    return entropy, p / total


def perplexity_calibration(distances_sq: np.ndarray, perplexity: float,
                           tol: float = PERPLEXITY_TOLERANCE) -> np.ndarray:
    """Conditional P(j|i) with per-row Gaussian precision found by bisection"""
    d_all = np.asarray(distances_sq, dtype=np.float64)
    if d_all.ndim != 2 or d_all.shape[0] != d_all.shape[1]:
        raise DimRedError("distance matrix must be square")
    n = d_all.shape[0]
    if not np.allclose(d_all, d_all.T) or np.any(np.diag(d_all) != 0):
        raise DimRedError("distance matrix must be symmetric with a zero diagonal")
    if perplexity >= n - 1:
        raise DimRedError(f"perplexity {perplexity} must be less than n - 1 = {n - 1}")
    if perplexity <= 1:
        raise DimRedError("perplexity must be > 1")

    target = np.log(perplexity)
    conditional = np.zeros((n, n))
    for i in range(n):
        others = np.concatenate((np.arange(i), np.arange(i + 1, n)))
        d = d_all[i, others]
        # Shifting by the nearest distance leaves P unchanged and avoids underflow
        d = d - d.min()
        beta, lo, hi = 1.0, 0.0, np.inf
        entropy, p = _row_entropy(d, beta)
        bisections = brackets = 0
        while abs(np.exp(entropy) - perplexity) > tol:
            bracketed = lo > 0 and np.isfinite(hi)
            if entropy > target:
                lo = beta
                beta = beta * 2.0 if not np.isfinite(hi) else (lo + hi) / 2.0
            else:
                hi = beta
                beta = beta / 2.0 if lo == 0 else (lo + hi) / 2.0
            if bracketed:
                bisections += 1
            else:
                brackets += 1
            if bisections >= MAX_BISECTION_STEPS or brackets >= MAX_BRACKET_STEPS:
                break
            entropy, p = _row_entropy(d, beta)
        conditional[i, others] = p
    return conditional


def joint_probabilities(distances_sq: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized P = (P(j|i) + P(i|j)) / 2n"""
    conditional = perplexity_calibration(distances_sq, perplexity)
    n = conditional.shape[0]
    return (conditional + conditional.T) / (2.0 * n)


def _student_kernel(y: np.ndarray) -> np.ndarray:
    num = 1.0 / (1.0 + squareform(pdist(y, 'sqeuclidean')))
    np.fill_diagonal(num, 0.0)
    return num


def kl_divergence(p: np.ndarray, y: np.ndarray) -> float:
    """KL(P || Q) for Student-t affinities of the embedding y"""
    num = _student_kernel(y)
    q = num / num.sum()
    return float(rel_entr(p, q).sum())


def kl_gradient(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """dKL/dy_i = 4 sum_j (p_ij - q_ij)(1 + |y_i - y_j|^2)^-1 (y_i - y_j)"""
    num = _student_kernel(y)
    q = num / num.sum()
    weights = (p - q) * num
    return 4.0 * (weights.sum(axis=1)[:, np.newaxis] * y - weights @ y)


def tsne(points: Embedding, cfg: TsneConfig = TsneConfig()) -> Embedding:
    """Exact tSNE by gradient descent with momentum, gains and early exaggeration"""
    n = points.n_points
    if n < 4:
        raise DimRedError(f"tsne needs at least 4 points, got {n}")
    p = joint_probabilities(squareform(pdist(points.coords, 'sqeuclidean')), cfg.perplexity)

    rng = streams.substream(cfg.seed, streams.Purpose.TSNE_INIT)
    y = 1e-4 * rng.standard_normal((n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    trace = []

    for iteration in range(cfg.n_iter):
        early = iteration < cfg.exaggeration_iters
        exaggeration = cfg.early_exaggeration if early else 1.0
        momentum = cfg.momentum_early if early else cfg.momentum_late

        grad = kl_gradient(exaggeration * p, y)
        same_direction = np.sign(grad) == np.sign(update)
        gains = np.where(same_direction, gains * 0.8, gains + 0.2)
        np.maximum(gains, MIN_GAIN, out=gains)
        update = momentum * update - cfg.learning_rate * gains * grad
        y = y + update
        y = y - y.mean(axis=0)

        if not np.all(np.isfinite(y)):
            raise DimRedError(
                f"tsne diverged at iteration {iteration}: non-finite coordinates "
                f"(learning_rate={cfg.learning_rate}, perplexity={cfg.perplexity})"
            )
        if iteration % KL_TRACE_EVERY == 0 or iteration == cfg.n_iter - 1:
            kl = kl_divergence(p, y)
            trace.append((iteration, kl))
            logger.debug(f"tsne iteration {iteration}: KL = {kl:.6f}")

    final_kl = trace[-1][1]
    logger.info(f"tsne finished {cfg.n_iter} iterations on {n} points, KL = {final_kl:.4f}")
    provenance = {
        'source': dict(points.provenance),
        'source_method': points.method.value,
        'params': cfg.to_dict(),
        'kl_trace': [[it, kl] for it, kl in trace],
        'final_kl': final_kl,
    }
    return Embedding(y, points.cell_ids, EmbeddingMethod.TSNE, None, provenance)


# --- Files ---

def write_embedding(embedding: Embedding, path: Union[str, Path]):
    """Delimited coordinates plus a JSON sidecar with method and parameters"""
    frame = pd.DataFrame(embedding.coords, columns=embedding.column_names())
    frame.insert(0, 'cell_id', embedding.cell_ids)
    write_table(frame, path)
    metadata = {
        'method': embedding.method.value,
        'd': embedding.d,
        'provenance': embedding.provenance,
    }
    if embedding.explained_variance is not None:
        metadata['explained_variance'] = embedding.explained_variance.tolist()
    write_sidecar(path, metadata)


def read_embedding(path: Union[str, Path]) -> Embedding:
    path = Path(path)
    sep = ',' if path.suffix.lower() == '.csv' else '\t'
    frame = pd.read_csv(path, sep=sep, dtype={'cell_id': str})
    metadata = {}
    if sidecar_path(path).exists():
        metadata = read_json(sidecar_path(path))
    method = EmbeddingMethod(metadata.get('method', 'pca'))
    coords = frame.drop(columns=['cell_id']).to_numpy(dtype=np.float64)
    return Embedding(coords, tuple(frame['cell_id']), method,
                     metadata.get('explained_variance'), metadata.get('provenance', {}))
