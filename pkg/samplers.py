"""
CellBench - Sampler Module
Gamma and Poisson variates driven only by uniform and normal draws from a
substream, so results do not depend on the numpy sampler implementations
"""

import numpy as np
from scipy.special import gammaln

# Below this rate Poisson draws use sequential inversion
INVERSION_RATE_LIMIT = 10.0
INVERSION_MAX_STEPS = 1000


def gamma(rng: np.random.Generator, shape: float, scale: float, size: int) -> np.ndarray:
    """Gamma(shape, scale) via Marsaglia-Tsang squeeze, boosted for shape < 1"""
    if not (np.isfinite(shape) and shape > 0):
        raise ValueError(f"gamma shape must be positive and finite, got {shape}")
    if not (np.isfinite(scale) and scale > 0):
        raise ValueError(f"gamma scale must be positive and finite, got {scale}")
    size = int(size)

    boost = shape < 1.0
    alpha = shape + 1.0 if boost else shape
    d = alpha - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)

    out = np.empty(size, dtype=np.float64)
    pending = np.arange(size)
    with np.errstate(divide='ignore', invalid='ignore'):
        while pending.size:
            m = pending.size
            x = rng.standard_normal(m)
            u = rng.random(m)
            v = 1.0 + c * x
            positive = v > 0
            v3 = np.where(positive, v ** 3, 1.0)
            squeeze = u < 1.0 - 0.0331 * x ** 4
            full = np.log(u) < 0.5 * x * x + d * (1.0 - v3 + np.log(v3))
            accept = positive & (squeeze | full)
            out[pending[accept]] = d * v3[accept]
            pending = pending[~accept]

    if boost:
        out *= rng.random(size) ** (1.0 / shape)
    return out * scale


def _poisson_inversion(rng: np.random.Generator, lam: np.ndarray) -> np.ndarray:
    """Sequential-search inversion; suitable for small rates"""
    u = rng.random(lam.size)
    k = np.zeros(lam.size, dtype=np.int64)
    p = np.exp(-lam)
    cumulative = p.copy()
    active = np.flatnonzero(u > cumulative)
    steps = 0
    while active.size and steps < INVERSION_MAX_STEPS:
        k[active] += 1
        p[active] *= lam[active] / k[active]
        cumulative[active] += p[active]
        # p underflowing to 0 means the cumulative sum can no longer move
        active = active[(u[active] > cumulative[active]) & (p[active] > 0)]
        steps += 1
    return k


def _poisson_ptrs(rng: np.random.Generator, lam: np.ndarray) -> np.ndarray:
    """Hormann's transformed rejection with squeeze, for rates >= 10"""
    slam = np.sqrt(lam)
    loglam = np.log(lam)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    log_invalpha = np.log(1.1239 + 1.1328 / (b - 3.4))
    vr = 0.9277 - 3.6224 / (b - 2.0)

    out = np.empty(lam.size, dtype=np.int64)
    pending = np.arange(lam.size)
    with np.errstate(divide='ignore', invalid='ignore', over='ignore'):
        while pending.size:
            m = pending.size
            big_u = rng.random(m) - 0.5
            v = rng.random(m)
            us = 0.5 - np.abs(big_u)
            ap, bp, lp = a[pending], b[pending], lam[pending]
            k = np.floor((2.0 * ap / us + bp) * big_u + lp + 0.43)

            valid = np.isfinite(k) & (k >= 0)
            quick = valid & (us >= 0.07) & (v <= vr[pending])
            rejected = ~valid | ((us < 0.013) & (v > us))
            k_safe = np.where(valid, k, 0.0)
            log_accept = np.log(v) + log_invalpha[pending] - np.log(ap / (us * us) + bp)
            log_target = -lp + k_safe * loglam[pending] - gammaln(k_safe + 1.0)
            slow = ~quick & ~rejected & (log_accept <= log_target)

            accept = quick | slow
            out[pending[accept]] = k_safe[accept].astype(np.int64)
            pending = pending[~accept]
    return out


def poisson(rng: np.random.Generator, lam) -> np.ndarray:
    """Poisson draws with per-entry rates; rate 0 gives 0"""
    lam = np.asarray(lam, dtype=np.float64)
    if not np.all(np.isfinite(lam)):
        raise ValueError("non-finite Poisson rate")
    if np.any(lam < 0):
        raise ValueError("negative Poisson rate")

    flat = lam.ravel()
    result = np.zeros(flat.size, dtype=np.int64)
    small = np.flatnonzero((flat > 0) & (flat < INVERSION_RATE_LIMIT))
    large = np.flatnonzero(flat >= INVERSION_RATE_LIMIT)
    if small.size:
        result[small] = _poisson_inversion(rng, flat[small])
    if large.size:
        result[large] = _poisson_ptrs(rng, flat[large])
    return result.reshape(lam.shape)
