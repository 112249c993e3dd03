"""Distribution distances between epoch sets: sliced Wasserstein and Frechet distance."""
from __future__ import annotations

import numpy as np

from ..epochs import EpochSet


def _as_matrix(x) -> np.ndarray:
    data = x.data if isinstance(x, EpochSet) else np.asarray(x)
    return data.reshape(data.shape[0], -1).astype(np.float64)


def _matched_quantiles(pa: np.ndarray, pb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sorted projections, the larger sample interpolated onto the smaller one's quantile levels."""
    pa, pb = np.sort(pa, axis=1), np.sort(pb, axis=1)
    na, nb = pa.shape[1], pb.shape[1]
    if na == nb:
        return pa, pb
    swap = na > nb
    small, large = (pb, pa) if swap else (pa, pb)
    levels_small = (np.arange(small.shape[1]) + 0.5) / small.shape[1]
    levels_large = (np.arange(large.shape[1]) + 0.5) / large.shape[1]
    resampled = np.stack([np.interp(levels_small, levels_large, row) for row in large])
    return (resampled, small) if swap else (small, resampled)


def random_directions(dim: int, n_projections: int, rng: np.random.Generator) -> np.ndarray:
    theta = rng.standard_normal((n_projections, dim))
    return theta / np.linalg.norm(theta, axis=1, keepdims=True)


def swd(a, b, n_projections: int = 128, rng: np.random.Generator | int | None = 0) -> float:
    """Sliced Wasserstein-2 distance between two sets of (flattened) epochs."""
    xa, xb = _as_matrix(a), _as_matrix(b)
    if xa.shape[1] != xb.shape[1]:
        raise ValueError(f"epoch shapes differ: {xa.shape[1]} vs {xb.shape[1]} values per epoch")
    if len(xa) == 0 or len(xb) == 0:
        raise ValueError("swd needs non-empty inputs")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    theta = random_directions(xa.shape[1], n_projections, rng)
    qa, qb = _matched_quantiles(theta @ xa.T, theta @ xb.T)
    per_projection = np.mean((qa - qb) ** 2, axis=1)
    return float(np.sqrt(np.mean(per_projection)))


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    return features.mean(axis=0), np.cov(features, rowvar=False)


def frechet_distance(mu1, cov1, mu2, cov2, jitter: float = 1e-6) -> float:
    """Squared Frechet distance between two Gaussians.

    ``tr((S1 S2)^(1/2))`` is evaluated as the trace of the square root of the
    symmetric matrix ``S1^(1/2) S2 S1^(1/2)``, with negative eigenvalues
    clamped to zero.
    """
    cov1 = np.atleast_2d(cov1) + jitter * np.eye(len(mu1))
    cov2 = np.atleast_2d(cov2) + jitter * np.eye(len(mu2))
    w, v = np.linalg.eigh(cov1)
    root1 = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    middle = root1 @ cov2 @ root1
    eig = np.linalg.eigvalsh((middle + middle.T) / 2)
    tr_sqrt = np.sum(np.sqrt(np.clip(eig, 0, None)))
    diff = np.asarray(mu1) - np.asarray(mu2)
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def fid_from_features(fa: np.ndarray, fb: np.ndarray) -> float:
    fa, fb = np.asarray(fa, dtype=np.float64), np.asarray(fb, dtype=np.float64)
    if not (np.all(np.isfinite(fa)) and np.all(np.isfinite(fb))):
        raise ValueError("non-finite feature activations")
    dim = fa.shape[1]
    if len(fa) < dim + 1 or len(fb) < dim + 1:
        raise ValueError(f"FID needs at least {dim + 1} epochs per set for a full-rank covariance, "
                         f"got {len(fa)} and {len(fb)}")
    return frechet_distance(*gaussian_stats(fa), *gaussian_stats(fb))


def fid(a: EpochSet, b: EpochSet, extractor) -> float:
    """Frechet distance between Gaussians fitted to the extractor's pooled features."""
    if not a.same_shape(b):
        raise ValueError("FID inputs must share epoch shape")
    return fid_from_features(extractor.features(a.data), extractor.features(b.data))
