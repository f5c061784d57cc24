"""Trilateral RBF smoothing of Gaussian semantics over k nearest neighbours."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import Gaussian, GaussianSet, PipelineConfig, covariance

KL_FLOOR = 1e-8
# extra neighbours fetched so that distance ties at the k-th place can be resolved
_TIE_SLACK = 4


@dataclass(frozen=True)
class TRBFParams:
    sigma_mu: float = 1.0
    sigma_c: float = 0.2
    sigma_s: float = 1.0

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "TRBFParams":
        return cls(cfg.sigma_mu, cfg.sigma_c, cfg.sigma_s)


def _sorted_neighbors(centers, i, cand, k):
    cand = cand[cand != i]
    d = np.linalg.norm(centers[cand] - centers[i], axis=1)
    order = np.lexsort((cand, d))
    return cand[order[:k]], d[order]


def knn_all(centers: np.ndarray, k: int) -> np.ndarray:
    """``(n, k')`` neighbour indices with ``k' = min(k, n - 1)``.

    Query points are excluded from their own neighbour sets and distance
    ties are broken by the smaller index.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    n = len(centers)
    k = max(0, min(int(k), n - 1))
    if k == 0:
        return np.zeros((n, 0), dtype=np.int64)
    tree = cKDTree(centers)
    m = min(k + 1 + _TIE_SLACK, n)
    _, cand = tree.query(centers, k=m)
    cand = np.asarray(cand).reshape(n, m)
    rows = np.broadcast_to(np.arange(n)[:, None], (n, m))
    d = np.linalg.norm(centers[cand] - centers[:, None], axis=2)
    d[cand == rows] = np.inf  # drop self
    order = np.lexsort((cand, d), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    d = np.take_along_axis(d, order, axis=1)
    out = cand[:, :k].copy()
    if m < n:
        # the farthest retrieved candidate bounds what the query has seen;
        # rows whose k-th distance reaches it may miss tied points
        finite = np.where(np.isinf(d), -np.inf, d)
        farthest = finite.max(axis=1)
        for i in np.flatnonzero(d[:, k - 1] >= farthest):
            ball = np.asarray(tree.query_ball_point(centers[i], d[i, k - 1] * (1 + 1e-9) + 1e-12))
            out[i], _ = _sorted_neighbors(centers, i, ball, k)
    return out


def knn(centers: np.ndarray, query_index: int, k: int) -> np.ndarray:
    """The ``k`` nearest other centers of ``centers[query_index]``."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    n = len(centers)
    k = max(0, min(int(k), n - 1))
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    tree = cKDTree(centers)
    m = min(k + 1 + _TIE_SLACK, n)
    _, cand = tree.query(centers[query_index], k=m)
    cand = np.atleast_1d(cand)
    nb, d_sorted = _sorted_neighbors(centers, query_index, cand, k)
    if m < n and d_sorted[k - 1] >= d_sorted[-1]:
        ball = np.asarray(tree.query_ball_point(centers[query_index], d_sorted[k - 1] * (1 + 1e-9) + 1e-12))
        nb, _ = _sorted_neighbors(centers, query_index, ball, k)
    return nb


def _floored(p: np.ndarray) -> np.ndarray:
    p = np.maximum(p, KL_FLOOR)
    return p / p.sum(axis=-1, keepdims=True)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p || q) along the last axis after flooring both at ``KL_FLOOR``."""
    p, q = _floored(np.asarray(p, dtype=np.float64)), _floored(np.asarray(q, dtype=np.float64))
    return np.sum(p * (np.log(p) - np.log(q)), axis=-1)


def _pair_kernel(mu_i, mu_j, prec_i, prec_j, c_i, c_j, m_i, m_j, params: TRBFParams):
    d = mu_i - mu_j
    # inverse of the fused covariance (P_i^-1 + P_j^-1)^-1 is P_i + P_j
    maha = np.einsum("...a,...ab,...b->...", d, prec_i + prec_j, d)
    k_spatial = np.exp(-maha / (2 * params.sigma_mu**2))
    k_radio = np.exp(-np.sum((c_i - c_j) ** 2, axis=-1) / (2 * params.sigma_c**2))
    k_sem = np.exp(-kl_divergence(m_i, m_j) / (2 * params.sigma_s**2))
    return k_spatial * k_radio * k_sem


def trbf_kernel(gi: Gaussian, gj: Gaussian, params: TRBFParams = TRBFParams()) -> float:
    """Spatial x radiometric x semantic affinity between two Gaussians."""
    prec_i = np.linalg.inv(covariance(gi))
    prec_j = np.linalg.inv(covariance(gj))
    return float(_pair_kernel(gi.mu, gj.mu, prec_i, prec_j, gi.color, gj.color, gi.sem, gj.sem, params))


def smooth_semantics(gaussians: GaussianSet, params: TRBFParams, k: int) -> np.ndarray:
    """One synchronous smoothing pass; returns the new ``(n, C)`` semantics.

    Each Gaussian's distribution becomes the kernel-weighted average of
    itself and its ``k`` nearest neighbours, all read from the pre-pass
    values.
    """
    n = len(gaussians)
    if n == 0:
        return gaussians.sem.copy()
    nb = knn_all(gaussians.mu, k)
    idx = np.concatenate([np.arange(n)[:, None], nb], axis=1)  # self first
    prec = gaussians.inverse_covariances()
    mu, col, sem = gaussians.mu, gaussians.color, gaussians.sem
    kern = _pair_kernel(
        mu[:, None], mu[idx], prec[:, None], prec[idx], col[:, None], col[idx], sem[:, None], sem[idx], params
    )
    kern[:, 0] = 1.0  # self affinity is exactly one
    out = np.einsum("nj,njc->nc", kern, sem[idx]) / kern.sum(axis=1, keepdims=True)
    return out / out.sum(axis=1, keepdims=True)
