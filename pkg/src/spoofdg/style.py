"""Per-sample style vectors from tapped activations, PCA reduction, clustering.

Style here means per-channel first and second moments of intermediate
activation maps. Everything in this module is pure numpy on plain arrays;
the statistics path never participates in gradient computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class DegenerateStatisticsError(ValueError):
    """All style vectors identical; nothing to reduce or cluster."""


def channel_stats(activation) -> np.ndarray:
    """Per-channel mean and population variance over the spatial grid.

    Input [B,C,H,W]; output [B,2C] laid out as all C means then all C
    variances. Variance divides by H*W.
    """
    a = activation.data if isinstance(activation, Tensor) else np.asarray(activation, float)
    if a.ndim != 4:
        raise ValueError(f"channel_stats: expected [B,C,H,W], got shape {a.shape}")
    if a.shape[2] * a.shape[3] < 1:
        raise ValueError("channel_stats: empty spatial dimensions")
    means = a.mean(axis=(2, 3))
    variances = a.var(axis=(2, 3))
    return np.concatenate([means, variances], axis=1)


def stack_style_vectors(taps: list[np.ndarray]) -> np.ndarray:
    """Concatenate per-tap [B,2C_k] statistics in the given fixed tap order."""
    if not taps:
        raise ValueError("no tapped activations supplied")
    return np.concatenate(taps, axis=1)


def standardize(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-coordinate z-score; zero-variance coordinates are only centered."""
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    safe = np.where(std < 1e-12, 1.0, std)
    return (raw - mean) / safe, mean, safe


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray        # [k, dim], orthonormal rows
    explained_variance: np.ndarray  # [k]

    @property
    def k(self) -> int:
        return self.components.shape[0]


def fit_pca(vectors: np.ndarray, k: int) -> PcaModel:
    """Principal components via SVD of the centered data matrix.

    k is clamped to min(k, n_samples - 1, dim). Component signs are fixed so
    each component's largest-magnitude entry is positive.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("fit_pca: need at least 2 vectors")
    if k < 1:
        raise ValueError("fit_pca: k must be >= 1")
    n, dim = x.shape
    mean = x.mean(axis=0)
    centered = x - mean
    if not np.any(np.abs(centered) > 1e-12):
        raise DegenerateStatisticsError("degenerate statistics: all vectors identical")
    k = min(k, n - 1, dim)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:k]
    # deterministic sign: largest-|entry| coordinate of each component positive
    pivot = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(k), pivot])
    signs[signs == 0] = 1.0
    components = components * signs[:, None]
    explained = (s[:k] ** 2) / (n - 1)
    return PcaModel(mean=mean, components=components, explained_variance=explained)


def project(model: PcaModel, raw: np.ndarray) -> np.ndarray:
    """components @ (raw - mean); accepts a single vector or a [n, dim] batch."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != model.mean.shape[0]:
        raise ValueError(
            f"project: vector length {raw.shape[-1]} != model dim {model.mean.shape[0]}")
    return (raw - model.mean) @ model.components.T


def reconstruct(model: PcaModel, reduced: np.ndarray) -> np.ndarray:
    return np.asarray(reduced) @ model.components + model.mean


@dataclass
class ClusterModel:
    method: str                   # "kmeans" | "gmm"
    centers: np.ndarray           # [N, dim]
    seed: int
    covariances: np.ndarray | None = None  # [N, dim] diagonal, gmm only
    weights: np.ndarray | None = None      # [N], gmm only
    inertia: float = field(default=float("nan"))
    log_likelihood: float = field(default=float("nan"))

    @property
    def n_clusters(self) -> int:
        return self.centers.shape[0]


def _kmeans_pp_init(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((n, x.shape[1]))
    centers[0] = x[rng.integers(len(x))]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, n):
        total = d2.sum()
        if total <= 0.0:
            centers[i] = x[rng.integers(len(x))]
            continue
        probs = d2 / total
        centers[i] = x[rng.choice(len(x), p=probs)]
        d2 = np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1))
    return centers


def _assign_nearest(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # argmin breaks ties toward the lowest center index
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def fit_kmeans(x: np.ndarray, n: int, seed: int,
               max_iter: int = 300, tol: float = 1e-6) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when the largest center shift drops below tol. An emptied cluster
    is re-seeded at the point farthest from its nearest center.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) < n:
        raise ValueError(f"fit_kmeans: {len(x)} samples < {n} clusters")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(x, n, rng)
    for _ in range(max_iter):
        labels = _assign_nearest(x, centers)
        new_centers = centers.copy()
        for i in range(n):
            members = x[labels == i]
            if len(members):
                new_centers[i] = members.mean(axis=0)
            else:
                d2 = ((x[:, None, :] - new_centers[None, :, :]) ** 2).sum(axis=2).min(axis=1)
                new_centers[i] = x[np.argmax(d2)]
        shift = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers
        if shift < tol:
            break
    labels = _assign_nearest(x, centers)
    inertia = float(((x - centers[labels]) ** 2).sum())
    return ClusterModel(method="kmeans", centers=centers, seed=seed, inertia=inertia)


def fit_gmm(x: np.ndarray, n: int, seed: int,
            max_iter: int = 200, tol: float = 1e-7, reg: float = 1e-6) -> ClusterModel:
    """Diagonal-covariance Gaussian mixture via EM, initialized from k-means."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < n:
        raise ValueError(f"fit_gmm: {len(x)} samples < {n} components")
    km = fit_kmeans(x, n, seed)
    labels = _assign_nearest(x, km.centers)
    dim = x.shape[1]
    means = km.centers.copy()
    covs = np.empty((n, dim))
    weights = np.empty(n)
    for i in range(n):
        members = x[labels == i]
        weights[i] = max(len(members), 1) / len(x)
        covs[i] = (members.var(axis=0) if len(members) else x.var(axis=0)) + reg
    weights /= weights.sum()

    prev_ll = -np.inf
    for _ in range(max_iter):
        log_resp = _gmm_log_prob(x, means, covs) + np.log(weights)
        norm = _logsumexp(log_resp)
        ll = float(norm.mean())
        resp = np.exp(log_resp - norm[:, None])
        nk = resp.sum(axis=0) + 1e-12
        weights = nk / len(x)
        means = (resp.T @ x) / nk[:, None]
        for i in range(n):
            diff = x - means[i]
            covs[i] = (resp[:, i] @ (diff * diff)) / nk[i] + reg
        if abs(ll - prev_ll) < tol:
            prev_ll = ll
            break
        prev_ll = ll
    return ClusterModel(method="gmm", centers=means, seed=seed,
                        covariances=covs, weights=weights, log_likelihood=prev_ll)


def _gmm_log_prob(x: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    # [n_samples, n_components] log N(x | mean_i, diag cov_i)
    out = np.empty((len(x), len(means)))
    for i in range(len(means)):
        diff = x - means[i]
        out[:, i] = -0.5 * (np.sum(diff * diff / covs[i], axis=1)
                            + np.sum(np.log(2.0 * np.pi * covs[i])))
    return out


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def fit_clusters(reduced: np.ndarray, n: int, method: str, seed: int) -> ClusterModel:
    """Dispatch to k-means (default) or the diagonal GMM."""
    if method == "kmeans":
        return fit_kmeans(reduced, n, seed)
    if method == "gmm":
        return fit_gmm(reduced, n, seed)
    raise ValueError(f"unknown clustering method {method!r}")


def assign(model: ClusterModel, reduced: np.ndarray) -> np.ndarray:
    """Cluster labels for one vector or a batch; ties go to the lowest index."""
    x = np.asarray(reduced, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != model.centers.shape[1]:
        raise ValueError(
            f"assign: vector dim {x.shape[1]} != model dim {model.centers.shape[1]}")
    if model.method == "kmeans":
        labels = _assign_nearest(x, model.centers)
    else:
        log_resp = _gmm_log_prob(x, model.centers, model.covariances) + np.log(model.weights)
        labels = log_resp.argmax(axis=1)
    return int(labels[0]) if single else labels


def adjusted_rand_index(a, b) -> float:
    """Partition agreement in [-1, 1]; 1.0 iff identical up to relabeling."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("adjusted_rand_index: label arrays differ in length")
    n = len(a)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    contingency = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(contingency, (ai, bi), 1)

    def comb2(v):
        return v * (v - 1) / 2.0

    sum_ij = comb2(contingency).sum()
    sum_a = comb2(contingency.sum(axis=1)).sum()
    sum_b = comb2(contingency.sum(axis=0)).sum()
    expected = sum_a * sum_b / comb2(n)
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))
