"""Supervised clustering of parameter scenarios.

The clustering never looks at the parameter vectors themselves: points are
the solution labels (flattened optimal control sequence, optimal cost,
constraint indicator), so scenarios that lead to similar optimal behavior
land in the same cluster no matter how different they are as parameters.
Each cluster is then summarized back in parameter space by the mean of its
members' w vectors, its population weight, and the within-cluster
(population) variances of cost and constraint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .solver import SolveRecord


class InsufficientData(ValueError):
    """Fewer points than requested clusters."""


@dataclass(frozen=True)
class ClusteringConfig:
    n_cl: int = 3
    max_iter: int = 100
    restarts: int = 8
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if self.n_cl < 1:
            raise ValueError("n_cl must be >= 1")


@dataclass(frozen=True)
class ClusterSummary:
    """Low-cardinality scenario set feeding the stochastic controller."""

    w_centers: np.ndarray     # (K, 13) componentwise means of member w
    p: np.ndarray             # (K,) population weights, sum to 1
    sigma_J: np.ndarray       # (K,) population variance of member J*
    sigma_g: np.ndarray       # (K,) population variance of member g*
    member_count: np.ndarray  # (K,) ints, all >= 1

    @property
    def n_clusters(self) -> int:
        return self.p.shape[0]

    def to_text(self) -> str:
        """One line per cluster: 13 center values, p, sigma_J, sigma_g."""
        lines = []
        for i in range(self.n_clusters):
            fields = [repr(float(v)) for v in self.w_centers[i]]
            fields += [repr(float(self.p[i])), repr(float(self.sigma_J[i])), repr(float(self.sigma_g[i]))]
            lines.append(" ".join(fields))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class KmeansResult:
    labels: np.ndarray          # (n,) ints in 1..n_cl
    centers: np.ndarray         # (n_cl, d) in the (possibly standardized) feature space
    inertia: float
    inertia_histories: tuple    # per restart, the inertia after each Lloyd update


def label_matrix(records) -> np.ndarray:
    """Stack the supervision labels (u*, J*, g*) into an (n, 2N+2) matrix."""
    return np.array([
        np.concatenate([rec.u_star.ravel(), [rec.J_star, rec.g_star]]) for rec in records
    ])


def _standardize(points: np.ndarray) -> np.ndarray:
    mean = points.mean(axis=0)
    std = points.std(axis=0)
    scale = np.where(std > 0.0, std, 1.0)  # constant dimensions left untouched
    return (points - mean) / scale


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))  # all points coincide with a center
        centers[j] = points[idx]
        np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1), out=d2)
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int):
    """Lloyd iterations; returns (labels0, centers, inertia, history)."""
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(points.shape[0]), new_labels].sum())
        history.append(inertia)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(centers.shape[0]):
            members = points[labels == j]
            if members.shape[0] > 0:
                centers[j] = members.mean(axis=0)
            # empty clusters keep their center and simply stay empty
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(points.shape[0]), labels].sum())
    return labels, centers, inertia, tuple(history)


def kmeans_full(points, cfg: ClusteringConfig) -> KmeansResult:
    """K-means with k-means++ seeding and independent restarts.

    Deterministic given cfg.seed; the restart with the lowest final inertia
    wins (first one on ties).  Labels are 1-based.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-d array")
    n = points.shape[0]
    if n < cfg.n_cl:
        raise InsufficientData(f"{n} points cannot form {cfg.n_cl} clusters")
    feats = _standardize(points) if cfg.standardize else points
    rng = np.random.default_rng(cfg.seed)
    best = None
    histories = []
    for _ in range(cfg.restarts):
        centers = _kmeanspp_init(feats, cfg.n_cl, rng)
        labels, centers, inertia, history = _lloyd(feats, centers.copy(), cfg.max_iter)
        histories.append(history)
        if best is None or inertia < best[2]:
            best = (labels, centers, inertia)
    labels, centers, inertia = best
    return KmeansResult(
        labels=labels + 1,
        centers=centers,
        inertia=inertia,
        inertia_histories=tuple(histories),
    )


def kmeans(points, cfg: ClusteringConfig) -> np.ndarray:
    """Cluster labels in {1..n_cl} for each point."""
    return kmeans_full(points, cfg).labels


def summarize(records, labels, n_cl: int) -> ClusterSummary:
    """Per-cluster parameter-space centers, weights and label dispersions.

    Empty clusters are dropped; weights are member_count / len(records), so
    they sum to one over the surviving clusters.
    """
    labels = np.asarray(labels)
    if labels.shape[0] != len(records):
        raise ValueError("labels must align with records")
    n = len(records)
    if n == 0:
        raise ValueError("cannot summarize an empty record set")
    ws = np.array([rec.w for rec in records])
    js = np.array([rec.J_star for rec in records])
    gs = np.array([rec.g_star for rec in records])
    centers, weights, var_j, var_g, counts = [], [], [], [], []
    for i in range(1, n_cl + 1):
        mask = labels == i
        count = int(mask.sum())
        if count == 0:
            continue
        centers.append(ws[mask].mean(axis=0))
        weights.append(count / n)
        var_j.append(float(np.var(js[mask])))
        var_g.append(float(np.var(gs[mask])))
        counts.append(count)
    return ClusterSummary(
        w_centers=np.array(centers),
        p=np.array(weights),
        sigma_J=np.array(var_j),
        sigma_g=np.array(var_g),
        member_count=np.array(counts),
    )


def cluster_records(records, cfg: ClusteringConfig) -> ClusterSummary:
    """Cluster a record snapshot by its labels and summarize the result."""
    result = kmeans_full(label_matrix(records), cfg)
    return summarize(records, result.labels, cfg.n_cl)
