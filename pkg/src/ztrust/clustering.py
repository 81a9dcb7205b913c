"""Fixed-width hyperspherical clustering and cluster-level anomaly scoring.

Each node clusters its own context points in one pass; only the cluster
summaries (center, count) leave the node. Summaries from all nodes are merged
into a global set whose clusters are scored by inter-cluster distance (ICD):
the mean distance from a center to its K nearest neighbouring centers.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class ClusterSummary:
    center: np.ndarray
    count: int


@dataclass
class ClusterSet:
    width: float
    dim: int
    clusters: list = field(default_factory=list)

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("cluster width must be positive")

    def __len__(self):
        return len(self.clusters)

    @property
    def centers(self) -> np.ndarray:
        if not self.clusters:
            return np.empty((0, self.dim))
        return np.array([c.center for c in self.clusters])

    @property
    def total_count(self) -> int:
        return sum(c.count for c in self.clusters)

    def copy(self) -> "ClusterSet":
        return ClusterSet(self.width, self.dim, [ClusterSummary(c.center.copy(), c.count) for c in self.clusters])

    def insert(self, point) -> "ClusterSet":
        p = np.asarray(point, dtype=np.float64)
        if p.shape != (self.dim,):
            raise ShapeError(f"point has shape {p.shape}, cluster set expects ({self.dim},)")
        if self.clusters:
            dist = np.linalg.norm(self.centers - p, axis=1)
            j = int(np.argmin(dist))
            if dist[j] <= self.width:
                c = self.clusters[j]
                c.count += 1
                c.center = c.center + (p - c.center) / c.count
                return self
        self.clusters.append(ClusterSummary(p.copy(), 1))
        return self

    # wire format: what a node shares, n_clusters x (dim + 1) numbers

    def payload(self) -> np.ndarray:
        out = np.empty((len(self.clusters), self.dim + 1))
        for row, c in zip(out, self.clusters):
            row[:-1] = c.center
            row[-1] = c.count
        return out

    @classmethod
    def from_payload(cls, width, payload) -> "ClusterSet":
        payload = np.atleast_2d(np.asarray(payload, dtype=np.float64))
        dim = payload.shape[1] - 1
        return cls(width, dim, [ClusterSummary(row[:-1].copy(), int(row[-1])) for row in payload])

    def to_bytes(self) -> bytes:
        head = struct.pack("<dqq", self.width, self.dim, len(self.clusters))
        return head + np.ascontiguousarray(self.payload(), dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ClusterSet":
        width, dim, n = struct.unpack_from("<dqq", blob)
        body = np.frombuffer(blob, dtype="<f8", offset=24, count=n * (dim + 1))
        return cls.from_payload(width, body.reshape(n, dim + 1)) if n else cls(width, dim)


@dataclass(frozen=True)
class AnomalyParams:
    k: int = 3
    s: float = 2.0
    score_normalizer: float | None = None  # None: mean ICD of the set being scored

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if not self.s > 0:
            raise ValueError("s must be positive")


def cluster_insert(cs: ClusterSet, point) -> ClusterSet:
    return cs.insert(point)


def build_clusters(points, width: float, dim: int | None = None) -> ClusterSet:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cs = ClusterSet(width, points.shape[1] if dim is None else dim)
    for p in points:
        cs.insert(p)
    return cs


def inter_cluster_distances(cs: ClusterSet, k: int) -> np.ndarray:
    centers = cs.centers
    d = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    return np.sort(d, axis=1)[:, :k].mean(axis=1)


def local_anomaly_scores(cs: ClusterSet, params: AnomalyParams = AnomalyParams()):
    """Per-cluster (score in [0, 1], flagged). With <= K clusters everything scores 0."""
    n = len(cs)
    if n <= params.k:
        return np.zeros(n), np.zeros(n, dtype=bool)
    icd = inter_cluster_distances(cs, params.k)
    mean, std = icd.mean(), icd.std()
    flags = icd > mean + params.s * std
    norm = params.score_normalizer
    if norm is None:
        norm = mean if mean > 0 else 1.0
    scores = np.clip(np.maximum(0.0, icd - mean) / norm, 0.0, 1.0)
    return scores, flags


def merge_clusters(sets) -> ClusterSet:
    """Pool every cluster, then repeatedly merge the closest pair within width.

    Ties go to the lowest (i, j) in pooled order; the survivor keeps slot i.
    """
    sets = list(sets)
    if not sets:
        raise ValueError("nothing to merge")
    width, dim = sets[0].width, sets[0].dim
    for cs in sets:
        if cs.width != width:
            raise ValueError("cluster sets have different widths")
        if cs.dim != dim:
            raise ShapeError("cluster sets have different dimensions")
    centers = [c.center.astype(np.float64) for cs in sets for c in cs.clusters]
    counts = [c.count for cs in sets for c in cs.clusters]
    if not centers:
        return ClusterSet(width, dim)
    pts = np.array(centers)
    cnt = np.array(counts, dtype=np.int64)
    alive = np.ones(len(pts), dtype=bool)
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    dist[np.tril_indices(len(pts))] = np.inf
    while True:
        flat = int(np.argmin(dist))
        i, j = divmod(flat, len(pts))
        if not dist[i, j] <= width:
            break
        total = cnt[i] + cnt[j]
        pts[i] = (cnt[i] * pts[i] + cnt[j] * pts[j]) / total
        cnt[i] = total
        alive[j] = False
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        fresh = np.linalg.norm(pts - pts[i], axis=1)
        fresh[~alive] = np.inf
        dist[i, i + 1:] = fresh[i + 1:]
        dist[:i, i] = fresh[:i]
    return ClusterSet(width, dim, [ClusterSummary(pts[k].copy(), int(cnt[k])) for k in np.flatnonzero(alive)])


def device_anomaly(global_set: ClusterSet, params: AnomalyParams, device_points, scores=None) -> float:
    """Mean over the device's points of its owning global cluster's score.

    A point farther than the width from every center counts as 1.
    """
    pts = np.atleast_2d(np.asarray(device_points, dtype=np.float64))
    if pts.shape[0] == 0:
        raise ValueError("device has no points")
    if len(global_set) == 0:
        return 1.0
    if scores is None:
        scores, _ = local_anomaly_scores(global_set, params)
    dist = np.linalg.norm(pts[:, None, :] - global_set.centers[None, :, :], axis=2)
    owner = np.argmin(dist, axis=1)
    nearest = dist[np.arange(len(pts)), owner]
    contrib = np.where(nearest > global_set.width, 1.0, scores[owner])
    return float(contrib.mean())


def score_to_trust(a: float) -> float:
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"anomaly score {a} outside [0, 1]")
    return 1.0 - a


class RunningScaler:
    """Per-dimension running mean/std (Welford) used to z-score context features."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self._m2 = np.zeros(dim)

    def update(self, points):
        for p in np.atleast_2d(np.asarray(points, dtype=np.float64)):
            self.n += 1
            delta = p - self.mean
            self.mean += delta / self.n
            self._m2 += delta * (p - self.mean)

    @property
    def std(self) -> np.ndarray:
        if self.n < 2:
            return np.ones_like(self.mean)
        sd = np.sqrt(self._m2 / self.n)
        return np.where(sd > 0, sd, 1.0)

    def transform(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.mean) / self.std
