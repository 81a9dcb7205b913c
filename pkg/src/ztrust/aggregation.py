"""Global aggregation: FedAvg baseline and the screened, trust-weighted robust rule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

MAD_SCALE = 1.4826


@dataclass(frozen=True)
class RobustParams:
    # "robust_z": flag d > median(d) + theta * MAD(d); "absolute": flag d > epsilon
    epsilon_mode: str = "robust_z"
    epsilon: float = 1.0
    theta: float = 3.0
    trust_threshold: float = 0.25
    trust_weighted: bool = True

    def __post_init__(self):
        if self.epsilon_mode not in ("robust_z", "absolute"):
            raise ValueError(f"unknown epsilon_mode {self.epsilon_mode!r}")
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        if not 0.0 <= self.trust_threshold <= 1.0:
            raise ValueError("trust_threshold must be in [0, 1]")


@dataclass
class RobustResult:
    update: np.ndarray
    discarded: set
    flagged: set
    degenerate: bool
    distances: dict


def _stack(updates) -> np.ndarray:
    if len(updates) == 0:
        raise ValueError("no updates")
    try:
        arr = np.array([np.asarray(u, dtype=np.float64) for u in updates])
    except ValueError as exc:
        raise ShapeError("updates differ in dimension") from exc
    if arr.ndim != 2:
        raise ShapeError("updates differ in dimension")
    return arr


def expected_update(updates) -> np.ndarray:
    """Coordinate-wise median of the round's updates."""
    return np.median(_stack(updates), axis=0)


def screen_anomalies(updates, params: RobustParams = RobustParams()):
    """L2 distance of each update to the coordinate median, and whether it is flagged."""
    arr = _stack(updates)
    dist = np.linalg.norm(arr - np.median(arr, axis=0), axis=1)
    if params.epsilon_mode == "absolute":
        flags = dist > params.epsilon
    else:
        if len(arr) < 2:
            raise ValueError("robust_z screening needs at least 2 updates")
        med = np.median(dist)
        mad = MAD_SCALE * np.median(np.abs(dist - med))
        if mad > 0:
            flags = dist > med + params.theta * mad
        else:
            flags = dist > med * (1 + 1e-9)
    return dist, flags


def weighted_mean(updates, weights) -> np.ndarray:
    arr = _stack(updates)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(arr),):
        raise ShapeError("one weight per update required")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    return (w / w.sum()) @ arr


def aggregate_fedavg(updates, weights=None) -> np.ndarray:
    """Weighted arithmetic mean; weights are shard sizes (uniform if omitted)."""
    if weights is None:
        weights = np.ones(len(updates))
    return weighted_mean(updates, weights)


def aggregate_robust(updates: dict, trust: dict, params: RobustParams = RobustParams(), sizes: dict | None = None) -> RobustResult:
    """Screen, drop low-trust devices, combine the survivors.

    ``updates`` maps device id to its verified update; ``trust`` maps device id
    to its current trust; ``sizes`` gives shard sizes (default 1 each).
    """
    if not updates:
        raise ValueError("no updates")
    ids = sorted(updates)
    vecs = [updates[i] for i in ids]
    if len(ids) >= 2 or params.epsilon_mode == "absolute":
        dist, flags = screen_anomalies(vecs, params)
    else:
        dist, flags = np.zeros(1), np.zeros(1, dtype=bool)
    flagged = {d for d, f in zip(ids, flags) if f}
    low_trust = {d for d in ids if trust[d] < params.trust_threshold}
    if params.trust_weighted:
        # zero trust means zero weight, i.e. isolated
        low_trust |= {d for d in ids if trust[d] <= 0}
    discarded = flagged | low_trust
    keep = [d for d in ids if d not in discarded]
    distances = dict(zip(ids, map(float, dist)))
    if not keep:
        return RobustResult(np.zeros(len(np.asarray(vecs[0]))), discarded, flagged, True, distances)

    kept = [updates[d] for d in keep]
    if params.trust_weighted:
        size = [1.0 if sizes is None else float(sizes[d]) for d in keep]
        t = [trust[d] for d in keep]
        # a common trust factor cancels; leave it out so the result equals FedAvg bit for bit
        weights = size if len(set(t)) == 1 else [a * b for a, b in zip(t, size)]
        result = weighted_mean(kept, weights)
    else:
        result = np.median(_stack(kept), axis=0)
    return RobustResult(result, discarded, flagged, False, distances)
