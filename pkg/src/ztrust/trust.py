"""Per-device trust: context sampling, smoothed trust updates, access decisions."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger(__name__)

CONTEXT_FIELDS = (
    "location_id",
    "device_posture",
    "network_latency_ms",
    "request_rate",
    "failed_auth_rate",
    "off_hours",
)
# per-field noise scale multiplied by the configured sigma; discrete fields stay put
_NOISE_SCALE = np.array([0.0, 0.01, 2.0, 0.04, 0.003, 0.0])


@dataclass(frozen=True)
class ContextVector:
    location_id: int = 0
    device_posture: float = 1.0
    network_latency_ms: float = 50.0
    request_rate: float = 1.0
    failed_auth_rate: float = 0.0
    off_hours: int = 0

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError("context fields must be finite")
        if not 0 <= self.device_posture <= 1 or not 0 <= self.failed_auth_rate <= 1:
            raise ValueError("posture and failed_auth_rate must lie in [0, 1]")
        if self.network_latency_ms < 0 or self.request_rate < 0:
            raise ValueError("latency and request rate must be nonnegative")
        if self.off_hours not in (0, 1):
            raise ValueError("off_hours must be 0 or 1")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in CONTEXT_FIELDS], dtype=np.float64)


@dataclass(frozen=True)
class ContextShift:
    """How a compromised device's behaviour departs from its baseline."""

    failed_auth_delta: float = 0.4
    request_rate_factor: float = 3.0
    posture_delta: float = 0.0
    latency_delta_ms: float = 0.0
    off_hours: int | None = None


def random_baseline(rng: np.random.Generator, n_locations: int = 3) -> ContextVector:
    return ContextVector(
        location_id=int(rng.integers(n_locations)),
        device_posture=float(rng.uniform(0.7, 1.0)),
        network_latency_ms=float(rng.uniform(20.0, 80.0)),
        request_rate=float(rng.uniform(0.8, 1.5)),
        failed_auth_rate=float(rng.uniform(0.0, 0.05)),
        off_hours=0,
    )


def collect_context(baseline: ContextVector, rng: np.random.Generator, sigma: float = 1.0,
                    attack_overlay: ContextShift | None = None) -> ContextVector:
    """One observation of a device's context: baseline plus Gaussian jitter, then any attack shift."""
    noise = sigma * _NOISE_SCALE * rng.standard_normal(len(CONTEXT_FIELDS))
    v = baseline.as_array() + noise
    posture = float(np.clip(v[1], 0.0, 1.0))
    latency = max(0.0, float(v[2]))
    rate = max(0.0, float(v[3]))
    failed = float(np.clip(v[4], 0.0, 1.0))
    off_hours = baseline.off_hours
    if attack_overlay is not None:
        posture = float(np.clip(posture + attack_overlay.posture_delta, 0.0, 1.0))
        latency = max(0.0, latency + attack_overlay.latency_delta_ms)
        rate *= attack_overlay.request_rate_factor
        failed = min(1.0, failed + attack_overlay.failed_auth_delta)
        if attack_overlay.off_hours is not None:
            off_hours = attack_overlay.off_hours
    return ContextVector(baseline.location_id, posture, latency, rate, failed, off_hours)


@dataclass(frozen=True)
class TrustParams:
    t0: float = 0.5
    alpha: float = 0.3
    tau: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.t0 <= 1.0:
            raise ValueError("t0 must be in [0, 1]")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be in [0, 1]")


@dataclass
class TrustRecord:
    device_id: int
    trust: float
    history: list = field(default_factory=list)  # (round, trust, anomaly)

    @classmethod
    def fresh(cls, device_id: int, params: TrustParams = TrustParams()):
        return cls(device_id, params.t0)


def update_trust(record: TrustRecord, a: float, params: TrustParams = TrustParams(), round_: int | None = None) -> TrustRecord:
    """Exponential smoothing toward 1 - a. Returns a new record."""
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"anomaly score {a} outside [0, 1]")
    if round_ is None:
        round_ = record.history[-1][0] + 1 if record.history else 0
    if record.history and round_ <= record.history[-1][0]:
        raise ValueError("trust history rounds must increase")
    trust = (1.0 - params.alpha) * record.trust + params.alpha * (1.0 - a)
    trust = min(1.0, max(0.0, trust))
    return replace(record, trust=trust, history=record.history + [(round_, trust, a)])


class Decision(enum.Enum):
    ALLOW = "allow"
    DENY = "deny"


def access_decision(record: TrustRecord, params: TrustParams = TrustParams(), round_: int | None = None) -> Decision:
    decision = Decision.ALLOW if record.trust >= params.tau else Decision.DENY
    log.debug("round=%s device=%d trust=%.6f decision=%s", round_, record.device_id, record.trust, decision.value)
    return decision
