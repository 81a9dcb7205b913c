"""Adversary and fault injection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .trust import ContextShift

ATTACK_KINDS = ("sign_flip", "scale", "gaussian_noise")


@dataclass(frozen=True)
class AttackSpec:
    """Who is malicious each round and what they do to their update.

    ``selection`` is "none", "fixed" (``malicious_ids`` every round) or
    "random" (k uniform in [min_k, max_k], then a uniform k-subset).
    For sign_flip the update becomes ``-scale * update``; for scale it
    becomes ``scale * update``.
    """

    kind: str = "sign_flip"
    scale: float = 5.0
    noise_sigma: float = 0.0
    selection: str = "none"
    malicious_ids: tuple = ()
    min_k: int = 0
    max_k: int = 0
    context_shift: ContextShift | None = field(default_factory=ContextShift)

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.selection not in ("none", "fixed", "random"):
            raise ValueError(f"unknown selection {self.selection!r}")
        if self.kind != "gaussian_noise" and self.scale == 0:
            raise ValueError("scale must be nonzero")
        if not 0 <= self.min_k <= self.max_k:
            raise ValueError("need 0 <= min_k <= max_k")


@dataclass(frozen=True)
class FailureSpec:
    device_dropout_prob: float = 0.0
    server_failure_round: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.device_dropout_prob <= 1.0:
            raise ValueError("device_dropout_prob must be in [0, 1]")


def select_malicious(round_: int, spec: AttackSpec, rng: np.random.Generator, n_devices: int) -> frozenset:
    if spec.selection == "none":
        return frozenset()
    if spec.selection == "fixed":
        return frozenset(int(i) for i in spec.malicious_ids)
    if spec.max_k > n_devices:
        raise ValueError("max_k exceeds the number of devices")
    k = int(rng.integers(spec.min_k, spec.max_k + 1))
    return frozenset(int(i) for i in rng.choice(n_devices, size=k, replace=False))


def corrupt_update(update, spec: AttackSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    update = np.asarray(update, dtype=np.float64)
    if spec.kind == "sign_flip":
        return -spec.scale * update
    if spec.kind == "scale":
        return spec.scale * update
    if spec.noise_sigma == 0:
        return update.copy()
    return update + spec.noise_sigma * rng.standard_normal(update.shape)


def apply_failures(round_: int, devices, spec: FailureSpec, rng: np.random.Generator, centralized: bool = False):
    """Drop devices independently; returns (survivors, aggregator_alive).

    The aggregator can only die in the centralized topology: with a ledger,
    any device can take over aggregation.
    """
    devices = list(devices)
    if spec.device_dropout_prob > 0:
        keep = rng.random(len(devices)) >= spec.device_dropout_prob
        survivors = [d for d, k in zip(devices, keep) if k]
    else:
        survivors = devices
    alive = True
    if centralized and spec.server_failure_round is not None:
        alive = round_ < spec.server_failure_round
    return survivors, alive
