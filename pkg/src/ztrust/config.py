"""Scenario configuration: TOML in, fully resolved dataclasses out.

Unknown keys are errors. Every default that was filled in is visible in
``ScenarioConfig.to_dict()``, which is what run metadata records.
"""
from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .aggregation import RobustParams
from .attacks import ATTACK_KINDS, AttackSpec, FailureSpec
from .clustering import AnomalyParams
from .errors import ConfigError
from .model import TrainConfig
from .trust import ContextShift, TrustParams

TOPOLOGIES = ("bfl_robust", "bfl_plain", "centralized_fedavg")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" | "idx"
    n_samples: int = 5000
    n_features: int = 16
    n_classes: int = 4
    class_separation: float = 2.25
    test_fraction: float = 0.2
    partition: str = "iid"
    shards_per_device: int = 2
    images_path: str | None = None
    labels_path: str | None = None
    test_images_path: str | None = None
    test_labels_path: str | None = None


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 5
    batch_size: int = 10
    learning_rate: float = 0.01


@dataclass(frozen=True)
class AggregationConfig:
    epsilon_mode: str = "robust_z"
    epsilon: float = 1.0
    theta: float = 3.0
    trust_weighted: bool = True


@dataclass(frozen=True)
class VerificationConfig:
    max_update_norm: float | None = None  # None: warmup_factor x median clean warm-up norm
    warmup_factor: float = 10.0


@dataclass(frozen=True)
class AnomalyConfig:
    width: float = 1.0
    k: int = 3
    s: float = 2.0
    score_normalizer: float | None = None
    context_sigma: float = 1.0
    contexts_per_round: int = 4
    n_locations: int = 3
    sharing: str = "ledger"  # "ledger" | "p2p"


@dataclass(frozen=True)
class TrustSection:
    t0: float = 0.5
    alpha: float = 0.3
    tau: float = 0.25


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "sign_flip"
    scale: float = 5.0
    noise_sigma: float = 0.0
    selection: str = "none"  # "none" | "fixed" | "random"
    malicious_ids: tuple = ()
    malicious_fraction: float | None = None  # "fixed" shorthand: the first ceil(f * n) ids
    min_k: int = 0
    max_k: int = 0
    context_shift: bool = True
    failed_auth_delta: float = 0.4
    request_rate_factor: float = 3.0


@dataclass(frozen=True)
class FailureSection:
    device_dropout_prob: float = 0.0
    server_failure_round: int | None = None


@dataclass(frozen=True)
class DelayParams:
    """Per-phase costs in simulated seconds."""

    t_train_per_sample: float = 0.001
    t_upload_per_update: float = 0.05
    t_verify_per_update: float = 0.002
    t_mine_per_block: float = 0.5
    t_cluster_per_point: float = 0.002
    t_merge_per_cluster: float = 0.004
    t_trust_per_device: float = 0.008


@dataclass(frozen=True)
class ScenarioConfig:
    topology: str
    n_devices: int
    rounds: int
    n_miners: int = 2
    master_seed: int = 0
    periodic_interval: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainSection = field(default_factory=TrainSection)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    verification: VerificationConfig = field(default_factory=VerificationConfig)
    anomaly: AnomalyConfig = field(default_factory=AnomalyConfig)
    trust: TrustSection = field(default_factory=TrustSection)
    attack: AttackConfig = field(default_factory=AttackConfig)
    failure: FailureSection = field(default_factory=FailureSection)
    delay: DelayParams = field(default_factory=DelayParams)

    def __post_init__(self):
        _validate(self)

    # domain views

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.train.epochs, self.train.batch_size, self.train.learning_rate)

    @property
    def robust_params(self) -> RobustParams:
        a = self.aggregation
        return RobustParams(a.epsilon_mode, a.epsilon, a.theta, self.trust.tau, a.trust_weighted)

    @property
    def anomaly_params(self) -> AnomalyParams:
        return AnomalyParams(self.anomaly.k, self.anomaly.s, self.anomaly.score_normalizer)

    @property
    def trust_params(self) -> TrustParams:
        return TrustParams(self.trust.t0, self.trust.alpha, self.trust.tau)

    @property
    def malicious_ids(self) -> tuple:
        a = self.attack
        if a.selection != "fixed":
            return ()
        if a.malicious_fraction is not None:
            k = math.ceil(round(a.malicious_fraction * self.n_devices, 9))
            return tuple(range(k))
        return tuple(sorted(set(a.malicious_ids)))

    @property
    def attack_spec(self) -> AttackSpec:
        a = self.attack
        shift = ContextShift(a.failed_auth_delta, a.request_rate_factor) if a.context_shift else None
        return AttackSpec(a.kind, a.scale, a.noise_sigma, a.selection, self.malicious_ids, a.min_k, a.max_k, shift)

    @property
    def failure_spec(self) -> FailureSpec:
        return FailureSpec(self.failure.device_dropout_prob, self.failure.server_failure_round)

    def replace(self, **changes) -> "ScenarioConfig":
        """Copy with top-level fields or dotted ``section.key`` fields changed."""
        top = {}
        sections: dict = {}
        for key, value in changes.items():
            sec, _, name = key.partition(".")
            if name:
                sections.setdefault(sec, {})[name] = value
            else:
                top[key] = value
        for sec, vals in sections.items():
            top[sec] = dataclasses.replace(getattr(self, sec), **vals)
        return dataclasses.replace(self, **top)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _fail(key, msg):
    raise ConfigError(key, msg)


def _validate(cfg: ScenarioConfig):
    if cfg.topology not in TOPOLOGIES:
        _fail("topology", f"must be one of {', '.join(TOPOLOGIES)}")
    if cfg.n_devices < 1:
        _fail("n_devices", "must be >= 1")
    if cfg.rounds < 1:
        _fail("rounds", "must be >= 1")
    if cfg.n_miners < 1:
        _fail("n_miners", "must be >= 1")
    if cfg.periodic_interval < 1:
        _fail("periodic_interval", "must be >= 1")
    d = cfg.data
    if d.source not in ("synthetic", "idx"):
        _fail("data.source", "must be 'synthetic' or 'idx'")
    if d.source == "idx" and not (d.images_path and d.labels_path):
        _fail("data.images_path", "idx source needs images_path and labels_path")
    if d.partition not in ("iid", "label_shard"):
        _fail("data.partition", "must be 'iid' or 'label_shard'")
    if d.source == "synthetic":
        if d.n_classes < 2:
            _fail("data.n_classes", "must be >= 2")
        if d.n_samples < d.n_classes:
            _fail("data.n_samples", "must be >= n_classes")
        if not d.class_separation > 0:
            _fail("data.class_separation", "must be positive")
        if d.n_samples * (1 - d.test_fraction) < cfg.n_devices:
            _fail("n_devices", "more devices than training samples")
    if not 0 <= d.test_fraction < 1:
        _fail("data.test_fraction", "must be in [0, 1)")
    t = cfg.train
    if t.epochs < 1:
        _fail("train.epochs", "must be >= 1")
    if t.batch_size < 1:
        _fail("train.batch_size", "must be >= 1")
    if not t.learning_rate >= 0:
        _fail("train.learning_rate", "must be >= 0")
    if cfg.aggregation.epsilon_mode not in ("robust_z", "absolute"):
        _fail("aggregation.epsilon_mode", "must be 'robust_z' or 'absolute'")
    if not cfg.aggregation.theta > 0:
        _fail("aggregation.theta", "must be positive")
    if not cfg.aggregation.epsilon >= 0:
        _fail("aggregation.epsilon", "must be >= 0")
    v = cfg.verification
    if v.max_update_norm is not None and not v.max_update_norm > 0:
        _fail("verification.max_update_norm", "must be positive")
    if not v.warmup_factor > 0:
        _fail("verification.warmup_factor", "must be positive")
    an = cfg.anomaly
    if not an.width > 0:
        _fail("anomaly.width", "must be positive")
    if an.k < 1:
        _fail("anomaly.k", "must be >= 1")
    if not an.s > 0:
        _fail("anomaly.s", "must be positive")
    if an.score_normalizer is not None and not an.score_normalizer > 0:
        _fail("anomaly.score_normalizer", "must be positive")
    if an.contexts_per_round < 1:
        _fail("anomaly.contexts_per_round", "must be >= 1")
    if an.n_locations < 1:
        _fail("anomaly.n_locations", "must be >= 1")
    if an.context_sigma < 0:
        _fail("anomaly.context_sigma", "must be >= 0")
    if an.sharing not in ("ledger", "p2p"):
        _fail("anomaly.sharing", "must be 'ledger' or 'p2p'")
    tr = cfg.trust
    if not 0 <= tr.t0 <= 1:
        _fail("trust.t0", "must be in [0, 1]")
    if not 0 < tr.alpha <= 1:
        _fail("trust.alpha", "must be in (0, 1]")
    if not 0 <= tr.tau <= 1:
        _fail("trust.tau", "must be in [0, 1]")
    a = cfg.attack
    if a.kind not in ATTACK_KINDS:
        _fail("attack.kind", f"must be one of {', '.join(ATTACK_KINDS)}")
    if a.selection not in ("none", "fixed", "random"):
        _fail("attack.selection", "must be 'none', 'fixed' or 'random'")
    if a.kind != "gaussian_noise" and a.scale == 0:
        _fail("attack.scale", "must be nonzero")
    if a.noise_sigma < 0:
        _fail("attack.noise_sigma", "must be >= 0")
    if any(i < 0 or i >= cfg.n_devices for i in a.malicious_ids):
        _fail("attack.malicious_ids", "ids must be in [0, n_devices)")
    if a.malicious_fraction is not None and not 0 <= a.malicious_fraction <= 1:
        _fail("attack.malicious_fraction", "must be in [0, 1]")
    if not 0 <= a.min_k <= a.max_k:
        _fail("attack.min_k", "need 0 <= min_k <= max_k")
    if a.max_k > cfg.n_devices:
        _fail("attack.max_k", "exceeds n_devices")
    f = cfg.failure
    if not 0 <= f.device_dropout_prob <= 1:
        _fail("failure.device_dropout_prob", "must be in [0, 1]")
    if f.server_failure_round is not None:
        if cfg.topology != "centralized_fedavg":
            _fail("failure.server_failure_round", "only valid for topology centralized_fedavg")
        if f.server_failure_round < 0:
            _fail("failure.server_failure_round", "must be >= 0")
    for name, value in dataclasses.asdict(cfg.delay).items():
        if value < 0:
            _fail(f"delay.{name}", "must be >= 0")


# TOML -> dataclasses

def _coerce(key, value, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)]
        if value is None:
            return None
        return _coerce(key, value, inner[0])
    if hint is bool:
        if not isinstance(value, bool):
            _fail(key, "expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(key, "expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(key, "expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            _fail(key, "expected a string")
        return value
    if hint is tuple or origin is tuple:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            _fail(key, "expected a list of integers")
        return tuple(value)
    raise TypeError(f"no coercion for {hint}")


def _build(cls, table, prefix=""):
    if not isinstance(table, dict):
        _fail(prefix.rstrip(".") or "<root>", "expected a table")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in table:
        if key not in known:
            _fail(prefix + key, "unknown key")
    kwargs = {}
    for name, f in known.items():
        hint = hints[name]
        full = prefix + name
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, table.get(name, {}), full + ".")
        elif name in table:
            kwargs[name] = _coerce(full, table[name], hint)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            _fail(full, "required key is missing")
    return cls(**kwargs)


def config_from_dict(table: dict) -> ScenarioConfig:
    return _build(ScenarioConfig, table)


def load_config(path) -> ScenarioConfig:
    try:
        with open(path, "rb") as fh:
            table = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"not valid TOML: {exc}") from exc
    cfg = config_from_dict(table)
    d = cfg.data
    if d.source == "idx":
        # relative data paths are relative to the config file
        base = Path(path).resolve().parent
        fixed = {k: str(base / v) for k in ("images_path", "labels_path", "test_images_path", "test_labels_path")
                 if (v := getattr(d, k)) is not None}
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(d, **fixed))
    return cfg


def dump_toml(cfg: ScenarioConfig) -> str:
    """Serialize a config back to TOML (None values are omitted)."""
    lines, tables = [], []
    for key, value in cfg.to_dict().items():
        if isinstance(value, dict):
            body = [f"{k} = {_toml_value(v)}" for k, v in value.items() if v is not None]
            tables.append(f"[{key}]\n" + "\n".join(body))
        elif value is not None:
            lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n\n" + "\n\n".join(tables) + "\n"


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)
