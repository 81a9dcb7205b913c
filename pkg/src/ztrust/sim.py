"""Round loop binding training, ledger, clustering-based trust and aggregation.

One round, in order: pick attackers, collect contexts, cluster per node,
merge summaries into global clusters, score devices, update trust, train
locally, corrupt attacker updates, verify, mine, aggregate, evaluate.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .aggregation import aggregate_fedavg, aggregate_robust
from .attacks import apply_failures, corrupt_update, select_malicious
from .clustering import (
    ClusterSet,
    RunningScaler,
    device_anomaly,
    local_anomaly_scores,
    merge_clusters,
)
from .config import DelayParams, ScenarioConfig
from .data import Dataset, PartitionSpec, gen_synthetic, load_idx, partition, train_test_split
from .ledger import ChainState, Ledger, UpdateRecord, VerificationPolicy, verify_update
from .model import ModelShape, TrainConfig, accuracy, local_train
from .seeding import derive_seed, stream
from .trust import CONTEXT_FIELDS, Decision, TrustRecord, access_decision, collect_context, random_baseline, update_trust

log = logging.getLogger(__name__)

CSV_FIXED_COLUMNS = ("round", "accuracy", "delay_s", "degenerate", "tp", "fp", "fn", "tn", "discarded")


@dataclass
class RoundMetrics:
    round: int
    accuracy: float
    delay_s: float
    degenerate: bool
    tp: int
    fp: int
    fn: int
    tn: int
    discarded: tuple
    malicious: tuple
    trust: tuple
    participating: tuple = ()
    rejected: dict = field(default_factory=dict)  # device -> reason
    aggregated: tuple = ()
    aggregator_alive: bool = True
    n_points: int = 0
    n_local_clusters: int = 0
    n_global_clusters: int = 0
    shared_numbers: int = 0
    denied: tuple = ()

    def csv_row(self) -> list:
        return [
            str(self.round),
            repr(self.accuracy),
            repr(self.delay_s),
            str(int(self.degenerate)),
            str(self.tp),
            str(self.fp),
            str(self.fn),
            str(self.tn),
            ";".join(map(str, self.discarded)),
        ] + [repr(t) for t in self.trust]


@dataclass
class SimState:
    round: int
    params: np.ndarray
    trust: dict
    ledger: Ledger
    scaler: RunningScaler
    clock: float = 0.0


@dataclass
class ScenarioResult:
    metrics: list
    ledger: Ledger
    metadata: dict

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([m.accuracy for m in self.metrics])

    @property
    def delays(self) -> np.ndarray:
        return np.array([m.delay_s for m in self.metrics])


def round_delay(delay: DelayParams, robust: bool, train_sizes, accepted: int, points: int = 0,
                clusters: int = 0, devices: int = 0) -> float:
    """Simulated wall time of one round.

    Devices train in parallel, so only the slowest one counts; verification
    and mining are serial; the clustering/trust pipeline only runs in the
    robust topology.
    """
    train = max((n * delay.t_train_per_sample + delay.t_upload_per_update for n in train_sizes), default=0.0)
    total = train + accepted * delay.t_verify_per_update + delay.t_mine_per_block
    if robust:
        total += points * delay.t_cluster_per_point + clusters * delay.t_merge_per_cluster + devices * delay.t_trust_per_device
    return total


def oscillation(accuracies) -> float:
    """Std of round-over-round accuracy changes over the second half of a run."""
    acc = np.asarray(accuracies, dtype=np.float64)
    tail = acc[len(acc) // 2:]
    if len(tail) < 2:
        return 0.0
    return float(np.std(np.diff(tail)))


def detection_rate(runs) -> dict:
    """Mean per-round TP/(TP+FN), bucketed by the number of attackers that round.

    ``runs`` is one metrics list or a list of them (seeds); rounds without
    attackers contribute nothing and empty buckets are absent.
    """
    if runs and isinstance(runs[0], RoundMetrics):
        runs = [runs]
    buckets: dict = {}
    for metrics in runs:
        for m in metrics:
            k = m.tp + m.fn
            if k == 0:
                continue
            buckets.setdefault(k, []).append(m.tp / k)
    return {k: float(np.mean(v)) for k, v in sorted(buckets.items())}


def false_positive_rate(runs) -> float:
    """Mean per-round FP/(FP+TN) over rounds that had honest participants."""
    if runs and isinstance(runs[0], RoundMetrics):
        runs = [runs]
    rates = [m.fp / (m.fp + m.tn) for metrics in runs for m in metrics if m.fp + m.tn > 0]
    return float(np.mean(rates)) if rates else 0.0


def _worker_count(threads):
    if threads is None:
        threads = int(os.environ.get("ZTRUST_THREADS", "1") or 1)
    return max(1, int(threads))


def load_data(cfg: ScenarioConfig):
    d = cfg.data
    seed = cfg.master_seed
    if d.source == "synthetic":
        full = gen_synthetic(d.n_samples, d.n_features, d.n_classes, d.class_separation, derive_seed(seed, "data"))
        train, test = train_test_split(full, d.test_fraction, derive_seed(seed, "split"))
        n_classes = d.n_classes
    else:
        full = load_idx(d.images_path, d.labels_path)
        if d.test_images_path and d.test_labels_path:
            train, test = full, load_idx(d.test_images_path, d.test_labels_path)
        else:
            train, test = train_test_split(full, d.test_fraction, derive_seed(seed, "split"))
        n_classes = max(2, int(max(train.labels.max(), test.labels.max() if len(test) else 0)) + 1)
    if cfg.n_devices > len(train):
        raise ValueError(f"{cfg.n_devices} devices but only {len(train)} training samples")
    return train, test, ModelShape(train.n_features, n_classes)


class Simulation:
    def __init__(self, cfg: ScenarioConfig, threads: int | None = None):
        self.cfg = cfg
        self.threads = _worker_count(threads)
        self.train, self.test, self.shape = load_data(cfg)
        spec = PartitionSpec(cfg.data.partition, cfg.data.shards_per_device, derive_seed(cfg.master_seed, "partition"))
        self.shards = [self.train.subset(idx) for idx in partition(self.train, cfg.n_devices, spec)]
        self.devices = list(range(cfg.n_devices))
        self.baselines = [random_baseline(stream(cfg.master_seed, "baseline", i), cfg.anomaly.n_locations) for i in self.devices]
        self.attack = cfg.attack_spec
        self.failure = cfg.failure_spec
        self.robust = cfg.topology == "bfl_robust"
        self.centralized = cfg.topology == "centralized_fedavg"
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None
        self.policy = None
        self.warmup_median_norm = None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()

    def _map(self, fn, items):
        if self._pool is None:
            return [fn(x) for x in items]
        return list(self._pool.map(fn, items))

    def _train(self, params, devices, round_, purpose="train"):
        base = TrainConfig(**{k: getattr(self.cfg.train, k) for k in ("epochs", "batch_size", "learning_rate")})

        def one(i):
            cfg = TrainConfig(base.epochs, base.batch_size, base.learning_rate, derive_seed(self.cfg.master_seed, purpose, i, round_))
            shard = self.shards[i]
            return local_train(params, self.shape, shard.features, shard.labels, cfg)

        return dict(zip(devices, self._map(one, devices)))

    def init_state(self) -> SimState:
        v = self.cfg.verification
        if v.max_update_norm is not None:
            max_norm = v.max_update_norm
        else:
            warm = self._train(self.shape.zeros(), self.devices, 0, purpose="warmup")
            self.warmup_median_norm = float(np.median([np.linalg.norm(u) for u in warm.values()]))
            max_norm = v.warmup_factor * self.warmup_median_norm
            if not max_norm > 0:
                max_norm = 1.0
        self.policy = VerificationPolicy(self.shape.dim, max_norm)
        tp = self.cfg.trust_params
        return SimState(
            round=0,
            params=self.shape.zeros(),
            trust={i: TrustRecord.fresh(i, tp) for i in self.devices},
            ledger=Ledger(self.cfg.n_miners),
            scaler=RunningScaler(len(CONTEXT_FIELDS)),
        )

    # clustering stage: contexts -> clusters -> device anomaly scores

    def _trust_pipeline(self, state: SimState, malicious):
        cfg = self.cfg
        an = cfg.anomaly
        raw = {}
        for i in self.devices:
            rng = stream(cfg.master_seed, "context", i, state.round)
            shift = self.attack.context_shift if i in malicious else None
            raw[i] = np.array([
                collect_context(self.baselines[i], rng, an.context_sigma, shift).as_array()
                for _ in range(an.contexts_per_round)
            ])
        for i in self.devices:
            state.scaler.update(raw[i])
        z = {i: state.scaler.transform(raw[i]) for i in self.devices}

        local_sets = []
        for i in self.devices:
            cs = ClusterSet(an.width, len(CONTEXT_FIELDS))
            for p in z[i]:
                cs.insert(p)
            local_sets.append(cs)
        # node-level view; with a handful of points per node these are mostly zero
        local_flags = sum(int(local_anomaly_scores(cs, cfg.anomaly_params)[1].sum()) for cs in local_sets)
        shared = sum(cs.payload().size for cs in local_sets)
        global_set = merge_clusters(local_sets)
        scores, _ = local_anomaly_scores(global_set, cfg.anomaly_params)
        anomaly = {i: device_anomaly(global_set, cfg.anomaly_params, z[i], scores) for i in self.devices}
        info = dict(
            n_points=sum(len(z[i]) for i in self.devices),
            n_local_clusters=sum(len(cs) for cs in local_sets),
            n_global_clusters=len(global_set),
            shared_numbers=shared,
            local_flags=local_flags,
        )
        return anomaly, info

    def run_round(self, state: SimState) -> tuple[SimState, RoundMetrics]:
        cfg = self.cfg
        r = state.round
        malicious = select_malicious(r, self.attack, stream(cfg.master_seed, "malicious", r), cfg.n_devices)

        info = dict(n_points=0, n_local_clusters=0, n_global_clusters=0, shared_numbers=0)
        denied = ()
        if self.robust:
            if r % cfg.periodic_interval == 0:
                anomaly, info = self._trust_pipeline(state, malicious)
                tp_params = cfg.trust_params
                state.trust = {i: update_trust(state.trust[i], anomaly[i], tp_params, r) for i in self.devices}
            denied = tuple(i for i in self.devices if access_decision(state.trust[i], cfg.trust_params, r) is Decision.DENY)

        survivors, alive = apply_failures(r, self.devices, self.failure, stream(cfg.master_seed, "failure", r), self.centralized)
        updates = self._train(state.params, survivors, r)
        for i in survivors:
            if i in malicious:
                updates[i] = corrupt_update(updates[i], self.attack, stream(cfg.master_seed, "corrupt", i, r))

        chain = ChainState(r)
        accepted, rejected = [], {}
        for i in survivors:
            n_i = len(self.shards[i])
            at = state.clock + n_i * cfg.delay.t_train_per_sample + cfg.delay.t_upload_per_update
            rec = UpdateRecord.create(i, r, updates[i], at)
            verdict = verify_update(rec, self.policy, chain)
            if verdict:
                chain.accepted.add(i)
                accepted.append(rec)
            else:
                rejected[i] = verdict.reason

        trust_map = {i: state.trust[i].trust for i in self.devices}
        state.ledger.mine_block(accepted, r, trust_snapshot=trust_map if self.robust else None)

        discarded: set = set()
        aggregated: tuple = ()
        delta = None
        if accepted and alive:
            ups = {rec.device_id: rec.update for rec in accepted}
            sizes = {i: len(self.shards[i]) for i in ups}
            if self.robust:
                res = aggregate_robust(ups, trust_map, cfg.robust_params, sizes)
                discarded = res.discarded
                if not res.degenerate:
                    delta = res.update
            else:
                ids = sorted(ups)
                delta = aggregate_fedavg([ups[i] for i in ids], [sizes[i] for i in ids])
            if delta is not None:
                aggregated = tuple(i for i in sorted(ups) if i not in discarded)
        degenerate = delta is None
        if delta is not None:
            state.params = state.params + delta
        acc = accuracy(state.params, self.shape, self.test.features, self.test.labels)

        delay = round_delay(
            cfg.delay,
            self.robust,
            [len(self.shards[i]) for i in survivors],
            len(accepted),
            info["n_points"],
            info["n_local_clusters"],
            cfg.n_devices if info["n_points"] else 0,
        )
        state.clock += delay

        flagged = set(rejected) | discarded
        part = set(survivors)
        mal = part & set(malicious)
        honest = part - mal
        metrics = RoundMetrics(
            round=r,
            accuracy=acc,
            delay_s=delay,
            degenerate=degenerate,
            tp=len(mal & flagged),
            fp=len(honest & flagged),
            fn=len(mal - flagged),
            tn=len(honest - flagged),
            discarded=tuple(sorted(discarded)),
            malicious=tuple(sorted(malicious)),
            trust=tuple(trust_map[i] for i in self.devices),
            participating=tuple(survivors),
            rejected=rejected,
            aggregated=aggregated,
            aggregator_alive=alive,
            n_points=info["n_points"],
            n_local_clusters=info["n_local_clusters"],
            n_global_clusters=info["n_global_clusters"],
            shared_numbers=info["shared_numbers"],
            denied=denied,
        )
        log.info("round=%d accuracy=%.4f delay=%.3f discarded=%s", r, acc, delay, metrics.discarded)
        state.round += 1
        return state, metrics


def run_scenario(cfg: ScenarioConfig, threads: int | None = None) -> ScenarioResult:
    sim = Simulation(cfg, threads)
    try:
        state = sim.init_state()
        metrics = []
        for _ in range(cfg.rounds):
            state, m = sim.run_round(state)
            metrics.append(m)
    finally:
        sim.close()
    metadata = {
        "version": __version__,
        "config": cfg.to_dict(),
        "resolved": {
            "n_train": len(sim.train),
            "n_test": len(sim.test),
            "n_features": sim.shape.n_features,
            "n_classes": sim.shape.n_classes,
            "param_dim": sim.shape.dim,
            "shard_sizes": [len(s) for s in sim.shards],
            "max_update_norm": sim.policy.max_update_norm,
            "warmup_median_norm": sim.warmup_median_norm,
            "malicious_ids": list(cfg.malicious_ids),
            "score_normalizer": "mean_icd" if cfg.anomaly.score_normalizer is None else cfg.anomaly.score_normalizer,
            "trust_for_weighting": "post_update",
            "transport": cfg.anomaly.sharing,
            "trust_threshold": cfg.trust.tau,
            "miner_schedule": "round mod n_miners",
            "context_fields": list(CONTEXT_FIELDS),
        },
        "summary": {
            "final_accuracy": metrics[-1].accuracy,
            "mean_delay_s": float(np.mean([m.delay_s for m in metrics])),
            "oscillation": oscillation([m.accuracy for m in metrics]),
            "degenerate_rounds": sum(m.degenerate for m in metrics),
            "ledger_blocks": len(state.ledger),
            "ledger_valid": state.ledger.validate() is None,
        },
        "rounds": [
            {
                "round": m.round,
                "malicious": list(m.malicious),
                "participating": list(m.participating),
                "rejected": {str(k): v for k, v in sorted(m.rejected.items())},
                "aggregated": list(m.aggregated),
                "denied": list(m.denied),
                "aggregator_alive": m.aggregator_alive,
                "n_points": m.n_points,
                "n_local_clusters": m.n_local_clusters,
                "n_global_clusters": m.n_global_clusters,
                "shared_numbers": m.shared_numbers,
            }
            for m in metrics
        ],
    }
    return ScenarioResult(metrics, state.ledger, metadata)


def csv_header(n_devices: int) -> list:
    return list(CSV_FIXED_COLUMNS) + [f"trust_{i}" for i in range(n_devices)]
