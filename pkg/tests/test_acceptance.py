"""Acceptance experiments. Each test appends one PASS/FAIL line to the session summary."""
import functools
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from ztrust.aggregation import RobustParams, aggregate_fedavg, aggregate_robust, screen_anomalies
from ztrust.cli import write_metrics_csv
from ztrust.clustering import build_clusters, merge_clusters
from ztrust.config import ScenarioConfig
from ztrust.ledger import Ledger, UpdateRecord, validate_chain
from ztrust.model import ModelShape, gradient, loss
from ztrust.sim import detection_rate, false_positive_rate, oscillation, run_scenario
from ztrust.trust import TrustParams, TrustRecord, update_trust

SEEDS = range(10)
ROUNDS = 30
ATTACK = {"attack.selection": "fixed", "attack.malicious_fraction": 0.1}

pytestmark = pytest.mark.slow


def report(number, name, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})")


def base(topology="bfl_robust", seed=0, **changes):
    return ScenarioConfig(topology, n_devices=20, rounds=ROUNDS, n_miners=2, master_seed=seed).replace(**changes)


@functools.lru_cache(maxsize=None)
def runs(kind):
    """Final accuracies and oscillations for one scenario family over all seeds."""
    cfgs = {
        "clean": lambda s: base(seed=s),
        "robust_attack": lambda s: base(seed=s, **ATTACK),
        "plain_attack": lambda s: base("bfl_plain", seed=s, **ATTACK),
        "central_fail": lambda s: base("centralized_fedavg", seed=s, **{"failure.server_failure_round": ROUNDS // 3}),
    }
    return [run_scenario(cfgs[kind](s)).accuracies for s in SEEDS]


def test_criterion_1_poisoning_resilience():
    clean = np.mean([a[-1] for a in runs("clean")])
    robust = np.mean([a[-1] for a in runs("robust_attack")])
    plain = np.mean([a[-1] for a in runs("plain_attack")])
    ok = robust >= clean - 0.05 and plain <= clean - 0.10
    report(1, "poisoning resilience", ok, f"clean={clean:.4f} robust={robust:.4f} plain={plain:.4f}")
    assert robust >= clean - 0.05
    assert plain <= clean - 0.10


def test_criterion_2_server_failure():
    fail_round = ROUNDS // 3
    central = runs("central_fail")
    robust = np.mean([a[-1] for a in runs("clean")])
    cen = np.mean([a[-1] for a in central])
    frozen = all(np.all(a[fail_round:] == a[fail_round - 1]) for a in central)
    ok = robust - cen >= 0.10 and frozen
    report(2, "server failure", ok, f"robust={robust:.4f} centralized={cen:.4f} gap={robust - cen:.4f} frozen={frozen}")
    assert frozen
    assert robust - cen >= 0.10


def test_criterion_3_oscillation():
    rob = np.mean([oscillation(a) for a in runs("robust_attack")])
    plain = np.mean([oscillation(a) for a in runs("plain_attack")])
    ok = rob <= 2 * plain
    report(3, "oscillation", ok, f"robust={rob:.5f} plain={plain:.5f} ratio={rob / plain:.3f}")
    assert ok


def test_criterion_4_delay_tradeoff():
    cfg = ScenarioConfig("bfl_robust", n_devices=100, rounds=20, n_miners=2)
    rob, plain = run_scenario(cfg), run_scenario(cfg.replace(topology="bfl_plain"))
    gap = float(np.mean(rob.delays) - np.mean(plain.delays))
    small = ScenarioConfig("bfl_robust", n_devices=5, rounds=5, master_seed=3).replace(**{"data.n_samples": 500})
    small_gap = run_scenario(small).delays - run_scenario(small.replace(topology="bfl_plain")).delays
    ok = 1.5 <= gap <= 2.5 and np.all(small_gap >= 0) and np.all(rob.delays >= plain.delays)
    report(4, "delay trade-off", ok, f"gap@100={gap:.4f}s min_round_gap@5={small_gap.min():.4f}s")
    assert 1.5 <= gap <= 2.5
    assert np.all(small_gap >= 0) and np.all(rob.delays >= plain.delays)


def test_criterion_5_detection_trend():
    metrics = []
    for s in SEEDS:
        cfg = ScenarioConfig("bfl_robust", n_devices=10, rounds=20, master_seed=s).replace(
            **{"attack.selection": "random", "attack.min_k": 1, "attack.max_k": 3}
        )
        metrics.append(run_scenario(cfg).metrics)
    rate = detection_rate(metrics)
    fp = false_positive_rate(metrics)
    ok = rate[1] >= rate[2] >= rate[3] - 0.05 and fp <= 0.10
    report(5, "detection trend", ok, f"rate={ {k: round(v, 4) for k, v in rate.items()} } fp={fp:.4f}")
    assert rate[1] >= rate[2] >= rate[3] - 0.05
    assert fp <= 0.10


# oracle suite


def _sort_median(arr):
    s = np.sort(arr, axis=0)
    n = len(s)
    return s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2


def _median_oracle(rng):
    for _ in range(1000):
        arr = rng.normal(size=(int(rng.integers(1, 12)), int(rng.integers(1, 6)))) * 10 ** rng.uniform(-3, 3)
        ups = {i: v for i, v in enumerate(arr)}
        res = aggregate_robust(ups, {i: 1.0 for i in ups}, RobustParams(epsilon_mode="absolute", epsilon=np.inf, trust_weighted=False))
        if not np.array_equal(res.update, _sort_median(arr)):
            return False
    return True


def _screen_oracle(rng):
    for _ in range(1000):
        arr = rng.normal(size=(int(rng.integers(2, 12)), int(rng.integers(1, 5))))
        if rng.uniform() < 0.3:
            arr[0] *= 50
        if rng.uniform() < 0.1:
            arr[:] = arr[0]
        dist, flags = screen_anomalies(list(arr), RobustParams(theta=3.0))
        med = _sort_median(arr)
        d = np.array([np.sqrt(sum((x - m) ** 2 for x, m in zip(row, med))) for row in arr])
        dm = _sort_median(d)
        mad = 1.4826 * _sort_median(np.abs(d - dm))
        expect = d > dm + 3.0 * mad if mad > 0 else d > dm * (1 + 1e-9)
        if not (np.allclose(dist, d, rtol=1e-12, atol=1e-15) and np.array_equal(flags, expect)):
            return False
    return True


def _merge_counts(rng):
    for _ in range(1000):
        groups = [rng.normal(size=(int(rng.integers(1, 20)), 3)) * rng.uniform(0.1, 3) for _ in range(int(rng.integers(1, 6)))]
        width = rng.uniform(0.2, 2.0)
        if merge_clusters([build_clusters(g, width) for g in groups]).total_count != sum(len(g) for g in groups):
            return False
    return True


def _gradient_fd(rng):
    worst = 0.0
    for _ in range(200):
        f, c, n = int(rng.integers(1, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 10))
        shape = ModelShape(f, c)
        p, x, y = rng.normal(size=shape.dim), rng.normal(size=(n, f)), rng.integers(0, c, n)
        g = gradient(p, shape, x, y)
        h = 1e-5
        fd = np.array([(loss(p + h * e, shape, x, y) - loss(p - h * e, shape, x, y)) / (2 * h) for e in np.eye(shape.dim)])
        worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6))))
    return worst <= 1e-4


def _flip_int(v, bit):
    u = (v & (2**64 - 1)) ^ (1 << bit)
    return u - 2**64 if u >= 2**63 else u


def _flip_float(v, bit):
    return float(np.array([v]).view(np.uint64).__xor__(np.uint64(1 << bit)).view(np.float64)[0])


def _flip_bytes(b, bit):
    arr = bytearray(b)
    arr[bit // 8] ^= 1 << (bit % 8)
    return bytes(arr)


def _tamper(rng):
    detected = 0
    for trial in range(1000):
        led = Ledger(2)
        for r in range(5):
            recs = [UpdateRecord.create(d, r, rng.normal(size=4), float(r + 0.1 * d)) for d in range(3)]
            led.mine_block(recs, r, trust_snapshot={d: float(rng.uniform()) for d in range(3)})
        k = int(rng.integers(0, len(led)))
        blk = led.blocks[k]
        fields = ["index", "prev_hash", "round", "miner_id", "block_hash"]
        if blk.records:
            fields += ["rec.device_id", "rec.round", "rec.submitted_at", "rec.digest", "rec.update", "trust"]
        field = fields[int(rng.integers(len(fields)))]
        if field in ("index", "round", "miner_id"):
            setattr(blk, field, _flip_int(getattr(blk, field), int(rng.integers(64))))
        elif field in ("prev_hash", "block_hash"):
            setattr(blk, field, _flip_bytes(getattr(blk, field), int(rng.integers(256))))
        elif field == "trust":
            dev = int(rng.integers(3))
            blk.trust_snapshot[dev] = _flip_float(blk.trust_snapshot[dev], int(rng.integers(64)))
        else:
            rec = blk.records[int(rng.integers(len(blk.records)))]
            if field == "rec.device_id":
                rec.device_id = _flip_int(rec.device_id, int(rng.integers(64)))
            elif field == "rec.round":
                rec.round = _flip_int(rec.round, int(rng.integers(64)))
            elif field == "rec.submitted_at":
                rec.submitted_at = _flip_float(rec.submitted_at, int(rng.integers(64)))
            elif field == "rec.digest":
                rec.update_digest = _flip_bytes(rec.update_digest, int(rng.integers(256)))
            else:
                u = rec.update.copy()
                j = int(rng.integers(len(u)))
                u[j] = _flip_float(u[j], int(rng.integers(64)))
                rec.update = u
        bad = validate_chain(led)
        detected += bad is not None and bad <= k
    return detected == 1000


def _trust_bounds(rng):
    alphas = rng.uniform(1e-3, 1.0, 100_000)
    t0 = rng.uniform(0, 1, 100_000)
    seqs = rng.uniform(0, 1, (100_000, 8))
    seqs[rng.uniform(size=seqs.shape) < 0.2] = 1.0
    seqs[rng.uniform(size=seqs.shape) < 0.2] = 0.0
    for alpha, t, seq in zip(alphas, t0, seqs):
        p = TrustParams(alpha=float(alpha))
        rec = TrustRecord(0, float(t))
        for a in seq:
            rec = update_trust(rec, float(a), p)
            if not 0.0 <= rec.trust <= 1.0:
                return False
    return True


def _robust_equals_fedavg(rng):
    for _ in range(1000):
        n, dim = int(rng.integers(1, 15)), int(rng.integers(1, 8))
        arr = rng.normal(size=(n, dim)) * 10 ** rng.uniform(-4, 2)
        sizes = rng.integers(1, 100, n)
        t = float(rng.uniform(0.3, 1.0))
        res = aggregate_robust({i: arr[i] for i in range(n)}, {i: t for i in range(n)},
                               RobustParams(epsilon_mode="absolute", epsilon=np.inf, trust_threshold=0.0),
                               {i: int(sizes[i]) for i in range(n)})
        if res.flagged or not np.array_equal(res.update, aggregate_fedavg(list(arr), sizes)):
            return False
    return True


def test_criterion_6_oracle_suite():
    rng = np.random.default_rng(20240601)
    checks = {
        "median_vs_sort": _median_oracle,
        "screen_vs_bruteforce": _screen_oracle,
        "merge_conserves_counts": _merge_counts,
        "gradient_vs_fd": _gradient_fd,
        "tamper_detection_1000": _tamper,
        "trust_bounds_1e5": _trust_bounds,
        "robust_eq_fedavg": _robust_equals_fedavg,
    }
    results = {}
    for name, fn in checks.items():
        t = time.perf_counter()
        results[name] = fn(rng)
        results[name + "_s"] = round(time.perf_counter() - t, 1)
    failed = [k for k in checks if not results[k]]
    report(6, "oracle equivalences", not failed, f"{len(checks) - len(failed)}/{len(checks)} checks; failed={failed}")
    assert not failed, results


def _csv_bytes(cfg, threads, path):
    write_metrics_csv(run_scenario(cfg, threads=threads), path, cfg.n_devices)
    return path.read_bytes()


def test_criterion_7_determinism(tmp_path):
    configs = {
        "robust_attack": base(seed=4, **ATTACK),
        "central_fail": base("centralized_fedavg", seed=4, **{"failure.server_failure_round": ROUNDS // 3}),
        "random_attackers": ScenarioConfig("bfl_robust", n_devices=10, rounds=20, master_seed=4).replace(
            **{"attack.selection": "random", "attack.min_k": 1, "attack.max_k": 3}
        ),
    }
    same = True
    for name, cfg in configs.items():
        blobs = [_csv_bytes(cfg, w, tmp_path / f"{name}-{w}-{rep}.csv") for w in (1, 8) for rep in range(2)]
        same &= len(set(blobs)) == 1
    report(7, "determinism", same, f"{len(configs)} configs x workers (1, 8) x 2 repeats byte-identical={same}")
    assert same
