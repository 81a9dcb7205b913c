"""Command-line front end.

Exit codes: 0 success, 1 ledger invalid, 2 configuration error, 3 I/O or
encoding error. Summaries go to stdout as ``key=value`` lines.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ScenarioConfig, dump_toml, load_config
from .data import gen_synthetic, write_idx
from .errors import ConfigError, FormatError
from .ledger import Ledger
from .sim import ScenarioResult, csv_header, oscillation, run_scenario

EXIT_OK, EXIT_INVALID, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("ztrust")


class _Out:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def __call__(self, **pairs):
        if not self.quiet:
            for k, v in pairs.items():
                print(f"{k}={_fmt(v)}")


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(result: ScenarioResult, path, n_devices: int):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(n_devices))
        for m in result.metrics:
            w.writerow(m.csv_row())


def write_run(result: ScenarioResult, cfg: ScenarioConfig, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": out_dir / "metrics.csv",
        "ledger": out_dir / "ledger.export",
        "metadata": out_dir / "metadata.json",
    }
    write_metrics_csv(result, paths["metrics"], cfg.n_devices)
    result.ledger.export(paths["ledger"])
    paths["metadata"].write_text(json.dumps(result.metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def _load(path, seed):
    cfg = load_config(path)
    if seed is not None:
        cfg = cfg.replace(master_seed=seed)
    return cfg


def cmd_run(args, out: _Out) -> int:
    cfg = _load(args.config[0], args.seed)
    result = run_scenario(cfg)
    paths = write_run(result, cfg, Path(args.out))
    if args.figures:
        from .report import render_run

        render_run(result, Path(args.out) / "figures", cfg.topology)
    s = result.metadata["summary"]
    out(topology=cfg.topology, rounds=cfg.rounds, final_accuracy=s["final_accuracy"], mean_delay_s=s["mean_delay_s"],
        oscillation=s["oscillation"], degenerate_rounds=s["degenerate_rounds"], ledger_blocks=s["ledger_blocks"],
        ledger_valid=s["ledger_valid"], **{k: str(p) for k, p in paths.items()})
    return EXIT_OK


def cmd_compare(args, out: _Out) -> int:
    if len(args.config) != 2:
        raise ConfigError("--config", "compare needs exactly two configs")
    cfg_a, cfg_b = (_load(p, args.seed) for p in args.config)
    if cfg_a.rounds != cfg_b.rounds:
        raise ConfigError("rounds", f"configs disagree ({cfg_a.rounds} vs {cfg_b.rounds})")
    root = Path(args.out)
    res_a, res_b = run_scenario(cfg_a), run_scenario(cfg_b)
    write_run(res_a, cfg_a, root / "a")
    write_run(res_b, cfg_b, root / "b")
    with open(root / "compare.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "accuracy_a", "accuracy_b", "delay_s_a", "delay_s_b", "degenerate_a", "degenerate_b"])
        for ma, mb in zip(res_a.metrics, res_b.metrics):
            w.writerow([ma.round, repr(ma.accuracy), repr(mb.accuracy), repr(ma.delay_s), repr(mb.delay_s),
                        int(ma.degenerate), int(mb.degenerate)])
    gaps = {
        "final_accuracy_gap": float(res_a.accuracies[-1] - res_b.accuracies[-1]),
        "mean_delay_gap": float(np.mean(res_a.delays) - np.mean(res_b.delays)),
        "oscillation_gap": oscillation(res_a.accuracies) - oscillation(res_b.accuracies),
    }
    summary = {"topology_a": cfg_a.topology, "topology_b": cfg_b.topology, **gaps}
    (root / "summary.txt").write_text("".join(f"{k}={_fmt(v)}\n" for k, v in summary.items()), encoding="utf-8")
    if args.figures:
        from .report import render_comparison

        labels = (f"A: {cfg_a.topology}", f"B: {cfg_b.topology}")
        render_comparison({labels[0]: res_a, labels[1]: res_b}, root / "figures")
    out(**summary)
    return EXIT_OK


def cmd_validate(args, out: _Out) -> int:
    ledger = Ledger.load(args.path)
    bad = ledger.validate()
    if bad is None:
        out(valid=True, blocks=len(ledger))
        return EXIT_OK
    out(valid=False, first_bad_index=bad, blocks=len(ledger))
    if out.quiet:
        print(f"first_bad_index={bad}", file=sys.stderr)
    return EXIT_INVALID


def cmd_gen_data(args, out: _Out) -> int:
    """Write the synthetic dataset as an IDX pair (features quantised to bytes) plus a config using it."""
    cfg = _load(args.config[0], args.seed) if args.config else ScenarioConfig("bfl_robust", 20, 30, master_seed=args.seed or 0)
    d = cfg.data
    ds = gen_synthetic(d.n_samples, d.n_features, d.n_classes, d.class_separation, cfg.master_seed)
    lo, hi = ds.features.min(), ds.features.max()
    pixels = np.round((ds.features - lo) / (hi - lo) * 255).astype(np.uint8).reshape(len(ds), 1, d.n_features)
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    write_idx(pixels, ds.labels, root / "images.idx3-ubyte", root / "labels.idx1-ubyte")
    idx_cfg = cfg.replace(**{"data.source": "idx", "data.images_path": "images.idx3-ubyte", "data.labels_path": "labels.idx1-ubyte"})
    (root / "scenario.toml").write_text(dump_toml(idx_cfg), encoding="utf-8")
    out(samples=len(ds), images=str(root / "images.idx3-ubyte"), labels=str(root / "labels.idx1-ubyte"),
        config=str(root / "scenario.toml"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ztrust", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_config=True):
        sp.add_argument("--config", action="append", default=[], required=need_config, help="scenario TOML file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override master_seed")
        sp.add_argument("--quiet", action="store_true")
        sp.add_argument("-v", "--verbose", action="count", default=0)

    sp = sub.add_parser("run", help="run one scenario")
    common(sp)
    sp.add_argument("--figures", action="store_true", help="also render PNG figures")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("compare", help="run two scenarios and report the gaps (A minus B)")
    common(sp)
    sp.add_argument("--figures", action="store_true", help="also render PNG figures")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("validate-ledger", help="check a ledger export")
    sp.add_argument("path")
    sp.add_argument("--quiet", action="store_true")
    sp.add_argument("-v", "--verbose", action="count", default=0)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("gen-data", help="write the synthetic dataset as IDX files")
    common(sp, need_config=False)
    sp.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = _Out(args.quiet)
    try:
        return args.func(args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError, UnicodeDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
