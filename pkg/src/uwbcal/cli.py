"""Command-line front end: ``uwbcal <command> ...``.

Commands mirror the pipeline stages::

    uwbcal simulate          --config cfg.txt --out train.csv
    uwbcal calibrate-delays  --dataset train.csv --out delays.csv [--loss cauchy|l2]
    uwbcal calibrate-power   --dataset train.csv --delays delays.csv --out power.csv
    uwbcal apply             --dataset test.csv --delays delays.csv --calibration power.csv --out corrected.csv
    uwbcal localize          --config cfg.txt --delays delays.csv --calibration power.csv --out rmse.csv
    uwbcal report            FILE [FILE ...]

Every failure class exits with its own status (see :mod:`uwbcal.errors`).
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import delaycal, pipeline, powercal
from .config import PipelineConfig, load_config
from .dataset import parse_dataset, serialize_dataset
from .errors import FormatError, IoError, UwbCalError, VersionMismatch
from .gating import GateConfig

log = logging.getLogger("uwbcal")

_SUPPORTED = {
    "dataset": 1,
    "delays": 1,
    "powercal": 1,
    "tracks": 1,
    "rmse": pipeline.REPORT_VERSION,
    "biasstats": pipeline.REPORT_VERSION,
    "histogram": pipeline.REPORT_VERSION,
    "powercurves": pipeline.REPORT_VERSION,
    "corrected": pipeline.REPORT_VERSION,
}
_HEADER = re.compile(r"^# uwbcal-([a-z]+) v(\d+)\s*$")


def _read(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _write(path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _config(path: Optional[str], gate_confidence: Optional[float] = None) -> PipelineConfig:
    cfg = load_config(path) if path else PipelineConfig()
    if gate_confidence is not None:
        cfg = replace(cfg, evaluation=replace(cfg.evaluation, gate_confidence=gate_confidence))
        GateConfig(gate_confidence)  # validate early
    return cfg


def _dataset(path):
    return parse_dataset(_read(path))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    seed = args.seed if args.seed is not None else cfg.require_seed()
    world, ds = pipeline.simulate(cfg, seed)
    _write(args.out, serialize_dataset(ds))
    if args.tracks:
        t = np.arange(0.0, cfg.simulation.duration_s + args.track_step, args.track_step)
        tracks = delaycal.TagTracks({tag.tag_id: (t, world.tag_position(tag.tag_id, t)) for tag in world.tags})
        _write(args.tracks, tracks.serialize())
    print(f"transactions {len(ds)} dropped {ds.dropped}")
    return 0


def cmd_calibrate_delays(args) -> int:
    cfg = _config(args.config)
    ds = _dataset(args.dataset)
    if args.tracks:
        tracks = delaycal.TagTracks.parse(_read(args.tracks))
        truth = delaycal.truth_ranges_from_tracks(ds, tracks)
        ds = ds.with_columns(truth_range=truth, truth_tof=truth / powercal.SPEED_OF_LIGHT)
    sol = pipeline.calibrate_delays(ds, cfg, args.loss)
    _write(args.out, delaycal.serialize_delays(sol))
    width = cfg.calibration.histogram_bin_ns
    if args.histogram:
        _write(args.histogram, pipeline.histogram_csv(ds, sol, width))
    report = delaycal.diagnostics_report(sol)
    post = delaycal.build_problem(ds).residuals(sol.delays)
    report += f"residual_mode_bin_ns: {delaycal.mode_bin(post, width):.6f}\n"
    if args.report:
        _write(args.report, report)
    print(report, end="")
    return 0


def cmd_calibrate_power(args) -> int:
    cfg = _config(args.config)
    ds = _dataset(args.dataset)
    delays = delaycal.parse_delays(_read(args.delays))
    cal = pipeline.calibrate_power(ds, delays, cfg)
    _write(args.out, powercal.serialize_calibration(cal))
    if args.curves:
        _write(args.curves, pipeline.power_curves_csv(ds, delays, cal, cfg))
    grid = np.geomspace(*cal.domain, 200)
    b, s = cal.bias(grid), cal.std(grid)
    print(f"domain {cal.domain[0]:.6g} {cal.domain[1]:.6g}")
    print(f"bias_m min {b.min():.6g} max {b.max():.6g}")
    print(f"std_m min {s.min():.6g} at {grid[s.argmin()]:.6g} max {s.max():.6g} at {grid[s.argmax()]:.6g}")
    return 0


def cmd_apply(args) -> int:
    cfg = _config(args.config, args.gate_confidence)
    ds = _dataset(args.dataset)
    delays = delaycal.parse_delays(_read(args.delays))
    cal = powercal.parse_calibration(_read(args.calibration))
    _write(args.out, pipeline.corrected_csv(ds, delays, cal))
    if not np.any(np.isnan(ds.truth_range)):
        stats = pipeline.bias_stats(ds, delays, cal, cfg.evaluation.fixed_sigma_m, cfg.ekf_config().gate)
        text = pipeline.bias_stats_csv(stats)
        if args.report:
            _write(args.report, text)
        print(text, end="")
    return 0


def cmd_localize(args) -> int:
    cfg = _config(args.config, args.gate_confidence)
    delays = delaycal.parse_delays(_read(args.delays))
    cal = powercal.parse_calibration(_read(args.calibration))
    datasets = [_dataset(p) for p in args.datasets] if args.datasets else None
    rows, results = pipeline.localize(cfg, delays, cal, datasets)
    _write(args.out, pipeline.rmse_csv(rows))
    if args.trajectories:
        out_dir = Path(args.trajectories)
        out_dir.mkdir(parents=True, exist_ok=True)
        for (seed, robot, mode), res in results.items():
            lines = ["t_s,x_m,y_m,z_m,true_x_m,true_y_m,true_z_m,accepted"]
            for t, p, q, a in zip(res.trace.times, res.trace.positions, res.truth, res.trace.accepted):
                lines.append("%.12g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%d" % (t, *p, *q, a))
            _write(out_dir / f"traj_s{seed}_r{robot}_{mode}.csv", "\n".join(lines) + "\n")
    for mode, value in pipeline.rmse_summary(rows).items():
        print(f"{mode} mean_rmse_m {value:.6f}")
    return 0


def _summarise(path: str, kind: str, text: str) -> list[tuple[str, str]]:
    if kind == "dataset":
        ds = parse_dataset(text)
        return [("transactions", str(len(ds))), ("tags", " ".join(map(str, ds.tag_ids)))]
    if kind == "delays":
        return [(f"delay_ns[{t}]", "%.6f" % d) for t, d in delaycal.parse_delays(text).items()]
    if kind == "powercal":
        cal = powercal.parse_calibration(text)
        grid = np.geomspace(*cal.domain, 200)
        return [
            ("domain", "%.6g..%.6g" % cal.domain),
            ("bias_range_m", "%.6g..%.6g" % (cal.bias(grid).min(), cal.bias(grid).max())),
            ("std_range_m", "%.6g..%.6g" % (cal.std(grid).min(), cal.std(grid).max())),
        ]
    if kind == "rmse":
        summary = pipeline.rmse_summary(pipeline.parse_rmse(text))
        out = [(f"mean_rmse_m[{m}]", "%.6f" % v) for m, v in summary.items()]
        if "raw" in summary:
            for m, v in summary.items():
                if m != "raw":
                    out.append((f"reduction_vs_raw[{m}]", "%.1f%%" % (100.0 * (1.0 - v / summary["raw"]))))
        return out
    rows = [ln for ln in text.splitlines()[2:] if ln]
    return [("rows", str(len(rows)))]


def cmd_report(args) -> int:
    found = []
    for path in args.artifacts:
        text = _read(path)
        first = text.split("\n", 1)[0]
        m = _HEADER.match(first)
        if not m:
            raise FormatError(f"{path}: not a uwbcal artifact")
        kind, version = m.group(1), int(m.group(2))
        if kind not in _SUPPORTED:
            raise FormatError(f"{path}: unknown artifact kind {kind!r}")
        found.append((path, kind, version, text))
    versions = {v for _, _, v, _ in found}
    if len(versions) > 1:
        raise VersionMismatch(f"artifacts mix format versions {sorted(versions)}")
    for path, kind, version, _ in found:
        if version != _SUPPORTED[kind]:
            raise VersionMismatch(f"{path}: {kind} v{version} unsupported (expected v{_SUPPORTED[kind]})")
    lines = ["# uwbcal-summary v1", "artifact,kind,key,value"]
    for path, kind, _, text in found:
        print(f"[{kind}] {path}")
        for key, value in _summarise(path, kind, text):
            print(f"  {key}: {value}")
            lines.append(f"{path},{kind},{key},{value}")
    if args.out:
        _write(args.out, "\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uwbcal", description="UWB DS-TWR calibration toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a ranging dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override simulation.seed")
    p.add_argument("--tracks", help="also write tag position tracks")
    p.add_argument("--track-step", type=float, default=0.01, help="track sample step (s)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate-delays", help="estimate antenna delays")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss", choices=("cauchy", "l2"))
    p.add_argument("--config")
    p.add_argument("--tracks", help="truth from tag tracks instead of dataset columns")
    p.add_argument("--histogram", help="binned residual histogram CSV")
    p.add_argument("--report", help="diagnostics text file")
    p.set_defaults(func=cmd_calibrate_delays)

    p = sub.add_parser("calibrate-power", help="fit bias and std curves over lifted FPP")
    p.add_argument("--dataset", required=True)
    p.add_argument("--delays", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--curves", help="pooled and per-pair curve table CSV")
    p.set_defaults(func=cmd_calibrate_power)

    p = sub.add_parser("apply", help="correct ranges and report bias statistics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--delays", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--report", help="bias statistics CSV")
    p.add_argument("--gate-confidence", type=float, help="chi-squared gate confidence (overrides the config)")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("localize", help="run the EKF scenario matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--delays", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--datasets", nargs="*", help="test datasets, one per evaluation.test_seeds entry")
    p.add_argument("--trajectories", help="directory for per-step trajectory CSVs")
    p.add_argument("--gate-confidence", type=float, help="NIS gate confidence (overrides the config)")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("report", help="summarise pipeline artifacts")
    p.add_argument("artifacts", nargs="+")
    p.add_argument("--out", help="summary CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UwbCalError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
