"""In-process composition of the calibration pipeline and its report files.

Each stage takes and returns the same values the command-line tools write to
disk. Datasets are canonicalised (passed through the CSV format) so a run via
files and a run in memory agree bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import delaycal, ekf, powercal, sim
from .config import PipelineConfig
from .dataset import Dataset, read_version, serialize_dataset
from .errors import FormatError, VersionMismatch
from .gating import GateConfig, chi2_test
from .twr import ds_twr_tof

RMSE_MAGIC = "# uwbcal-rmse"
STATS_MAGIC = "# uwbcal-biasstats"
HIST_MAGIC = "# uwbcal-histogram"
CURVES_MAGIC = "# uwbcal-powercurves"
CORRECTED_MAGIC = "# uwbcal-corrected"
REPORT_VERSION = 1


def simulate(cfg: PipelineConfig, seed: Optional[int] = None) -> tuple[sim.World, Dataset]:
    """World and canonical dataset for ``seed`` (default: the config seed)."""
    seed = cfg.require_seed() if seed is None else seed
    world = cfg.world(seed)
    s = cfg.simulation
    ds = sim.run_schedule(world, s.rate_hz, s.duration_s, seed)
    dropped = ds.dropped
    ds = ds.canonical()
    ds.dropped = dropped
    return world, ds


def calibrate_delays(ds: Dataset, cfg: PipelineConfig, loss: Optional[str] = None) -> delaycal.DelaySolution:
    c = cfg.calibration
    problem = delaycal.build_problem(ds)
    return delaycal.solve(problem, loss or c.loss, tol=c.tol_ns, max_iter=c.max_iter, bin_width=c.histogram_bin_ns)


def calibrate_power(ds: Dataset, delays: dict[int, float], cfg: PipelineConfig) -> powercal.PowerCalibration:
    pcfg = cfg.power_config()
    return powercal.fit(powercal.bias_samples(ds, delays, pcfg.alpha), pcfg)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _g(v) -> str:
    return "%.12g" % v


def histogram_csv(ds: Dataset, sol: delaycal.DelaySolution, width: float) -> str:
    """Residual histograms before (zero delays) and after calibration, ns."""
    problem = delaycal.build_problem(ds)
    pre = problem.residuals(np.zeros(problem.n))
    post = problem.residuals(sol.delays)
    k_pre = np.floor(pre / width + 0.5).astype(np.int64)
    k_post = np.floor(post / width + 0.5).astype(np.int64)
    lo, hi = min(k_pre.min(), k_post.min()), max(k_pre.max(), k_post.max())
    c_pre = np.bincount(k_pre - lo, minlength=hi - lo + 1)
    c_post = np.bincount(k_post - lo, minlength=hi - lo + 1)
    lines = [f"{HIST_MAGIC} v{REPORT_VERSION}", "bin_centre_ns,pre_count,post_count"]
    for k in range(hi - lo + 1):
        lines.append(f"{_g((k + lo) * width)},{c_pre[k]},{c_post[k]}")
    return "\n".join(lines) + "\n"


def power_curves_csv(ds: Dataset, delays: dict[int, float], cal: powercal.PowerCalibration,
                     cfg: PipelineConfig, n_grid: int = 50) -> str:
    """Pooled and per-pair bias/std curves on a common lifted-FPP grid."""
    per_pair = powercal.fit_per_pair(ds, delays, cfg.power_config())
    grid = np.geomspace(*cal.domain, n_grid)
    lines = [f"{CURVES_MAGIC} v{REPORT_VERSION}", "pair,lifted_fpp,bias_m,std_m"]
    for name, c in [("all", cal)] + [(f"{i}-{j}", c) for (i, j), c in per_pair.items()]:
        for x, b, s in zip(grid, c.bias(grid), c.std(grid)):
            lines.append(f"{name},{_g(x)},{_g(b)},{_g(s)}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class BiasStats:
    stage: str
    n: int
    mean: float
    mean_abs: float
    std: float
    rejected: float  # fraction failing the chi-squared gate


def corrected_ranges(ds: Dataset, delays: dict[int, float], cal: powercal.PowerCalibration):
    """Raw, delay-corrected and fully corrected ranges (m) plus sigma (m)."""
    c = sim.SPEED_OF_LIGHT
    raw = ds_twr_tof(ds.intervals) * c
    delay_only = delaycal.corrected_tof(ds, delays) * c
    full, sigma = powercal.apply(delay_only, ds.fpp2, ds.fpp4, cal)
    return raw, delay_only, full, sigma


def bias_stats(ds: Dataset, delays, cal, fixed_sigma: float = 0.2, gate: GateConfig = GateConfig()) -> list[BiasStats]:
    raw, delay_only, full, sigma = corrected_ranges(ds, delays, cal)
    truth = ds.truth_range
    out = []
    for stage, r, s in (("raw", raw, fixed_sigma), ("delay_only", delay_only, fixed_sigma), ("full", full, sigma)):
        b = r - truth
        ok = chi2_test(b, np.broadcast_to(s, b.shape), gate)
        out.append(BiasStats(stage, len(b), float(np.mean(b)), float(np.mean(np.abs(b))),
                             float(np.std(b, ddof=1)), float(1.0 - np.mean(ok))))
    return out


def bias_stats_csv(stats: Sequence[BiasStats]) -> str:
    lines = [f"{STATS_MAGIC} v{REPORT_VERSION}", "stage,n,mean_bias_m,mean_abs_bias_m,std_m,rejected_fraction"]
    for s in stats:
        lines.append(f"{s.stage},{s.n},{_g(s.mean)},{_g(s.mean_abs)},{_g(s.std)},{_g(s.rejected)}")
    return "\n".join(lines) + "\n"


def corrected_csv(ds: Dataset, delays, cal) -> str:
    raw, delay_only, full, sigma = corrected_ranges(ds, delays, cal)
    lines = [
        f"{CORRECTED_MAGIC} v{REPORT_VERSION}",
        "t_s,initiator,responder,raw_range_m,delay_corrected_m,corrected_range_m,sigma_m,truth_range_m",
    ]
    for k in range(len(ds)):
        truth = "" if np.isnan(ds.truth_range[k]) else _g(ds.truth_range[k])
        lines.append(
            f"{_g(ds.t_s[k])},{ds.initiator[k]},{ds.responder[k]},{_g(raw[k])},{_g(delay_only[k])},"
            f"{_g(full[k])},{_g(sigma[k])},{truth}"
        )
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RmseRow:
    scenario: int
    robot: int
    mode: str
    rmse: float


def localize(
    cfg: PipelineConfig,
    delays: dict[int, float],
    cal: powercal.PowerCalibration,
    datasets: Optional[Sequence[Dataset]] = None,
    modes: Sequence[str] = ekf.MODES,
) -> tuple[list[RmseRow], dict]:
    """Scenario matrix: every evaluation robot on every test dataset, every mode.

    ``datasets[k]`` must have been simulated with ``evaluation.test_seeds[k]``;
    when omitted they are simulated here. Returns the RMSE rows and the
    per-run :class:`ekf.LocalizationResult` keyed by ``(seed, robot, mode)``.
    """
    seeds = cfg.evaluation.test_seeds
    if datasets is None:
        datasets = [simulate(cfg, s)[1] for s in seeds]
    if len(datasets) != len(seeds):
        raise ValueError(f"{len(datasets)} datasets for {len(seeds)} test seeds")
    ecfg = cfg.ekf_config()
    rows, results = [], {}
    for seed, ds in zip(seeds, datasets):
        world = cfg.world(seed)
        for robot in cfg.evaluation.robots:
            for mode in modes:
                res = ekf.run(ds, world, robot, mode, delays, cal, ecfg, seed=seed)
                rows.append(RmseRow(seed, robot, mode, res.rmse))
                results[(seed, robot, mode)] = res
    return rows, results


def rmse_csv(rows: Sequence[RmseRow]) -> str:
    lines = [f"{RMSE_MAGIC} v{REPORT_VERSION}", "scenario,robot,mode,rmse_m"]
    lines += [f"{r.scenario},{r.robot},{r.mode},{_g(r.rmse)}" for r in rows]
    return "\n".join(lines) + "\n"


def parse_rmse(text: str) -> list[RmseRow]:
    lines = text.splitlines()
    if len(lines) < 2:
        raise FormatError("rmse file too short")
    if read_version(lines[0], RMSE_MAGIC) != REPORT_VERSION:
        raise VersionMismatch("unsupported rmse file version")
    rows = []
    for ln in lines[2:]:
        if ln:
            try:
                s, r, m, v = ln.split(",")
                rows.append(RmseRow(int(s), int(r), m, float(v)))
            except ValueError as exc:
                raise FormatError(f"bad rmse row {ln!r}") from exc
    return rows


def rmse_summary(rows: Sequence[RmseRow]) -> dict[str, float]:
    out = {}
    for mode in dict.fromkeys(r.mode for r in rows):
        out[mode] = float(np.mean([r.rmse for r in rows if r.mode == mode]))
    return out


def full_run(cfg: PipelineConfig) -> dict[str, str]:
    """Every file the command-line pipeline writes, keyed by a short name."""
    _, train = simulate(cfg)
    sol = calibrate_delays(train, cfg)
    delays = sol.as_dict()
    cal = calibrate_power(train, delays, cfg)
    rows, _ = localize(cfg, delays, cal)
    return {
        "dataset": serialize_dataset(train),
        "delays": delaycal.serialize_delays(sol),
        "calibration": powercal.serialize_calibration(cal),
        "rmse": rmse_csv(rows),
    }
