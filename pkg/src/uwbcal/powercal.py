"""Power-correlated range bias and spread as functions of lifted first-path power.

After antenna-delay correction the remaining range bias of a DS exchange is
modelled as ``f(lift(avg_fpp(p2, p4)))`` and its spread as
``sigma(lift(avg_fpp(p2, p4)))``. Both functions are penalised cubic splines
(:mod:`uwbcal.spline`) fitted to individual measurements; ``sigma`` is fitted
to sliding-window standard deviations of the residual about ``f``.

Calibration file layout (one value per row, ``%.17e``)::

    # uwbcal-powercal v1
    key,value
    alpha_dbm,-8.20000000000000000e+01
    domain_lo,...
    domain_hi,...
    bias.knot,...   (repeated)
    bias.coef,...   (repeated)
    std.knot,...
    std.coef,...
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import Dataset, read_version
from .delaycal import corrected_tof
from .gating import GateConfig, chi2_test
from .errors import DegenerateDomain, FormatError, InsufficientData, MissingTruth, VersionMismatch
from .sim import SPEED_OF_LIGHT, lift
from .spline import DEFAULT_LAMBDA_GRID, ClampedSpline, fit_smoothing_spline

__all__ = [
    "BiasSample",
    "PowerConfig",
    "PowerCalibration",
    "lift",
    "avg_fpp",
    "bias_samples",
    "fit_bias",
    "fit_std",
    "windowed_std",
    "fit",
    "fit_per_pair",
    "apply",
    "serialize_calibration",
    "parse_calibration",
]

CAL_MAGIC = "# uwbcal-powercal"
CAL_VERSION = 1


@dataclass(frozen=True)
class BiasSample:
    lifted_fpp: float
    bias: float  # m

    def __post_init__(self):
        if not self.lifted_fpp > 0:
            raise ValueError("lifted FPP must be positive")


@dataclass(frozen=True)
class PowerConfig:
    alpha: float = -82.0
    min_samples: int = 500
    window_count: int = 200
    window_stride: int = 50
    n_breaks: int = 15
    n_folds: int = 5
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID
    min_std: float = 1e-3  # m
    min_relative_spread: float = 0.1
    trim_confidence: Optional[float] = 0.999
    trim_iterations: int = 5


@dataclass(frozen=True)
class PowerCalibration:
    alpha: float
    bias_spline: ClampedSpline
    std_spline: ClampedSpline
    domain: tuple[float, float] = field(default=(0.0, 0.0))

    def bias(self, x):
        """Range bias (m) at lifted FPP ``x``, clamped to the domain."""
        return self.bias_spline(np.clip(x, *self.domain))

    def std(self, x):
        """Range standard deviation (m) at lifted FPP ``x``, clamped to the domain."""
        return self.std_spline(np.clip(x, *self.domain))

    def apply(self, raw_range, p2, p4):
        return apply(raw_range, p2, p4, self)


def avg_fpp(p2, p4):
    """Mean of the two reception powers in dBm; lifting happens afterwards."""
    return 0.5 * (np.asarray(p2, dtype=float) + np.asarray(p4, dtype=float))


def _as_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple) and len(samples) == 2:
        x, b = samples
        return np.asarray(x, dtype=float), np.asarray(b, dtype=float)
    samples = list(samples)
    return (
        np.array([s.lifted_fpp for s in samples], dtype=float),
        np.array([s.bias for s in samples], dtype=float),
    )


def bias_samples(dataset: Dataset, delays: dict[int, float], alpha: float = -82.0):
    """Lifted FPP and post-delay-correction range bias (m) per exchange.

    Returns:
        Tuple ``(x, bias)`` of arrays.

    Raises:
        MissingTruth: the dataset carries no ground-truth range.
    """
    if len(dataset) and np.any(np.isnan(dataset.truth_range)):
        raise MissingTruth("bias samples need ground-truth ranges")
    rng = corrected_tof(dataset, delays) * SPEED_OF_LIGHT
    x = lift(avg_fpp(dataset.fpp2, dataset.fpp4), alpha)
    return x, rng - dataset.truth_range


def _check(x: np.ndarray, cfg: PowerConfig) -> None:
    if len(x) < cfg.min_samples:
        raise InsufficientData(f"{len(x)} samples, need at least {cfg.min_samples}")
    q05, q50, q95 = np.quantile(x, [0.05, 0.5, 0.95])
    if q95 - q05 < cfg.min_relative_spread * q50:
        raise DegenerateDomain("lifted FPP spread too narrow to fit a curve")


def fit_bias(samples, cfg: PowerConfig = PowerConfig()) -> ClampedSpline:
    """Smoothing spline of range bias against lifted FPP.

    Raises:
        InsufficientData: fewer than ``cfg.min_samples`` samples.
        DegenerateDomain: the central 90% of lifted FPP spans less than
            ``cfg.min_relative_spread`` of its median.
    """
    x, b = _as_arrays(samples)
    _check(x, cfg)
    return fit_smoothing_spline(x, b, cfg.n_breaks, cfg.lambda_grid, cfg.n_folds).spline


def windowed_std(x, resid, window: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample std of ``resid`` in sliding windows over sorted ``x``.

    Returns window-median abscissae and standard deviations (ddof=1).
    """
    x = np.asarray(x, dtype=float)
    resid = np.asarray(resid, dtype=float)
    if window < 2 or stride < 1:
        raise ValueError("window must be >= 2 and stride >= 1")
    if len(x) < window:
        raise InsufficientData(f"window of {window} exceeds {len(x)} samples")
    order = np.argsort(x, kind="stable")
    xs, rs = x[order], resid[order]
    starts = np.arange(0, len(xs) - window + 1, stride)
    idx = starts[:, None] + np.arange(window)
    return np.median(xs[idx], axis=1), np.std(rs[idx], axis=1, ddof=1)


def fit_std(samples, bias_spline: ClampedSpline, cfg: PowerConfig = PowerConfig()) -> ClampedSpline:
    """Spline through windowed standard deviations of the bias residual.

    The spline coefficients are clipped at ``cfg.min_std`` so the curve is
    bounded below by that value everywhere.
    """
    x, b = _as_arrays(samples)
    if len(x) < cfg.min_samples:
        raise InsufficientData(f"{len(x)} samples, need at least {cfg.min_samples}")
    xm, s = windowed_std(x, b - bias_spline(x), cfg.window_count, cfg.window_stride)
    n_breaks = min(cfg.n_breaks, max(2, len(xm) // cfg.n_folds - 2))
    folds = min(cfg.n_folds, len(xm))
    try:
        fitted = fit_smoothing_spline(xm, s, n_breaks, cfg.lambda_grid, folds, min_coef=cfg.min_std)
    except InsufficientData:
        # too few windows for a spline: constant at the pooled value
        level = max(float(np.sqrt(np.mean(s**2))), cfg.min_std)
        lo, hi = float(x.min()), float(x.max())
        return ClampedSpline(np.r_[[lo] * 4, [hi] * 4], np.full(4, level), lo, hi)
    return fitted.spline


def fit(samples, cfg: PowerConfig = PowerConfig()) -> PowerCalibration:
    """Fit both the bias and the std curve.

    Multipath outliers inflate both curves, so unless ``cfg.trim_confidence``
    is None the fit is repeated on the samples that pass a chi-squared gate
    against the previous fit, until the accepted set stops changing or
    ``cfg.trim_iterations`` refits have been made.
    """
    x, b = _as_arrays(samples)
    keep = np.ones(len(x), dtype=bool)
    gate = GateConfig(cfg.trim_confidence) if cfg.trim_confidence is not None else None
    for _ in range(1 + (cfg.trim_iterations if gate else 0)):
        bias_sp = fit_bias((x[keep], b[keep]), cfg)
        std_sp = fit_std((x[keep], b[keep]), bias_sp, cfg)
        if gate is None:
            break
        accepted = chi2_test(b - bias_sp(x), std_sp(x), gate)
        if np.array_equal(accepted, keep):
            break
        keep = accepted
    return PowerCalibration(cfg.alpha, bias_sp, std_sp, (float(x.min()), float(x.max())))


def fit_per_pair(
    dataset: Dataset, delays: dict[int, float], cfg: PowerConfig = PowerConfig()
) -> dict[tuple[int, int], PowerCalibration]:
    """Separate calibrations for each unordered tag pair with enough samples."""
    x, b = bias_samples(dataset, delays, cfg.alpha)
    lo = np.minimum(dataset.initiator, dataset.responder)
    hi = np.maximum(dataset.initiator, dataset.responder)
    out = {}
    for i, j in sorted(set(zip(lo.tolist(), hi.tolist()))):
        m = (lo == i) & (hi == j)
        if m.sum() >= cfg.min_samples:
            out[(i, j)] = fit((x[m], b[m]), cfg)
    return out


def apply(raw_range, p2, p4, cal: PowerCalibration):
    """Bias-corrected range and its standard deviation, both in m."""
    x = lift(avg_fpp(p2, p4), cal.alpha)
    return np.asarray(raw_range, dtype=float) - cal.bias(x), cal.std(x)


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def _f(v: float) -> str:
    return "%.17e" % v


def serialize_calibration(cal: PowerCalibration) -> str:
    buf = io.StringIO()
    buf.write(f"{CAL_MAGIC} v{CAL_VERSION}\nkey,value\n")
    buf.write(f"alpha_dbm,{_f(cal.alpha)}\n")
    buf.write(f"domain_lo,{_f(cal.domain[0])}\ndomain_hi,{_f(cal.domain[1])}\n")
    for name, sp in (("bias", cal.bias_spline), ("std", cal.std_spline)):
        for v in sp.knots:
            buf.write(f"{name}.knot,{_f(v)}\n")
        for v in sp.coef:
            buf.write(f"{name}.coef,{_f(v)}\n")
    return buf.getvalue()


def parse_calibration(text: str) -> PowerCalibration:
    lines = text.splitlines()
    if len(lines) < 2:
        raise FormatError("calibration file too short")
    version = read_version(lines[0], CAL_MAGIC)
    if version != CAL_VERSION:
        raise VersionMismatch(f"calibration version {version}, expected {CAL_VERSION}")
    if lines[1].strip() != "key,value":
        raise FormatError("unexpected calibration header")
    scalars: dict[str, float] = {}
    lists: dict[str, list[float]] = {k: [] for k in ("bias.knot", "bias.coef", "std.knot", "std.coef")}
    for lineno, ln in enumerate(lines[2:], start=3):
        if not ln:
            continue
        key, _, val = ln.partition(",")
        try:
            v = float(val)
        except ValueError as exc:
            raise FormatError(f"line {lineno}: bad number {val!r}") from exc
        if key in lists:
            lists[key].append(v)
        elif key in ("alpha_dbm", "domain_lo", "domain_hi"):
            scalars[key] = v
        else:
            raise FormatError(f"line {lineno}: unknown key {key!r}")
    missing = {"alpha_dbm", "domain_lo", "domain_hi"} - scalars.keys()
    if missing:
        raise FormatError(f"missing keys: {sorted(missing)}")
    try:
        splines = [
            ClampedSpline(np.array(lists[f"{n}.knot"]), np.array(lists[f"{n}.coef"]),
                          lists[f"{n}.knot"][0], lists[f"{n}.knot"][-1])
            for n in ("bias", "std")
        ]
    except (ValueError, IndexError) as exc:
        raise FormatError(f"bad spline block: {exc}") from exc
    return PowerCalibration(scalars["alpha_dbm"], splines[0], splines[1],
                            (scalars["domain_lo"], scalars["domain_hi"]))


def write_calibration(cal: PowerCalibration, path) -> None:
    Path(path).write_text(serialize_calibration(cal), encoding="utf-8", newline="\n")


def read_calibration(path) -> PowerCalibration:
    return parse_calibration(Path(path).read_text(encoding="utf-8"))
