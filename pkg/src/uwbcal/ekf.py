"""Range-only extended Kalman filter for one robot's position.

The state is the focus robot's world-frame position. Its attitude and
velocity are known inputs, as are the positions of the neighbouring tags.
A range between own tag ``i`` and neighbour tag ``j`` is modelled as::

    y = || p + C^T r_i - a_j || + v,    v ~ N(0, sigma^2)

where ``C`` rotates world vectors into the body frame and ``r_i`` is the tag's
body-frame offset. Innovations are gated with a NIS test before the update.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import Dataset
from .delaycal import corrected_tof
from .errors import ConfigError, SingularGeometry
from .gating import GateConfig, nis_test
from .powercal import PowerCalibration, avg_fpp, lift
from .sim import SPEED_OF_LIGHT, SeedStreams, World
from .twr import ds_twr_tof

MODES = ("raw", "calibrated", "calibrated_with_variance")


@dataclass(frozen=True)
class EkfState:
    position: np.ndarray
    covariance: np.ndarray
    time: float = 0.0


@dataclass(frozen=True)
class RangeMeasurement:
    value: float  # m
    sigma: float  # m
    own_tag_offset: np.ndarray
    own_attitude: np.ndarray
    anchor: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError("measurement sigma must be positive")


@dataclass(frozen=True)
class EkfConfig:
    q: float = 0.05**2  # (m/s)^2 * s per s
    fixed_sigma: float = 0.2  # m
    gate: GateConfig = field(default_factory=GateConfig)
    init_std: float = 0.5  # m, per axis
    init_var: float = 1.0  # m^2
    burn_in: float = 10.0  # s excluded from the RMSE
    min_range: float = 1e-3  # m
    fd_check_fraction: float = 0.0
    odometry_noise: bool = True


def predict(state: EkfState, velocity, dt: float, q: float = 0.05**2) -> EkfState:
    """Integrate the known velocity over ``dt`` and add ``q * dt * I``."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0:
        return state
    p = state.position + np.asarray(velocity, dtype=float) * dt
    P = state.covariance + q * dt * np.eye(3)
    return EkfState(p, P, state.time + dt)


def measurement_model(position, meas: RangeMeasurement) -> tuple[float, np.ndarray]:
    """Predicted range and its gradient with respect to ``position``."""
    tag = np.asarray(position, dtype=float) + meas.own_attitude.T @ meas.own_tag_offset
    diff = tag - meas.anchor
    yhat = float(np.sqrt(diff @ diff))
    return yhat, diff / yhat if yhat > 0 else np.zeros(3)


def finite_difference_jacobian(position, meas: RangeMeasurement, h: float = 1e-5) -> np.ndarray:
    """Central differences of the predicted range."""
    position = np.asarray(position, dtype=float)
    J = np.empty(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        J[k] = (measurement_model(position + e, meas)[0] - measurement_model(position - e, meas)[0]) / (2 * h)
    return J


def update(
    state: EkfState, meas: RangeMeasurement, gate: GateConfig = GateConfig(), min_range: float = 1e-3
) -> tuple[EkfState, bool, float]:
    """Gated scalar range update with a Joseph-form covariance.

    Returns:
        ``(new_state, accepted, nis)``; a rejected measurement leaves the
        state unchanged.

    Raises:
        SingularGeometry: predicted range at or below ``min_range``.
    """
    yhat, H = measurement_model(state.position, meas)
    if yhat <= min_range:
        raise SingularGeometry(f"predicted range {yhat:.3g} m too small")
    P = state.covariance
    PH = P @ H
    S = float(H @ PH) + meas.sigma**2
    nu = meas.value - yhat
    nis = nu * nu / S
    if not nis_test(nu, S, gate):
        return state, False, nis
    K = PH / S
    A = np.eye(3) - np.outer(K, H)
    P_new = A @ P @ A.T + meas.sigma**2 * np.outer(K, K)
    P_new = 0.5 * (P_new + P_new.T)
    return EkfState(state.position + K * nu, P_new, state.time), True, nis


@dataclass
class FilterTrace:
    times: np.ndarray
    positions: np.ndarray
    covariances: np.ndarray
    accepted: np.ndarray
    nis: np.ndarray
    skipped: int = 0
    max_jacobian_error: float = 0.0
    jacobian_checks: int = 0

    @property
    def rejection_rate(self) -> float:
        n = len(self.accepted)
        return float(np.mean(~self.accepted)) if n else 0.0


def run_filter(
    x0,
    P0,
    measurements: Sequence[RangeMeasurement],
    velocities,
    cfg: EkfConfig = EkfConfig(),
    t0: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
) -> FilterTrace:
    """Sequential predict/update over time-ordered measurements.

    ``velocities[k]`` propagates the state from the previous measurement time
    to ``measurements[k].time``. When ``cfg.fd_check_fraction`` is positive a
    random subset of updates compares the analytic Jacobian against central
    differences (``rng`` required).
    """
    n = len(measurements)
    velocities = np.asarray(velocities, dtype=float).reshape(n, 3)
    state = EkfState(np.asarray(x0, dtype=float), np.asarray(P0, dtype=float),
                     measurements[0].time if (t0 is None and n) else (t0 or 0.0))
    pos = np.empty((n, 3))
    cov = np.empty((n, 3, 3))
    acc = np.zeros(n, dtype=bool)
    nis = np.full(n, np.nan)
    check = np.zeros(n, dtype=bool)
    if cfg.fd_check_fraction > 0:
        if rng is None:
            raise ConfigError("fd_check_fraction needs an rng")
        check = rng.random(n) < cfg.fd_check_fraction
    skipped, max_err = 0, 0.0
    for k, m in enumerate(measurements):
        state = predict(state, velocities[k], m.time - state.time, cfg.q)
        if check[k]:
            _, H = measurement_model(state.position, m)
            fd = finite_difference_jacobian(state.position, m)
            max_err = max(max_err, float(np.linalg.norm(H - fd) / np.linalg.norm(H)))
        try:
            state, acc[k], nis[k] = update(state, m, cfg.gate, cfg.min_range)
        except SingularGeometry:
            skipped += 1
        pos[k] = state.position
        cov[k] = state.covariance
    times = np.array([m.time for m in measurements])
    return FilterTrace(times, pos, cov, acc, nis, skipped, max_err, int(check.sum()))


def rmse(estimates, truth, times, burn_in: float = 0.0) -> float:
    """Root-mean-square position error after ``burn_in`` seconds."""
    times = np.asarray(times, dtype=float)
    if len(times) == 0:
        return float("nan")
    keep = times >= times[0] + burn_in
    err = np.asarray(estimates)[keep] - np.asarray(truth)[keep]
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


# ---------------------------------------------------------------------------
# Dataset-driven runs
# ---------------------------------------------------------------------------


@dataclass
class LocalizationResult:
    robot: int
    mode: str
    rmse: float
    trace: FilterTrace
    truth: np.ndarray


def measured_ranges(
    dataset: Dataset,
    mode: str,
    delays: Optional[dict[int, float]] = None,
    cal: Optional[PowerCalibration] = None,
    fixed_sigma: float = 0.2,
) -> tuple[np.ndarray, np.ndarray]:
    """Range (m) and sigma (m) per exchange for one of :data:`MODES`."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "raw":
        return ds_twr_tof(dataset.intervals) * SPEED_OF_LIGHT, np.full(len(dataset), fixed_sigma)
    if delays is None or cal is None:
        raise ConfigError(f"mode {mode!r} needs delays and a power calibration")
    x = lift(avg_fpp(dataset.fpp2, dataset.fpp4), cal.alpha)
    rng = corrected_tof(dataset, delays) * SPEED_OF_LIGHT - cal.bias(x)
    if mode == "calibrated":
        return rng, np.full(len(dataset), fixed_sigma)
    return rng, cal.std(x)


def run(
    dataset: Dataset,
    world: World,
    robot: int,
    mode: str,
    delays: Optional[dict[int, float]] = None,
    cal: Optional[PowerCalibration] = None,
    cfg: EkfConfig = EkfConfig(),
    seed: int = 0,
) -> LocalizationResult:
    """Localise ``robot`` from every exchange between one of its tags and a neighbour's.

    Attitude, velocity and neighbour tag positions come from ``world``; the
    initial estimate is the true position plus N(0, init_std^2) per axis drawn
    from the ``localize`` stream of ``seed``. With ``cfg.odometry_noise`` the
    velocity input carries white noise of spectral density ``cfg.q`` (stream
    ``odometry``), so the process model is exact.
    """
    owner = np.array([world.tag_by_id[int(t)].robot_id for t in dataset.tag_ids])
    lookup = dict(zip(dataset.tag_ids.tolist(), owner.tolist()))
    ri = np.array([lookup[int(t)] for t in dataset.initiator])
    rj = np.array([lookup[int(t)] for t in dataset.responder])
    sel = (ri == robot) ^ (rj == robot)
    ds = dataset.subset(sel)
    if len(ds) == 0:
        raise ConfigError(f"no exchanges involve robot {robot}")
    values, sigmas = measured_ranges(ds, mode, delays, cal, cfg.fixed_sigma)
    own = np.where(ri[sel] == robot, ds.initiator, ds.responder)
    other = np.where(ri[sel] == robot, ds.responder, ds.initiator)
    traj = world.robot_by_id[robot]
    t = ds.t_s
    C = traj.attitude(t)
    anchors = np.empty((len(ds), 3))
    for tag in np.unique(other):
        m = other == tag
        anchors[m] = world.tag_position(int(tag), t[m])
    offsets = np.array([world.tag_by_id[int(g)].body_offset for g in own], dtype=float)
    meas = [
        RangeMeasurement(float(values[k]), float(sigmas[k]), offsets[k], C[k], anchors[k], float(t[k]))
        for k in range(len(ds))
    ]
    # velocity over each step is taken at the step's start
    v = traj.velocity(np.concatenate([[t[0]], t[:-1]]))
    streams = SeedStreams(seed)
    if cfg.odometry_noise:
        # white velocity noise of spectral density q, the process model's assumption
        dt = np.diff(t, prepend=t[0])
        std = np.sqrt(cfg.q / np.where(dt > 0, dt, np.inf))
        v = v + std[:, None] * streams["odometry"].standard_normal(v.shape)
    rng = streams["localize"]
    x0 = traj.position(t[0]) + cfg.init_std * rng.standard_normal(3)
    trace = run_filter(x0, cfg.init_var * np.eye(3), meas, v, cfg, t0=float(t[0]), rng=rng)
    truth = traj.position(t)
    return LocalizationResult(robot, mode, rmse(trace.positions, truth, t, cfg.burn_in), trace, truth)
