"""Ground-truth world model and generator of corrupted DS-TWR exchanges.

The world holds smooth robot trajectories, tags rigidly mounted on the
robots, and the truth of every corruption channel:

* ``skew``     - per-tag clock rate error,
* ``noise``    - white timestamp noise,
* ``delay``    - per-tag antenna delays (transmit and receive),
* ``power``    - FPP-dependent reception bias and heteroscedastic noise,
* ``outliers`` - positive multipath excess delay,
* ``motion``   - robots moving between the messages of one exchange.

Disabling every channel makes :func:`uwbcal.twr.ds_twr_tof` reproduce the
truth ToF. Random draws come from named sub-streams of one seed and are
taken whether or not a channel is enabled, so toggling one channel never
shifts the draws of another.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .dataset import Dataset, TwrTransaction
from .errors import ConfigError, SignalDropped
from .twr import TwrIntervals

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 0.299702547  # m/ns, UWB propagation constant
STREAM_NAMES = ("trajectory", "clock", "power", "outlier", "schedule")


def range_to_tof(r_m):
    return np.asarray(r_m) / SPEED_OF_LIGHT


def tof_to_range(tof_ns):
    return np.asarray(tof_ns) * SPEED_OF_LIGHT


class SeedStreams:
    """Independent named generators derived from one integer seed."""

    def __init__(self, seed: int):
        if seed is None:
            raise ConfigError("a seed is mandatory")
        self.seed = int(seed)
        self._gens: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._gens:
            key = zlib.crc32(name.encode("utf-8"))
            ss = np.random.SeedSequence(self.seed, spawn_key=(key,))
            self._gens[name] = np.random.default_rng(ss)
        return self._gens[name]


# --------------------------------------------------------------------------
# Clocks and tags
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClockModel:
    skew: float = 0.0
    offset: float = 0.0  # ns
    timestamp_noise_std: float = 0.0  # ns

    def __post_init__(self):
        if self.timestamp_noise_std < 0:
            raise ConfigError("timestamp_noise_std must be non-negative")
        if abs(self.skew) > 100e-6:
            raise ConfigError(f"clock skew {self.skew} outside +/-100 ppm")

    def read(self, t_ns, noise=0.0):
        """Absolute clock reading of true time ``t_ns`` (ns)."""
        return self.offset + (1.0 + self.skew) * (np.asarray(t_ns) + noise)

    def elapsed(self, start_ns, stop_ns):
        """Interval measured between two (already noisy) true stamps.

        The offset cancels; only the rate error remains.
        """
        return (1.0 + self.skew) * (np.asarray(stop_ns) - np.asarray(start_ns))


@dataclass(frozen=True)
class TagSpec:
    """A tag mounted on a robot.

    ``delay`` is the aggregate antenna delay ``d = d_tx - d_rx`` (ns); the
    simulator adds ``delay + rx_delay`` to transmit stamps and
    ``rx_delay`` to receive stamps.
    """

    tag_id: int
    robot_id: int
    body_offset: tuple[float, float, float]
    delay: float = 0.0
    clock: ClockModel = field(default_factory=ClockModel)
    rx_delay: float = 0.0

    def __post_init__(self):
        if abs(self.delay) > 10.0:
            raise ConfigError(f"tag {self.tag_id}: |delay| > 10 ns")

    @property
    def tx_delay(self) -> float:
        return self.delay + self.rx_delay


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


@dataclass(frozen=True)
class RobotTrajectory:
    """Sum-of-sinusoids motion of one robot.

    Position on each axis is ``center + sum_k a_k sin(w_k t + phi_k)``.
    Yaw, pitch and roll are sinusoid sums of the same form on top of a
    constant rate (used for a slow steady spin in yaw). ``attitude``
    returns ``C``, the rotation taking world-frame vectors into the body
    frame, so a body-frame offset ``r`` sits at ``position + C.T @ r``.
    """

    robot_id: int
    center: np.ndarray  # (3,)
    amp: np.ndarray  # (n, 3)
    omega: np.ndarray  # (n, 3) rad/s
    phase: np.ndarray  # (n, 3)
    att_amp: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))  # (m, 3) yaw, pitch, roll
    att_omega: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))
    att_phase: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))
    att_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    att_rate: np.ndarray = field(default_factory=lambda: np.zeros(3))  # rad/s

    def position(self, t):
        t = np.asarray(t, dtype=float)[..., None, None]
        return self.center + np.sum(self.amp * np.sin(self.omega * t + self.phase), axis=-2)

    def velocity(self, t):
        t = np.asarray(t, dtype=float)[..., None, None]
        return np.sum(self.amp * self.omega * np.cos(self.omega * t + self.phase), axis=-2)

    def euler(self, t):
        t = np.asarray(t, dtype=float)[..., None, None]
        return self.att_offset + self.att_rate * t[..., 0] + np.sum(self.att_amp * np.sin(self.att_omega * t + self.att_phase), axis=-2)

    def attitude(self, t):
        e = self.euler(t)
        body_to_world = _rot_z(e[..., 0]) @ _rot_y(e[..., 1]) @ _rot_x(e[..., 2])
        return np.swapaxes(body_to_world, -1, -2)

    def sample(self, t):
        return self.position(t), self.velocity(t), self.attitude(t)


@dataclass(frozen=True)
class TrajectoryConfig:
    n_robots: int = 3
    duration: float = 60.0  # s
    box_min: tuple[float, float, float] = (-3.0, -3.0, 0.5)
    box_max: tuple[float, float, float] = (3.0, 3.0, 2.5)
    n_terms: int = 4
    amplitude_scale: float = 0.8
    freq_range: tuple[float, float] = (0.08, 0.4)  # Hz
    yaw_amplitude: float = np.pi
    yaw_rate_range: tuple[float, float] = (0.3, 0.8)  # rad/s, random sign
    tilt_amplitude: float = 0.15  # rad
    center_radius: float = 0.6  # fraction of the horizontal half-extent


def generate_trajectories(config: TrajectoryConfig, seed: int | SeedStreams) -> list[RobotTrajectory]:
    """Seeded smooth trajectories that stay inside the bounding box.

    Robots are centred on a horizontal circle; the summed sinusoid
    amplitudes on each axis never exceed the room left between the circle
    and the box wall, so the box constraint holds for all time.
    """
    if config.n_robots < 1:
        raise ConfigError("at least one robot is required")
    if config.duration <= 0:
        raise ConfigError("duration must be positive")
    lo, hi = np.asarray(config.box_min, float), np.asarray(config.box_max, float)
    if np.any(hi <= lo):
        raise ConfigError("empty bounding box")
    rng = seed["trajectory"] if isinstance(seed, SeedStreams) else SeedStreams(seed)["trajectory"]
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    radius = config.center_radius * min(half[0], half[1]) if config.n_robots > 1 else 0.0
    # same horizontal budget for every robot so robot pairs are statistically alike
    room = half.copy()
    room[:2] = min(half[0], half[1]) - radius
    trajectories = []
    for r in range(config.n_robots):
        ang = 2.0 * np.pi * r / config.n_robots
        center = mid + radius * np.array([np.cos(ang), np.sin(ang), 0.0])
        n = config.n_terms
        amp = np.broadcast_to(config.amplitude_scale * 0.95 * room / n, (n, 3)).copy()
        freq = rng.uniform(*config.freq_range, size=(n, 3))
        phase = rng.uniform(0.0, 2.0 * np.pi, size=(n, 3))
        att_amp = np.array([[config.yaw_amplitude, config.tilt_amplitude, config.tilt_amplitude]])
        att_amp = att_amp * rng.uniform(0.5, 1.0, size=(1, 3)) * config.amplitude_scale
        att_freq = rng.uniform(*config.freq_range, size=(1, 3))
        att_phase = rng.uniform(0.0, 2.0 * np.pi, size=(1, 3))
        yaw0 = rng.uniform(-np.pi, np.pi)
        yaw_rate = rng.choice([-1.0, 1.0]) * rng.uniform(*config.yaw_rate_range) * config.amplitude_scale
        trajectories.append(
            RobotTrajectory(
                robot_id=r,
                center=center,
                amp=amp,
                omega=2.0 * np.pi * freq,
                phase=phase,
                att_amp=att_amp,
                att_omega=2.0 * np.pi * att_freq,
                att_phase=att_phase,
                att_offset=np.array([yaw0, 0.0, 0.0]),
                att_rate=np.array([yaw_rate, 0.0, 0.0]),
            )
        )
    return trajectories



# --------------------------------------------------------------------------
# Power truth
# --------------------------------------------------------------------------

# Control points over lifted FPP (alpha = -82 dBm). Range-equivalent values
# in metres; converted to ns on construction. The bias is flat at zero in
# the quiet low-FPP bulk and at high FPP, with a +10/-10 cm swing through the
# mid-FPP region where the noise peaks at 17 cm; the std falls to 2.5 cm at
# high FPP. The swing roughly averages out over the default geometry.
DEFAULT_RHO_X = (0.15, 0.25, 0.35, 0.45, 0.55, 0.7, 0.85, 1.0, 1.5, 3.0)
DEFAULT_RHO_BIAS_M = (0.0, 0.0, 0.0, 0.10, -0.05, -0.10, -0.01, 0.0, 0.0, 0.0)
DEFAULT_RHO_STD_M = (0.06, 0.045, 0.04, 0.10, 0.17, 0.06, 0.025, 0.025, 0.025, 0.025)


def lift(fpp, alpha):
    return 10.0 ** ((np.asarray(fpp, dtype=float) - alpha) / 10.0)


@dataclass(frozen=True)
class PowerTruth:
    """First-path-power channel model and injected reception corruption.

    FPP follows log-distance path loss plus a smooth pose-dependent term
    ``perturb_amp * cos(2 * elevation)`` of the line of sight, plus white
    noise. ``rho_bias`` and ``rho_std`` are functions of lifted FPP (ns):
    the former is added to every reception stamp, the latter scales the
    heteroscedastic reception noise such that the resulting DS ToF error
    has that standard deviation.
    """

    p0: float = -78.0
    d0: float = 1.0
    path_loss_exp: float = 2.0
    perturb_amp: float = 3.0
    fpp_noise_std: float = 1.0
    alpha: float = -82.0
    rho_x: tuple[float, ...] = DEFAULT_RHO_X
    rho_bias_ns: tuple[float, ...] = tuple(b / SPEED_OF_LIGHT for b in DEFAULT_RHO_BIAS_M)
    rho_std_ns: tuple[float, ...] = tuple(s / SPEED_OF_LIGHT for s in DEFAULT_RHO_STD_M)

    def __post_init__(self):
        if not (len(self.rho_x) == len(self.rho_bias_ns) == len(self.rho_std_ns)):
            raise ConfigError("rho control point lists differ in length")
        if len(self.rho_x) < 2 or np.any(np.diff(self.rho_x) <= 0) or self.rho_x[0] <= 0:
            raise ConfigError("rho_x must be positive and strictly increasing")
        if np.any(np.asarray(self.rho_std_ns) < 0):
            raise ConfigError("rho_std must be non-negative")

    @cached_property
    def _bias_interp(self):
        return PchipInterpolator(np.log10(self.rho_x), self.rho_bias_ns)

    @cached_property
    def _std_interp(self):
        return PchipInterpolator(np.log10(self.rho_x), self.rho_std_ns)

    def _u(self, x):
        u = np.log10(np.maximum(np.asarray(x, dtype=float), 1e-300))
        return np.clip(u, np.log10(self.rho_x[0]), np.log10(self.rho_x[-1]))

    def mean_fpp(self, distance_m):
        d = np.maximum(np.asarray(distance_m, dtype=float), 1e-3)
        return self.p0 - 10.0 * self.path_loss_exp * np.log10(d / self.d0)

    def perturbation(self, los):
        """Pose-dependent FPP term (dB) for line-of-sight vectors ``los``."""
        los = np.asarray(los, dtype=float)
        d = np.maximum(np.linalg.norm(los, axis=-1), 1e-9)
        elevation = np.arcsin(np.clip(np.abs(los[..., 2]) / d, 0.0, 1.0))
        return self.perturb_amp * np.cos(2.0 * elevation)

    def rho_bias(self, x):
        """Injected reception bias (ns) at lifted FPP ``x``; clamped outside."""
        return self._bias_interp(self._u(x))

    def rho_std(self, x):
        """Standard deviation (ns) of the DS ToF error from the power channel."""
        return np.maximum(self._std_interp(self._u(x)), 0.0)


# --------------------------------------------------------------------------
# World
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Channels:
    skew: bool = True
    noise: bool = True
    delay: bool = True
    power: bool = True
    outliers: bool = True
    motion: bool = True

    @classmethod
    def none(cls) -> "Channels":
        return cls(False, False, False, False, False, False)

    @classmethod
    def only(cls, *names: str) -> "Channels":
        return replace(cls.none(), **{n: True for n in names})


@dataclass(frozen=True)
class World:
    trajectories: Sequence[RobotTrajectory]
    tags: Sequence[TagSpec]
    power: PowerTruth = field(default_factory=PowerTruth)
    channels: Channels = field(default_factory=Channels)
    pairs: Sequence[tuple[int, int]] | None = None
    dt32_nominal: float = 300e3  # ns
    dt53_nominal: float = 1500e3  # ns
    reply_jitter: float = 0.05
    outlier_prob: float = 0.02
    outlier_mean_m: float = 1.0
    fpp_min: float = -100.0
    fpp_max: float = -60.0

    def __post_init__(self):
        ids = [t.tag_id for t in self.tags]
        if len(set(ids)) != len(ids):
            raise ConfigError("tag ids must be unique")
        robots = {tr.robot_id for tr in self.trajectories}
        for t in self.tags:
            if t.robot_id not in robots:
                raise ConfigError(f"tag {t.tag_id} references unknown robot {t.robot_id}")
        if self.pairs is None:
            object.__setattr__(self, "pairs", tuple(default_pairs(self.tags)))
        for i, j in self.pairs:
            if i not in ids or j not in ids or i == j:
                raise ConfigError(f"invalid pair ({i}, {j})")
        if not 0.0 <= self.outlier_prob <= 1.0:
            raise ConfigError("outlier_prob must be a probability")
        if self.dt32_nominal <= 0 or self.dt53_nominal <= 0:
            raise ConfigError("reply delays must be positive")
        if not 0.0 <= self.reply_jitter < 1.0:
            raise ConfigError("reply_jitter must be in [0, 1)")

    @cached_property
    def tag_by_id(self) -> dict[int, TagSpec]:
        return {t.tag_id: t for t in self.tags}

    @cached_property
    def robot_by_id(self) -> dict[int, RobotTrajectory]:
        return {tr.robot_id: tr for tr in self.trajectories}

    def tag_position(self, tag_id: int, t):
        tag = self.tag_by_id[tag_id]
        traj = self.robot_by_id[tag.robot_id]
        C = traj.attitude(t)
        return traj.position(t) + np.einsum("...ji,j->...i", C, np.asarray(tag.body_offset, float))

    def true_range(self, i: int, j: int, t):
        return np.linalg.norm(self.tag_position(i, t) - self.tag_position(j, t), axis=-1)


def default_pairs(tags: Iterable[TagSpec]) -> list[tuple[int, int]]:
    """Every cross-robot tag pair once, lower tag id initiating."""
    tags = sorted(tags, key=lambda t: t.tag_id)
    return [
        (a.tag_id, b.tag_id)
        for k, a in enumerate(tags)
        for b in tags[k + 1 :]
        if a.robot_id != b.robot_id
    ]


# --------------------------------------------------------------------------
# Exchange generation
# --------------------------------------------------------------------------


def _positions(world: World, tag_ids: np.ndarray, t_s: np.ndarray) -> np.ndarray:
    out = np.empty(t_s.shape + (3,))
    for tid in np.unique(tag_ids):
        sel = tag_ids == tid
        out[sel] = world.tag_position(int(tid), t_s[sel])
    return out


def _tag_column(world: World, tag_ids: np.ndarray, getter) -> np.ndarray:
    lookup = {tid: getter(tag) for tid, tag in world.tag_by_id.items()}
    return np.array([lookup[int(t)] for t in tag_ids], dtype=float)


def simulate_batch(world: World, initiators, responders, t_start, streams: SeedStreams) -> dict:
    """Simulate many DS-TWR exchanges at once.

    Returns a dict of columns (see :class:`uwbcal.dataset.Dataset`) plus a
    boolean ``kept`` mask of exchanges that survived the FPP detection
    threshold. Dropped rows are still present so callers can count them.
    """
    ini = np.asarray(initiators, dtype=np.int64)
    res = np.asarray(responders, dtype=np.int64)
    t1 = np.asarray(t_start, dtype=float)
    n = t1.shape[0]
    ch = world.channels
    c = SPEED_OF_LIGHT
    pw = world.power

    # draws: fixed shapes per stream regardless of enabled channels
    g_sched, g_clock, g_power, g_out = (streams[k] for k in ("schedule", "clock", "power", "outlier"))
    jit = g_sched.uniform(-1.0, 1.0, size=(n, 2))
    ts_z = g_clock.standard_normal(size=(n, 6))
    fpp_z = g_power.standard_normal(size=(n, 3))
    rho_z = g_power.standard_normal(size=(n, 3))
    out_u = g_out.uniform(size=n)
    out_e = g_out.exponential(world.outlier_mean_m, size=n)
    out_side = g_out.integers(0, 2, size=n)

    d32 = world.dt32_nominal * (1.0 + world.reply_jitter * jit[:, 0])
    d53 = world.dt53_nominal * (1.0 + world.reply_jitter * jit[:, 1])

    # geometry; truth is the separation at the first message
    pi1 = _positions(world, ini, t1)
    pj1 = _positions(world, res, t1)
    los1 = pj1 - pi1
    truth_range = np.linalg.norm(los1, axis=-1)
    truth_tof = truth_range / c

    if ch.motion:
        f1 = truth_tof
        t3 = t1 + (f1 + d32) * 1e-9
        los2 = _positions(world, ini, t3) - _positions(world, res, t3)
        f2 = np.linalg.norm(los2, axis=-1) / c
        t5 = t3 + d53 * 1e-9
        los3 = _positions(world, ini, t5) - _positions(world, res, t5)
        f3 = np.linalg.norm(los3, axis=-1) / c
    else:
        f1 = f2 = f3 = truth_tof
        los2 = los3 = -los1

    # true antenna event times relative to t1 (ns)
    tau1 = np.zeros(n)
    tau2 = tau1 + f1
    tau3 = tau2 + d32
    tau4 = tau3 + f2
    tau5 = tau3 + d53
    tau6 = tau5 + f3
    stamps = np.stack([tau1, tau2, tau3, tau4, tau5, tau6], axis=1)

    # first-path power at receptions 2 (at j), 4 and 6 (at i)
    dists = np.stack([truth_range, np.linalg.norm(los2, axis=-1), np.linalg.norm(los3, axis=-1)], axis=1)
    los = np.stack([los1, los2, los3], axis=1)
    fpp = pw.mean_fpp(dists) + pw.perturbation(los) + pw.fpp_noise_std * fpp_z
    kept = np.all(fpp >= world.fpp_min, axis=1)
    fpp = np.minimum(fpp, world.fpp_max)

    if ch.delay:
        tx_i = _tag_column(world, ini, lambda t: t.tx_delay)
        rx_i = _tag_column(world, ini, lambda t: t.rx_delay)
        tx_j = _tag_column(world, res, lambda t: t.tx_delay)
        rx_j = _tag_column(world, res, lambda t: t.rx_delay)
        stamps = stamps + np.stack([tx_i, rx_j, tx_j, rx_i, tx_j, rx_i], axis=1)

    if ch.power:
        x = lift(fpp, pw.alpha)
        r = d32 / d53
        # per-stamp scale so that the DS ToF error std equals rho_std
        gain = 2.0 / np.sqrt((1.0 + r) ** 2 + 1.0 + r**2)
        shift = pw.rho_bias(x) + gain[:, None] * pw.rho_std(x) * rho_z
        stamps[:, [1, 3, 5]] += shift

    if ch.outliers:
        hit = out_u < world.outlier_prob
        excess = np.where(hit, 2.0 * out_e / c, 0.0)
        stamps[:, 1] += np.where(out_side == 0, excess, 0.0)
        stamps[:, 3] += np.where(out_side == 1, excess, 0.0)

    if ch.noise:
        sig_i = _tag_column(world, ini, lambda t: t.clock.timestamp_noise_std)
        sig_j = _tag_column(world, res, lambda t: t.clock.timestamp_noise_std)
        sig = np.stack([sig_i, sig_j, sig_j, sig_i, sig_j, sig_i], axis=1)
        stamps = stamps + sig * ts_z

    if ch.skew:
        g_i = _tag_column(world, ini, lambda t: t.clock.skew)
        g_j = _tag_column(world, res, lambda t: t.clock.skew)
    else:
        g_i = g_j = np.zeros(n)

    return {
        "t_s": t1,
        "initiator": ini,
        "responder": res,
        "dt41": (1.0 + g_i) * (stamps[:, 3] - stamps[:, 0]),
        "dt32": (1.0 + g_j) * (stamps[:, 2] - stamps[:, 1]),
        "dt53": (1.0 + g_j) * (stamps[:, 4] - stamps[:, 2]),
        "dt64": (1.0 + g_i) * (stamps[:, 5] - stamps[:, 3]),
        "fpp2": fpp[:, 0],
        "fpp4": fpp[:, 1],
        "truth_tof": truth_tof,
        "truth_range": truth_range,
        "kept": kept,
    }


def simulate_exchange(
    pair: tuple[TagSpec, TagSpec],
    t: float,
    world: World,
    streams: SeedStreams,
    delays_cfg: tuple[float, float] | None = None,
) -> TwrTransaction:
    """One DS-TWR exchange initiated at wall time ``t`` (s).

    ``delays_cfg`` overrides the world's nominal ``(dt32, dt53)`` reply
    delays (ns). Raises :class:`SignalDropped` when an FPP falls below the
    detection threshold.
    """
    if delays_cfg is not None:
        world = replace(world, dt32_nominal=delays_cfg[0], dt53_nominal=delays_cfg[1])
    a, b = pair
    for tag in pair:
        if tag.tag_id not in world.tag_by_id:
            raise ConfigError(f"unknown tag {tag.tag_id}")
    cols = simulate_batch(world, [a.tag_id], [b.tag_id], [float(t)], streams)
    if not cols["kept"][0]:
        raise SignalDropped(f"pair ({a.tag_id}, {b.tag_id}) at t={t}")
    return Dataset.from_columns({k: v for k, v in cols.items() if k != "kept"})[0]


def run_schedule(world: World, rate: float, duration: float, seed: int | SeedStreams) -> Dataset:
    """Round-robin ranging over the world's pair list.

    Exchange ``k`` starts at ``k / rate`` seconds and uses pair
    ``k mod len(pairs)``. Dropped exchanges leave gaps; their count is
    stored in ``Dataset.dropped``.
    """
    if rate <= 0:
        raise ConfigError("rate must be positive")
    if duration < 0:
        raise ConfigError("duration must be non-negative")
    if not world.pairs:
        raise ConfigError("pair set is empty")
    streams = seed if isinstance(seed, SeedStreams) else SeedStreams(seed)
    n = int(np.floor(duration * rate + 1e-9))
    k = np.arange(n)
    pairs = np.asarray(world.pairs, dtype=np.int64).reshape(-1, 2)
    sel = pairs[k % len(pairs)]
    cols = simulate_batch(world, sel[:, 0], sel[:, 1], k / rate, streams)
    kept = cols.pop("kept")
    dropped = int(np.count_nonzero(~kept))
    if dropped:
        log.info("dropped %d of %d exchanges below FPP threshold", dropped, n)
    ds = Dataset.from_columns({key: val[kept] for key, val in cols.items()})
    ds.dropped = dropped
    return ds


def intervals_monte_carlo(
    n: int,
    tof: float,
    dt32: float,
    dt53: float,
    gamma_i: float = 0.0,
    gamma_j: float = 0.0,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
) -> TwrIntervals:
    """Static-geometry DS exchanges with skew and timestamp noise only.

    Stamps follow the ``(1 + gamma)(dt + eta)`` convention with
    ``eta ~ N(0, noise_std^2)`` per stamp. Used as the Monte-Carlo oracle
    for the analytic bias and variance models.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    eta = noise_std * rng.standard_normal(size=(n, 6)) if noise_std > 0 else np.zeros((n, 6))
    tau = np.array([0.0, tof, tof + dt32, 2 * tof + dt32, tof + dt32 + dt53, 2 * tof + dt32 + dt53])
    s = tau + eta
    return TwrIntervals(
        dt41=(1.0 + gamma_i) * (s[:, 3] - s[:, 0]),
        dt32=(1.0 + gamma_j) * (s[:, 2] - s[:, 1]),
        dt53=(1.0 + gamma_j) * (s[:, 4] - s[:, 2]),
        dt64=(1.0 + gamma_i) * (s[:, 5] - s[:, 3]),
    )


DEFAULT_DELAYS_NS = (-0.35, -0.50, -0.20, -0.45, -0.30, -0.55)
DEFAULT_SKEWS = (3e-6, -8e-6, 12e-6, -15e-6, 6e-6, 18e-6)
DEFAULT_TAG_OFFSETS = ((0.17, 0.0, 0.05), (-0.17, 0.0, 0.05))


def make_tags(
    n_robots: int,
    offsets: Sequence[Sequence[float]] = DEFAULT_TAG_OFFSETS,
    delays: Sequence[float] = DEFAULT_DELAYS_NS,
    skews: Sequence[float] = DEFAULT_SKEWS,
    timestamp_noise_std: float = 0.03,
) -> list[TagSpec]:
    """Tags numbered robot-major; delays and skews are cycled if short."""
    tags = []
    for r in range(n_robots):
        for k, off in enumerate(offsets):
            tid = r * len(offsets) + k
            tags.append(
                TagSpec(
                    tag_id=tid,
                    robot_id=r,
                    body_offset=tuple(float(v) for v in off),
                    delay=float(delays[tid % len(delays)]),
                    clock=ClockModel(skew=float(skews[tid % len(skews)]), timestamp_noise_std=timestamp_noise_std),
                )
            )
    return tags


def make_world(traj_cfg: TrajectoryConfig = TrajectoryConfig(), seed: int = 0, **world_kw) -> World:
    """Default fleet: robots from ``traj_cfg`` with two tags each."""
    tags = world_kw.pop("tags", None) or make_tags(traj_cfg.n_robots)
    return World(trajectories=generate_trajectories(traj_cfg, seed), tags=tags, **world_kw)
