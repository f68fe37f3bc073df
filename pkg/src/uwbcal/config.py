"""Pipeline configuration file.

Line-based UTF-8 text, one ``section.key = value`` per line. ``#`` starts a
comment. Lists are comma separated. Unknown sections or keys are errors::

    simulation.seed = 7
    simulation.duration_s = 240
    simulation.channels = skew, noise, delay, power, outliers, motion
    calibration.loss = cauchy
    evaluation.test_seeds = 1, 2
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import sim
from .errors import ConfigError, IoError
from .gating import GateConfig
from .powercal import PowerConfig
from .ekf import EkfConfig


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


@dataclass(frozen=True)
class SimulationConfig:
    seed: Optional[int] = None
    robots: int = 3
    tags_per_robot: int = 2
    tag_radius_m: float = 0.17
    tag_height_m: float = 0.05
    duration_s: float = 240.0
    rate_hz: float = 158.4
    delays_ns: tuple[float, ...] = sim.DEFAULT_DELAYS_NS
    skews_ppm: tuple[float, ...] = tuple(s * 1e6 for s in sim.DEFAULT_SKEWS)
    timestamp_noise_ns: float = 0.03
    outlier_prob: float = 0.02
    outlier_mean_m: float = 1.0
    p0_dbm: float = -78.0
    path_loss_exp: float = 2.0
    perturb_db: float = 3.0
    fpp_noise_db: float = 1.0
    alpha_dbm: float = -82.0
    fpp_min_dbm: float = -100.0
    channels: tuple[str, ...] = ("skew", "noise", "delay", "power", "outliers", "motion")


@dataclass(frozen=True)
class CalibrationConfig:
    loss: str = "cauchy"
    tol_ns: float = 1e-4
    max_iter: int = 100
    histogram_bin_ns: float = 0.1
    alpha_dbm: float = -82.0
    min_samples: int = 500
    window: int = 200
    stride: int = 50
    knots: int = 15
    folds: int = 5
    trim_confidence: float = 0.999


@dataclass(frozen=True)
class EvaluationConfig:
    gate_confidence: float = 0.95
    q: float = 0.05**2
    fixed_sigma_m: float = 0.2
    init_std_m: float = 0.5
    burn_in_s: float = 10.0
    robots: tuple[int, ...] = (0, 1, 2)
    test_seeds: tuple[int, ...] = (1, 2)


_SECTIONS = {
    "simulation": SimulationConfig,
    "calibration": CalibrationConfig,
    "evaluation": EvaluationConfig,
}


def _convert(cls, key: str, raw: str):
    default = {f.name: f.default for f in fields(cls)}[key]
    try:
        if key == "channels":
            return _names(raw)
        if key in ("robots", "test_seeds") and isinstance(default, tuple):
            return _ints(raw)
        if isinstance(default, tuple):
            return _floats(raw)
        if key == "seed" or type(default) is int:
            return int(raw)
        if type(default) is float:
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


@dataclass(frozen=True)
class PipelineConfig:
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self):
        s, c = self.simulation, self.calibration
        unknown = set(s.channels) - {f.name for f in fields(sim.Channels)}
        if unknown:
            raise ConfigError(f"unknown channels: {sorted(unknown)}")
        if c.loss not in ("cauchy", "l2"):
            raise ConfigError(f"calibration.loss must be cauchy or l2, got {c.loss!r}")
        if s.robots < 1 or s.tags_per_robot < 1:
            raise ConfigError("need at least one robot with one tag")
        if not s.delays_ns or not s.skews_ppm:
            raise ConfigError("delays_ns and skews_ppm must not be empty")
        bad = [r for r in self.evaluation.robots if not 0 <= r < s.robots]
        if bad:
            raise ConfigError(f"evaluation.robots references unknown robots {bad}")

    # -- builders -----------------------------------------------------------

    def tag_offsets(self) -> list[tuple[float, float, float]]:
        """Tags evenly spaced on a horizontal circle, the first on the body x axis."""
        s = self.simulation
        ang = 2.0 * np.pi * np.arange(s.tags_per_robot) / s.tags_per_robot
        return [
            (float(np.round(s.tag_radius_m * np.cos(a), 15)), float(np.round(s.tag_radius_m * np.sin(a), 15)), s.tag_height_m)
            for a in ang
        ]

    def world(self, seed: int) -> sim.World:
        """World whose trajectories come from ``seed``; tags and channel model are fixed."""
        s = self.simulation
        tags = sim.make_tags(
            s.robots,
            offsets=self.tag_offsets(),
            delays=s.delays_ns,
            skews=tuple(v * 1e-6 for v in s.skews_ppm),
            timestamp_noise_std=s.timestamp_noise_ns,
        )
        power = sim.PowerTruth(
            p0=s.p0_dbm,
            path_loss_exp=s.path_loss_exp,
            perturb_amp=s.perturb_db,
            fpp_noise_std=s.fpp_noise_db,
            alpha=s.alpha_dbm,
        )
        traj = sim.TrajectoryConfig(n_robots=s.robots, duration=max(s.duration_s, 1.0))
        return sim.make_world(
            traj,
            seed=seed,
            tags=tags,
            power=power,
            channels=sim.Channels.only(*s.channels),
            outlier_prob=s.outlier_prob,
            outlier_mean_m=s.outlier_mean_m,
            fpp_min=s.fpp_min_dbm,
        )

    def require_seed(self) -> int:
        if self.simulation.seed is None:
            raise ConfigError("simulation.seed is mandatory")
        return self.simulation.seed

    def power_config(self) -> PowerConfig:
        c = self.calibration
        return PowerConfig(
            alpha=c.alpha_dbm,
            min_samples=c.min_samples,
            window_count=c.window,
            window_stride=c.stride,
            n_breaks=c.knots,
            n_folds=c.folds,
            trim_confidence=c.trim_confidence if c.trim_confidence > 0 else None,
        )

    def ekf_config(self) -> EkfConfig:
        e = self.evaluation
        return EkfConfig(
            q=e.q,
            fixed_sigma=e.fixed_sigma_m,
            gate=GateConfig(e.gate_confidence),
            init_std=e.init_std_m,
            burn_in=e.burn_in_s,
        )


def parse_config(text: str) -> PipelineConfig:
    values: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        lhs, rhs = (part.strip() for part in line.split("=", 1))
        section, _, key = lhs.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        cls = _SECTIONS[section]
        if key not in {f.name for f in fields(cls)}:
            raise ConfigError(f"line {lineno}: unknown key {lhs!r}")
        if key in values[section]:
            raise ConfigError(f"line {lineno}: duplicate key {lhs!r}")
        values[section][key] = _convert(cls, key, rhs)
    return PipelineConfig(**{name: cls(**values[name]) for name, cls in _SECTIONS.items()})


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
