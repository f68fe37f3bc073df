"""Two-way-ranging arithmetic and analytic error models.

All protocol arithmetic is carried out in nanoseconds in double precision.
Reply intervals are 1e5-1e6 ns while times of flight are 1-100 ns, so the
difference ``dt41 - K * dt32`` cancels roughly five leading digits; with a
unit roundoff of 1.1e-16 the result still carries about nine significant
digits (absolute error near 1e-10 ns, i.e. well below a micrometre of range).
Reply-delay optimisation (:func:`optimal_delay`, :func:`total_uncertainty`)
is unit-agnostic; the examples use seconds.

Everything here is a pure function of its inputs and accepts numpy arrays
wherever a scalar interval is accepted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize

from .errors import DegenerateInterval, NoPositiveRoot

SKEW_PLAUSIBILITY = 1e-3


@dataclass(frozen=True)
class TwrIntervals:
    """Timestamp differences of one (or a batch of) ranging exchanges.

    ``dt41`` and ``dt64`` are read on the initiator clock, ``dt32`` and
    ``dt53`` on the responder clock. The DS-only fields are ``None`` for a
    single-sided exchange.
    """

    dt41: np.ndarray | float
    dt32: np.ndarray | float
    dt53: Optional[np.ndarray | float] = None
    dt64: Optional[np.ndarray | float] = None

    @property
    def is_double_sided(self) -> bool:
        return self.dt53 is not None and self.dt64 is not None

    @property
    def ratio(self):
        """Clock-rate ratio ``K = dt64 / dt53`` (initiator per responder tick)."""
        if not self.is_double_sided:
            raise DegenerateInterval("single-sided exchange has no rate ratio")
        dt53 = np.asarray(self.dt53, dtype=float)
        if np.any(dt53 <= 0):
            raise DegenerateInterval("dt53 must be positive")
        return np.asarray(self.dt64, dtype=float) / dt53

    def validate(self, tolerance: float = 1.0) -> None:
        """Raise DegenerateInterval if the intervals are not physical.

        ``tolerance`` (ns) allows ``dt41`` to fall slightly below ``dt32``
        under timestamp noise.
        """
        fields = [self.dt41, self.dt32]
        if self.is_double_sided:
            fields += [self.dt53, self.dt64]
        for value in fields:
            if np.any(np.asarray(value) <= 0):
                raise DegenerateInterval("all intervals must be positive")
        if np.any(np.asarray(self.dt41) < np.asarray(self.dt32) - tolerance):
            raise DegenerateInterval("dt41 < dt32 beyond tolerance")


@dataclass(frozen=True)
class SkewPair:
    """Clock skews of initiator and responder plus timestamp noise variance."""

    gamma_i: float
    gamma_j: float
    noise_var_R: float = 0.0

    def __post_init__(self):
        if abs(self.gamma_i) >= SKEW_PLAUSIBILITY or abs(self.gamma_j) >= SKEW_PLAUSIBILITY:
            raise ValueError("clock skew outside plausibility bound")
        if self.noise_var_R < 0:
            raise ValueError("noise_var_R must be non-negative")


def ss_twr_tof(iv: TwrIntervals):
    """Single-sided ToF, ``(dt41 - dt32) / 2``. Negative values are kept."""
    return 0.5 * (np.asarray(iv.dt41, dtype=float) - np.asarray(iv.dt32, dtype=float))


def ds_twr_tof(iv: TwrIntervals):
    """Double-sided ToF with the responder interval rescaled to initiator ticks.

    Returns ``(dt41 - dt64 / dt53 * dt32) / 2``.
    """
    k = iv.ratio
    return 0.5 * (np.asarray(iv.dt41, dtype=float) - k * np.asarray(iv.dt32, dtype=float))


def expected_ss_bias(sk: SkewPair, tof, dt32):
    """Mean single-sided ToF error in ns for true ``tof`` and reply ``dt32``."""
    return sk.gamma_i * tof + 0.5 * (sk.gamma_i - sk.gamma_j) * dt32


def expected_ds_bias(gamma_i, tof):
    """Mean double-sided ToF error; only the initiator skew survives."""
    return gamma_i * tof


def _ratio(dt32, dt53):
    dt53 = np.asarray(dt53, dtype=float)
    if np.any(dt53 <= 0):
        raise DegenerateInterval("dt53 must be positive")
    return np.asarray(dt32, dtype=float) / dt53


def var_ds(sk: SkewPair, dt32, dt53):
    """First-order variance of the double-sided ToF error (ns^2).

    ``(1 + gamma_i)^2 R (1 + r + r^2)`` with ``r = dt32 / dt53``.
    """
    r = _ratio(dt32, dt53)
    return (1.0 + sk.gamma_i) ** 2 * sk.noise_var_R * (1.0 + r + r * r)


def var_ss(sk: SkewPair):
    """Variance of the single-sided ToF error (ns^2).

    Each interval difference carries two independent stamps of variance R,
    scaled by the owner's clock rate, so the variance is
    ``R/2 * ((1 + gamma_i)^2 + (1 + gamma_j)^2)``.
    """
    return 0.5 * sk.noise_var_R * ((1.0 + sk.gamma_i) ** 2 + (1.0 + sk.gamma_j) ** 2)


def total_uncertainty(T, dt32, dt53, R=1.0):
    """Uncertainty per unit time of a stream of DS exchanges.

    One exchange lasts ``T + dt53`` and has variance ``R (1 + r + r^2)``.
    """
    if np.any(np.asarray(T) <= 0) or np.any(np.asarray(dt32) <= 0):
        raise DegenerateInterval("T and dt32 must be positive")
    r = _ratio(dt32, dt53)
    return (T + np.asarray(dt53, dtype=float)) * R * (1.0 + r + r * r)


def _delay_cubic(x, T, dt32):
    return x**3 - dt32 * (T + dt32) * x - 2.0 * dt32**2 * T


def optimal_delay(T: float, dt32: float, tol: float = 1e-15, max_iter: int = 100) -> float:
    """Second-reply delay ``dt53`` minimising :func:`total_uncertainty`.

    Solves ``x^3 - dt32 (T + dt32) x - 2 dt32^2 T = 0`` for its positive
    root with Brent's method. The cubic is negative at ``x = dt32`` and
    positive at ``10 (T + dt32)``, and has a single sign change in its
    coefficients, so that bracket holds the only positive root.
    """
    if T <= 0 or dt32 <= 0:
        raise DegenerateInterval("T and dt32 must be positive")
    lo, hi = float(dt32), 10.0 * (T + dt32)
    if not (_delay_cubic(lo, T, dt32) < 0 < _delay_cubic(hi, T, dt32)):
        raise NoPositiveRoot("cubic not bracketed")
    x = optimize.brentq(_delay_cubic, lo, hi, args=(T, dt32), xtol=tol * hi, rtol=4 * np.finfo(float).eps,
                        maxiter=max_iter)
    return float(x)
