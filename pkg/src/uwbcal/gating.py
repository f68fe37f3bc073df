"""Chi-squared gates for range biases and filter innovations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammainc

from .errors import ConfigError, DegenerateSigma


def chi2_cdf(x, dof: int):
    """Chi-squared CDF as the regularised lower incomplete gamma function."""
    return gammainc(0.5 * dof, 0.5 * np.maximum(np.asarray(x, dtype=float), 0.0))


def chi2_threshold(confidence: float, dof: int, tol: float = 1e-10) -> float:
    """Chi-squared quantile by bisection on :func:`chi2_cdf`.

    The bracket starts at ``[0, dof]`` and doubles its upper end until it
    encloses the quantile; bisection then runs until the bracket is narrower
    than ``tol``.
    """
    if not 0.0 < confidence < 1.0:
        raise ConfigError(f"confidence must lie in (0, 1), got {confidence}")
    if int(dof) != dof or dof < 1:
        raise ConfigError(f"dof must be a positive integer, got {dof}")
    lo, hi = 0.0, float(dof)
    while chi2_cdf(hi, dof) < confidence:
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, dof) < confidence:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class GateConfig:
    confidence: float = 0.95
    dof: int = 1
    threshold_gamma: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "threshold_gamma", chi2_threshold(self.confidence, self.dof))


def chi2_test(bias, sigma, cfg: GateConfig = GateConfig()):
    """True where ``bias^2 / sigma^2 <= gamma`` (accept)."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise DegenerateSigma("sigma must be positive")
    accept = np.asarray(bias, dtype=float) ** 2 <= cfg.threshold_gamma * sigma**2
    return bool(accept) if accept.ndim == 0 else accept


def nis_test(innovation, innovation_variance, cfg: GateConfig = GateConfig()):
    """True where ``nu^2 / S <= gamma`` (accept)."""
    s = np.asarray(innovation_variance, dtype=float)
    if np.any(s <= 0):
        raise DegenerateSigma("innovation variance must be positive")
    accept = np.asarray(innovation, dtype=float) ** 2 <= cfg.threshold_gamma * s
    return bool(accept) if accept.ndim == 0 else accept
