"""Penalised cubic regression splines with cross-validated smoothing.

The fit minimises ``sum w (y - f(x))^2 + lam * int f''(x)^2 dx`` over cubic
B-splines whose breakpoints sit at equally spaced quantiles of ``x``. The
roughness integral is exact: ``f''`` is piecewise linear, so two-point
Gauss-Legendre quadrature on each knot interval integrates its square
without error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from .errors import InsufficientData

DEGREE = 3
DEFAULT_LAMBDA_GRID = tuple(10.0 ** np.arange(-8.0, 4.01, 0.5))


@dataclass(frozen=True)
class ClampedSpline:
    """Cubic B-spline evaluated with its argument clamped to ``[lo, hi]``."""

    knots: np.ndarray
    coef: np.ndarray
    lo: float
    hi: float

    def __post_init__(self):
        object.__setattr__(self, "knots", np.asarray(self.knots, dtype=float))
        object.__setattr__(self, "coef", np.asarray(self.coef, dtype=float))
        if len(self.knots) != len(self.coef) + DEGREE + 1:
            raise ValueError("knot and coefficient counts are inconsistent")
        if not self.lo < self.hi:
            raise ValueError("empty spline domain")

    def __call__(self, x):
        xc = np.clip(np.asarray(x, dtype=float), self.lo, self.hi)
        return BSpline(self.knots, self.coef, DEGREE, extrapolate=False)(xc)

    def derivative_at(self, x, nu: int = 1):
        xc = np.clip(np.asarray(x, dtype=float), self.lo, self.hi)
        return BSpline(self.knots, self.coef, DEGREE).derivative(nu)(xc)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClampedSpline):
            return NotImplemented
        return (
            np.array_equal(self.knots, other.knots)
            and np.array_equal(self.coef, other.coef)
            and self.lo == other.lo
            and self.hi == other.hi
        )


def quantile_knots(x: np.ndarray, n_breaks: int = 15) -> np.ndarray:
    """Full clamped knot vector with breakpoints at quantiles of ``x``."""
    breaks = np.unique(np.quantile(x, np.linspace(0.0, 1.0, n_breaks)))
    if len(breaks) < 2:
        raise InsufficientData("abscissae are all identical")
    return np.concatenate([np.repeat(breaks[0], DEGREE), breaks, np.repeat(breaks[-1], DEGREE)])


def design_matrix(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    lo, hi = knots[DEGREE], knots[-DEGREE - 1]
    xc = np.clip(np.asarray(x, dtype=float), lo, hi)
    return BSpline.design_matrix(xc, knots, DEGREE).toarray()


def roughness_penalty(knots: np.ndarray) -> np.ndarray:
    """Gram matrix of second derivatives, ``int B_a'' B_b'' dx``."""
    n = len(knots) - DEGREE - 1
    breaks = np.unique(knots)
    a, b = breaks[:-1], breaks[1:]
    half, mid = 0.5 * (b - a), 0.5 * (a + b)
    g = 1.0 / np.sqrt(3.0)
    pts = np.concatenate([mid - g * half, mid + g * half])
    wts = np.concatenate([half, half])
    d2 = BSpline(knots, np.eye(n), DEGREE).derivative(2)(pts)
    return (d2 * wts[:, None]).T @ d2


def _solve(gram: np.ndarray, rhs: np.ndarray, pen: np.ndarray, lam: float) -> np.ndarray:
    a = gram + lam * pen
    # tiny ridge keeps empty-support coefficients determined
    a = a + 1e-12 * np.trace(gram) / len(gram) * np.eye(len(gram))
    return linalg.solve(a, rhs, assume_a="pos")


@dataclass(frozen=True)
class SmoothingFit:
    spline: ClampedSpline
    lam: float
    cv_scores: np.ndarray
    lambda_grid: np.ndarray


def fit_smoothing_spline(
    x,
    y,
    n_breaks: int = 15,
    lambda_grid: Optional[Sequence[float]] = None,
    n_folds: int = 5,
    weights=None,
    min_coef: Optional[float] = None,
) -> SmoothingFit:
    """Fit a penalised cubic spline, choosing the smoothing weight by K-fold CV.

    ``lambda_grid`` is relative: each entry is multiplied by
    ``trace(B'WB) / trace(Omega)`` so the grid is insensitive to the scale of
    ``x`` and the sample count. Fold membership is ``k mod n_folds`` in input
    order, so the fit is a deterministic function of its inputs.

    Args:
        x: Abscissae.
        y: Observations.
        n_breaks: Number of quantile breakpoints, endpoints included.
        lambda_grid: Relative smoothing weights to try.
        n_folds: Cross-validation folds.
        weights: Optional per-sample weights.
        min_coef: If given, coefficients are clipped from below, which bounds
            the spline from below by the same value everywhere.

    Raises:
        InsufficientData: fewer samples than folds times basis size.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    grid = np.asarray(DEFAULT_LAMBDA_GRID if lambda_grid is None else lambda_grid, dtype=float)
    knots = quantile_knots(x, n_breaks)
    n_basis = len(knots) - DEGREE - 1
    if len(x) < n_folds * n_basis:
        raise InsufficientData(f"{len(x)} samples too few for {n_basis} basis functions")

    B = design_matrix(x, knots)
    pen = roughness_penalty(knots)
    Bw = B * w[:, None]
    gram = Bw.T @ B
    rhs = Bw.T @ y
    scale = np.trace(gram) / max(np.trace(pen), 1e-300)

    fold = np.arange(len(x)) % n_folds
    fold_gram = [Bw[fold == k].T @ B[fold == k] for k in range(n_folds)]
    fold_rhs = [Bw[fold == k].T @ y[fold == k] for k in range(n_folds)]
    scores = np.empty(len(grid))
    for g, rel in enumerate(grid):
        sse = 0.0
        for k in range(n_folds):
            c = _solve(gram - fold_gram[k], rhs - fold_rhs[k], pen, rel * scale)
            m = fold == k
            sse += np.sum(w[m] * (y[m] - B[m] @ c) ** 2)
        scores[g] = sse / np.sum(w)
    best = int(np.argmin(scores))
    coef = _solve(gram, rhs, pen, grid[best] * scale)
    if min_coef is not None:
        coef = np.maximum(coef, min_coef)
    spline = ClampedSpline(knots, coef, float(knots[0]), float(knots[-1]))
    return SmoothingFit(spline, float(grid[best] * scale), scores, grid)
