"""Calibration toolkit for UWB double-sided two-way ranging.

Modules:
    twr: ranging arithmetic and analytic error models.
    sim: seeded multi-robot ranging simulator.
    delaycal: antenna-delay estimation by robust least squares.
    powercal: bias and spread curves over lifted first-path power.
    gating: chi-squared tests.
    ekf: range-only position filter.
    cli: command-line pipeline.
"""

from .errors import UwbCalError

__version__ = "0.1.0"
__all__ = ["UwbCalError", "__version__"]
