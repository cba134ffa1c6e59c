"""Least-squares power-law fits and step-size convergence ratios."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = ["loglog_fit", "convergence_ratios"]


def loglog_fit(points: Sequence[tuple[float, float]]) -> tuple[float, float, float]:
    """Fit log y = slope * log x + intercept.

    Returns (slope, intercept, residual) with residual the RMS misfit in log y.
    """
    pts = list(points)
    if len(pts) < 2:
        raise ValueError(f"need at least 2 points for a log-log fit, got {len(pts)}")
    x = np.array([p[0] for p in pts], dtype=float)
    y = np.array([p[1] for p in pts], dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit requires strictly positive values")
    lx, ly = np.log(x), np.log(y)
    A = np.vstack([lx, np.ones_like(lx)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = float(np.sqrt(np.mean((A @ [slope, intercept] - ly) ** 2)))
    return float(slope), float(intercept), resid


def convergence_ratios(
    solve: Callable[[float], np.ndarray],
    dt: float,
    levels: int = 2,
    refine: int = 16,
    weight: float = 1.0,
) -> tuple[list[float], list[float]]:
    """Self-convergence study against a reference computed at dt / refine.

    ``solve(h)`` returns the state at the fixed final time using step h.
    Returns (errors, ratios) for h = dt, dt/2, ...; a second-order method
    gives ratios near 4.
    """
    ref = solve(dt / refine)
    errs = []
    for lev in range(levels):
        u = solve(dt / 2**lev)
        errs.append(float(np.sqrt(np.sum(np.abs(u - ref) ** 2) * weight)))
    ratios = [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]
    return errs, ratios
