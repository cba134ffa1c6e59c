"""Strang split-step integration of the scaled Hartree equation and cubic NLS.

Sign convention: (1/i) d_t phi - Laplacian phi + (v_N * |phi|^2) phi = 0, i.e.
i d_t phi = -Laplacian phi + (v_N * |phi|^2) phi.  The free flow multiplies the
Fourier coefficient at xi by exp(-i |xi|^2 t).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import GuardViolation, NumericalAbort
from .fitting import loglog_fit
from .potential import Profile, ScaledPotential, coupling_constant, sample_scaled
from .spectral import Field, Grid, forward_transform, kinetic_phase, norm, half_deriv_norm

logger = logging.getLogger(__name__)

__all__ = [
    "HartreeRun",
    "Propagator",
    "hartree_step",
    "nls_step",
    "energy",
    "evolve",
    "wraparound_horizon",
    "decay_fit",
    "is_admissible",
    "strichartz_window_norm",
    "hartree_to_nls_distance",
    "smallness_indicator",
]

Interaction = Union[ScaledPotential, float, None]


class Propagator:
    """Precomputed Strang step for one grid, interaction and step size.

    ``interaction`` is a ScaledPotential (Hartree), a float coupling g (cubic
    NLS) or None (free flow).
    """

    def __init__(self, grid: Grid, interaction: Interaction, dt: float):
        if not (np.isfinite(dt) and dt != 0):
            raise ValueError(f"time step must be finite and nonzero, got {dt}")
        self.grid = grid
        self.dt = dt
        self.half = kinetic_phase(grid, dt / 2)
        self.vhat = None
        self.g = 0.0
        if isinstance(interaction, ScaledPotential):
            if not interaction.grid.same_as(grid):
                raise ValueError("potential sampled on a different grid")
            self.vhat = np.fft.fftn(np.fft.ifftshift(interaction.values)) * grid.cell_volume
        elif interaction is not None:
            self.g = float(interaction)

    def mean_field(self, u: np.ndarray) -> np.ndarray:
        rho = np.abs(u) ** 2
        if self.vhat is not None:
            return np.fft.ifftn(self.vhat * np.fft.fftn(rho)).real
        return self.g * rho

    def step(self, u: np.ndarray) -> np.ndarray:
        u = np.fft.ifftn(np.fft.fftn(u) * self.half)
        if self.vhat is not None or self.g != 0.0:
            with np.errstate(over="ignore", invalid="ignore"):
                u = u * np.exp(-1j * self.dt * self.mean_field(u))
        u = np.fft.ifftn(np.fft.fftn(u) * self.half)
        if not np.all(np.isfinite(u)):
            raise NumericalAbort("non-finite values in split step")
        return u

    def run(self, u: np.ndarray, n_steps: int) -> np.ndarray:
        for _ in range(n_steps):
            u = self.step(u)
        return u


def hartree_step(phi: Field, v: ScaledPotential, dt: float) -> Field:
    """One Strang step: half free flight, full mean-field phase, half free flight."""
    return phi.with_values(Propagator(phi.grid, v, dt).step(phi.values))


def nls_step(phi: Field, g: float, dt: float) -> Field:
    """Strang step for the cubic equation with nonlinear phase exp(-i dt g |phi|^2)."""
    return phi.with_values(Propagator(phi.grid, float(g), dt).step(phi.values))


def energy(phi: Field, interaction: Interaction) -> float:
    """E = int |grad phi|^2 + 1/2 int (v_N * |phi|^2) |phi|^2 (cubic: g/2 int |phi|^4)."""
    g = phi.grid
    c = forward_transform(phi)
    kinetic = float(np.sum(g.k2 * np.abs(c) ** 2) * g.length**g.dim)
    if interaction is None:
        return kinetic
    rho = np.abs(phi.values) ** 2
    if isinstance(interaction, ScaledPotential):
        pot = Propagator(g, interaction, 1.0).mean_field(phi.values)
    else:
        pot = float(interaction) * rho
    return kinetic + 0.5 * float(np.sum(pot * rho) * g.cell_volume)


@dataclass
class HartreeRun:
    """Time series of observables recorded along one trajectory."""

    grid: Grid
    interaction: Interaction
    initial: Field
    dt: float
    t_end: float
    record_every: int
    times: list = field(default_factory=list)
    mass: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    linf: list = field(default_factory=list)
    h_half: list = field(default_factory=list)
    fields: list = field(default_factory=list)
    final: Field | None = None

    def rows(self):
        return zip(self.times, self.mass, self.energy, self.linf, self.h_half)


def evolve(
    phi0: Field,
    interaction: Interaction,
    dt: float,
    t_end: float,
    record_every: int = 1,
    keep_fields: bool = False,
) -> HartreeRun:
    """Integrate to t_end with fixed step dt, recording every ``record_every`` steps."""
    n_steps = int(round(t_end / dt))
    if n_steps < 0 or abs(n_steps * dt - t_end) > 1e-9 * max(1.0, abs(t_end)):
        raise ValueError(f"t_end={t_end} is not a multiple of dt={dt}")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    prop = Propagator(phi0.grid, interaction, dt) if n_steps else None
    run = HartreeRun(phi0.grid, interaction, phi0, dt, t_end, record_every)

    def record(t, u):
        f = phi0.with_values(u)
        run.times.append(t)
        run.mass.append(f.mass)
        run.energy.append(energy(f, interaction))
        run.linf.append(float(np.max(np.abs(u))))
        run.h_half.append(half_deriv_norm(f))
        if keep_fields:
            run.fields.append(f)

    u = phi0.values
    record(0.0, u)
    for n in range(1, n_steps + 1):
        u = prop.step(u)
        if n % record_every == 0 or n == n_steps:
            record(n * dt, u)
    run.final = phi0.with_values(u)
    return run


def wraparound_horizon(phi0: Field, fraction: float = 0.99) -> float:
    """T_max = L / (4 v_max), v_max = 2 |xi| at the radius holding ``fraction`` of the spectral mass."""
    g = phi0.grid
    c2 = np.abs(forward_transform(phi0)).ravel() ** 2
    kabs = np.sqrt(g.k2).ravel()
    order = np.argsort(kabs, kind="stable")
    cum = np.cumsum(c2[order])
    idx = int(np.searchsorted(cum, fraction * cum[-1]))
    xi = kabs[order][min(idx, kabs.size - 1)]
    if xi == 0:
        return np.inf
    return g.length / (4 * 2 * xi)


def decay_fit(
    times: Sequence[float],
    linf: Sequence[float],
    window: tuple[float, float],
    horizon: float | None = None,
) -> tuple[float, float, float]:
    """Least-squares slope of log ||phi(t)||_inf against log t inside ``window``."""
    t0, t1 = window
    if horizon is not None and t1 > horizon:
        raise GuardViolation(f"fit window ends at t={t1:g}, past the wrap-around horizon {horizon:g}")
    t = np.asarray(times, dtype=float)
    y = np.asarray(linf, dtype=float)
    sel = (t >= t0) & (t <= t1) & (t > 0)
    if np.count_nonzero(sel) < 8:
        raise ValueError(f"decay fit needs at least 8 samples in the window, got {np.count_nonzero(sel)}")
    return loglog_fit(list(zip(t[sel], y[sel])))


def is_admissible(q: float, r: float, dim: int) -> bool:
    if q < 2 or r < 2:
        return False
    if dim == 2 and q == 2 and r == np.inf:
        return False
    lhs = (0.0 if q == np.inf else 2.0 / q) + (0.0 if r == np.inf else dim / r)
    return abs(lhs - dim / 2) < 1e-12


def strichartz_window_norm(run: HartreeRun, q: float, r: float, window: tuple[float, float]) -> float:
    """(int_window ||phi(t)||_{L^r}^q dt)^(1/q) by trapezoidal quadrature over recorded fields."""
    if not is_admissible(q, r, run.grid.dim):
        raise ValueError(f"(q, r)=({q}, {r}) is not admissible in dimension {run.grid.dim}")
    if not run.fields:
        raise ValueError("strichartz_window_norm needs a run recorded with keep_fields=True")
    t = np.asarray(run.times)
    sel = (t >= window[0]) & (t <= window[1])
    vals = np.array([norm(f, r) for f, s in zip(run.fields, sel) if s])
    if vals.size == 0:
        return 0.0
    if q == np.inf:
        return float(np.max(vals))
    if vals.size == 1:
        return 0.0
    return float(np.trapezoid(vals**q, t[sel]) ** (1.0 / q))


def smallness_indicator(phi0: Field, v: ScaledPotential | Profile) -> float:
    """||phi0||_{H^1/2} * ||v||_{L^1}; runs above the configured threshold are exploratory."""
    if isinstance(v, Profile):
        l1 = abs(coupling_constant(v, phi0.grid.dim))
    else:
        l1 = v.l1_norm()
    return half_deriv_norm(phi0) * l1


def warn_if_large(phi0: Field, v, threshold: float = 1.0) -> bool:
    size = smallness_indicator(phi0, v)
    if size > threshold:
        warnings.warn(
            f"data size indicator {size:.3g} exceeds {threshold:g}; run is exploratory",
            RuntimeWarning,
            stacklevel=2,
        )
        return True
    return False


def hartree_to_nls_distance(
    phi0: Field,
    profile: Profile,
    beta: float,
    N_list: Sequence[int],
    t: float,
    dt: float = 1e-3,
    min_points: int = 8,
) -> list[tuple[int, float]]:
    """L2 distance at time t between the scaled Hartree flow and the limiting cubic flow."""
    grid = phi0.grid
    potentials = [sample_scaled(profile, N, beta, grid, min_points) for N in N_list]
    n_steps = int(round(t / dt))
    g = coupling_constant(profile, grid.dim)
    ref = Propagator(grid, g, dt).run(phi0.values, n_steps)
    out = []
    for N, v in zip(N_list, potentials):
        u = Propagator(grid, v, dt).run(phi0.values, n_steps)
        d = float(np.sqrt(np.sum(np.abs(u - ref) ** 2) * grid.cell_volume))
        logger.debug("N=%d hartree-nls distance %.3e", N, d)
        out.append((int(N), d))
    return out
