"""Exact N-body dynamics in 1D for small N, one-particle marginals and Pickl's functional.

The N-body equation is i d_t Psi = (-sum_j Laplacian_j + (1/N) sum_{i<j} v_N(x_i - x_j)) Psi,
the same sign convention as the Hartree solver, so the mean-field limit of a
factorised state is the Hartree flow with v_N.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.fft as sfft
from scipy.linalg import lu_factor, lu_solve

from .errors import GuardViolation, NumericalAbort
from .fitting import loglog_fit
from .hartree import Propagator
from .potential import Profile, ScaledPotential, sample_scaled
from .spectral import Field, Grid, forward_transform, laplacian_matrix, norm

logger = logging.getLogger(__name__)

__all__ = [
    "ManyBodyState",
    "Marginal",
    "ManyBodySolver",
    "MemoryGuardError",
    "DEFAULT_MAX_BYTES",
    "factorized_state",
    "mb_step",
    "evolve_manybody",
    "mb_energy",
    "symmetry_defect",
    "marginal",
    "trace_distance",
    "operator_norm_distance",
    "excitation_weights",
    "excitation_weights_enumerated",
    "pickl_alpha",
    "delta_lambda",
    "scan_delta",
    "MeanFieldTrace",
    "mean_field_trace",
    "pickl_bound",
    "calibrate_cv",
    "RateReport",
    "rate_fit",
    "crank_nicolson_two_body",
]

DEFAULT_MAX_BYTES = 1 << 30  # one complex tensor; the solver holds about three


class MemoryGuardError(GuardViolation):
    """The M^N tensor would exceed the configured memory cap."""


def check_memory(M: int, N: int, max_bytes: int = DEFAULT_MAX_BYTES) -> int:
    need = 16 * M**N
    if need > max_bytes:
        raise MemoryGuardError(
            f"M={M}, N={N} needs 16*M^N = {need} bytes ({need / 2**20:.0f} MiB) per tensor, cap is {max_bytes} bytes"
        )
    return need


@dataclass(frozen=True)
class ManyBodyState:
    grid: Grid
    N: int
    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        if self.grid.dim != 1:
            raise ValueError("many-body states are 1D only")
        if not 2 <= self.N <= 5:
            raise ValueError(f"N must be in [2, 5], got {self.N}")
        if self.values.shape != (self.grid.points,) * self.N:
            raise ValueError(f"tensor shape {self.values.shape} does not match M={self.grid.points}, N={self.N}")

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.vdot(self.values, self.values).real * self.grid.dx**self.N))

    @property
    def normalized(self) -> bool:
        return abs(self.norm - 1.0) < 1e-10


@dataclass(frozen=True)
class Marginal:
    """One-particle density matrix gamma(x, x') = int Psi(x, X) conj(Psi(x', X)) dX."""

    grid: Grid
    matrix: np.ndarray

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix).real * self.grid.dx)

    def hermiticity_defect(self) -> float:
        return float(np.max(np.abs(self.matrix - self.matrix.conj().T)))

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(0.5 * (self.matrix + self.matrix.conj().T) * self.grid.dx)


def factorized_state(phi: Field, N: int, max_bytes: int = DEFAULT_MAX_BYTES) -> ManyBodyState:
    """phi(x_1) ... phi(x_N); phi must have unit L2 norm."""
    if phi.grid.dim != 1:
        raise ValueError("many-body states are 1D only")
    if abs(phi.mass - 1.0) > 1e-10:
        raise ValueError(f"phi must be normalised, ||phi||^2 = {phi.mass:.12g}")
    check_memory(phi.grid.points, N, max_bytes)
    u = phi.values
    m = phi.grid.points
    # multiply factors in sorted index order so that every permutation of
    # the coordinates yields bitwise the same product
    idx = np.sort(np.indices((m,) * N, dtype=np.int16).reshape(N, -1), axis=0)
    out = u[idx[0]]
    for j in range(1, N):
        out *= u[idx[j]]
    return ManyBodyState(phi.grid, N, out.reshape((m,) * N))


def symmetry_defect(state: ManyBodyState) -> float:
    """Max deviation under swapping adjacent coordinates."""
    psi = state.values
    return max((float(np.max(np.abs(psi - np.swapaxes(psi, j, j + 1)))) for j in range(state.N - 1)), default=0.0)


def _pair_sum(v: ScaledPotential, N: int) -> np.ndarray:
    g = v.grid
    m = g.points
    idx = np.arange(m)
    d = (idx[:, None] - idx[None, :]) % m
    d = np.minimum(d, m - d)
    table = v.at(d * g.dx)
    total = np.zeros((m,) * N)
    for i, j in itertools.combinations(range(N), 2):
        shape = [1] * N
        shape[i] = m
        shape[j] = m
        total += table.reshape(shape)
    return total


class ManyBodySolver:
    """Strang split-step for the N-body equation on one grid.

    Kinetic phases are applied axis by axis (no M^N multiplier is stored); the
    pair-potential phase is precomputed once.
    """

    def __init__(self, v: ScaledPotential, N: int, dt: float, max_bytes: int = DEFAULT_MAX_BYTES):
        g = v.grid
        if g.dim != 1:
            raise ValueError("many-body solver is 1D only")
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        check_memory(g.points, N, max_bytes)
        self.grid = g
        self.N = N
        self.dt = dt
        self.v = v
        k2 = g.wavenumbers**2
        self.half = np.exp(-1j * k2 * dt / 2)
        self.full = np.exp(-1j * k2 * dt)
        self.free = v.profile.is_zero or N < 2
        self.vphase = None if self.free else np.exp(-1j * dt / N * _pair_sum(v, N))

    def _kinetic(self, uhat: np.ndarray, phase: np.ndarray) -> None:
        m = self.grid.points
        for ax in range(self.N):
            shape = [1] * self.N
            shape[ax] = m
            uhat *= phase.reshape(shape)

    def _fft(self, u):
        return sfft.fftn(u, overwrite_x=True, workers=-1)

    def _ifft(self, u):
        return sfft.ifftn(u, overwrite_x=True, workers=-1)

    def run(self, psi: np.ndarray, n_steps: int, record=None, record_every: int = 0) -> np.ndarray:
        """Advance ``n_steps`` fused Strang steps; ``record(n, psi)`` is called every ``record_every`` steps."""
        u = np.array(psi, dtype=complex, copy=True)
        if n_steps == 0:
            return u
        u = self._fft(u)
        self._kinetic(u, self.half)
        for n in range(1, n_steps + 1):
            u = self._ifft(u)
            if self.vphase is not None:
                u *= self.vphase
            u = self._fft(u)
            stop = n == n_steps or (record is not None and record_every and n % record_every == 0)
            if stop:
                self._kinetic(u, self.half)
                u = self._ifft(u)
                if not np.all(np.isfinite(u)):
                    raise NumericalAbort(f"non-finite many-body state at step {n}")
                if record is not None:
                    record(n, u)
                if n == n_steps:
                    return u
                u = self._fft(u)
                self._kinetic(u, self.half)
            else:
                self._kinetic(u, self.full)
        return u

    def step(self, state: ManyBodyState) -> ManyBodyState:
        return ManyBodyState(self.grid, self.N, self.run(state.values, 1), state.t + self.dt)


def mb_step(state: ManyBodyState, v: ScaledPotential, dt: float, max_bytes: int = DEFAULT_MAX_BYTES) -> ManyBodyState:
    return ManyBodySolver(v, state.N, dt, max_bytes).step(state)


def evolve_manybody(
    state: ManyBodyState,
    v: ScaledPotential,
    dt: float,
    t_end: float,
    record_every: int = 0,
    observer=None,
    max_bytes: int = DEFAULT_MAX_BYTES,
) -> ManyBodyState:
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError(f"t_end={t_end} is not a multiple of dt={dt}")
    solver = ManyBodySolver(v, state.N, dt, max_bytes)

    def rec(n, u):
        if observer is not None:
            observer(ManyBodyState(state.grid, state.N, u, state.t + n * dt))

    u = solver.run(state.values, n_steps, rec if observer else None, record_every)
    return ManyBodyState(state.grid, state.N, u, state.t + n_steps * dt)


def mb_energy(state: ManyBodyState, v: ScaledPotential) -> float:
    """<Psi, (-sum Laplacian + (1/N) sum_{i<j} v_N) Psi>."""
    g = state.grid
    N = state.N
    m = g.points
    psi = state.values
    uhat = np.fft.fftn(psi)
    p2 = np.abs(uhat) ** 2
    k2 = g.wavenumbers**2
    kin = 0.0
    for ax in range(N):
        shape = [1] * N
        shape[ax] = m
        kin += float(np.sum(p2 * k2.reshape(shape)))
    kin *= g.dx**N / m**N
    pot = 0.0
    if not v.profile.is_zero and N > 1:
        pot = float(np.sum(_pair_sum(v, N) * np.abs(psi) ** 2) * g.dx**N) / N
    return kin + pot


def marginal(state: ManyBodyState) -> Marginal:
    g = state.grid
    A = state.values.reshape(g.points, -1)
    gamma = (A @ A.conj().T) * g.dx ** (state.N - 1)
    return Marginal(g, gamma)


def _difference_operator(gamma: Marginal, phi: Field) -> np.ndarray:
    u = phi.values
    D = (gamma.matrix - np.outer(u, u.conj())) * gamma.grid.dx
    return 0.5 * (D + D.conj().T)


def trace_distance(gamma: Marginal, phi: Field) -> float:
    """Tr |gamma - |phi><phi||, from a Hermitian eigendecomposition."""
    lam = np.linalg.eigvalsh(_difference_operator(gamma, phi))
    return float(np.sum(np.abs(lam)))


def operator_norm_distance(gamma: Marginal, phi: Field) -> float:
    lam = np.linalg.eigvalsh(_difference_operator(gamma, phi))
    return float(np.max(np.abs(lam)))


def _rotation(phi: Field) -> np.ndarray:
    """Unitary U (Householder) with U phi_n = e_0 up to a phase, phi_n = phi sqrt(dx) / ||phi||."""
    u = phi.values * np.sqrt(phi.grid.dx)
    u = u / np.linalg.norm(u)
    alpha = -np.exp(1j * np.angle(u[0])) if u[0] != 0 else -1.0
    w = u.copy()
    w[0] -= alpha
    nw = np.linalg.norm(w)
    H = np.eye(u.size, dtype=complex)
    if nw > 1e-14:
        w /= nw
        H -= 2 * np.outer(w, w.conj())
    return H


def excitation_weights(state: ManyBodyState, phi: Field) -> np.ndarray:
    """w_k = <Psi, P_k Psi>, k = 0..N, the distribution of the number of particles outside phi."""
    g = state.grid
    N = state.N
    H = _rotation(phi)
    c = state.values * np.sqrt(g.dx) ** N
    for ax in range(N):
        c = np.moveaxis(np.tensordot(H, c, axes=([1], [ax])), 0, ax)
    prob = np.abs(c) ** 2
    # occupation count of "not phi" indices along each axis
    m = g.points
    out = np.zeros(N + 1)
    nz = np.zeros((m,) * N, dtype=np.int8)
    excited = (np.arange(m) != 0).astype(np.int8)
    for ax in range(N):
        shape = [1] * N
        shape[ax] = m
        nz = nz + excited.reshape(shape)
    out += np.bincount(nz.ravel(), weights=prob.ravel(), minlength=N + 1)
    return out


def excitation_weights_enumerated(state: ManyBodyState, phi: Field) -> np.ndarray:
    """Same weights by applying every product of p and q projectors (2^N terms)."""
    g = state.grid
    N = state.N
    u = phi.values
    w = np.zeros(N + 1)
    for a in itertools.product((0, 1), repeat=N):
        x = state.values
        for ax, q in enumerate(a):
            proj = np.tensordot(u.conj() * g.dx, x, axes=([0], [ax]))
            pp = np.moveaxis(np.multiply.outer(u, proj), 0, ax)
            x = x - pp if q else pp
        w[sum(a)] += float(np.vdot(x, x).real * g.dx**N)
    return w


def _m_lambda(k: np.ndarray, N: int, lam: float) -> np.ndarray:
    thr = float(N) ** lam
    return np.where(k <= thr, k / thr, 1.0)


@dataclass(frozen=True)
class PicklValue:
    alpha_lambda: float
    alpha: float
    weights: np.ndarray


def pickl_alpha(state: ManyBodyState, phi: Field, lam: float) -> PicklValue:
    """alpha_N^lambda = sum_k m^lambda(k) w_k, plus alpha_N = ||q_1 Psi||^2 = sum_k (k/N) w_k."""
    if not 0 < lam <= 1:
        raise ValueError(f"lambda must lie in (0, 1], got {lam}")
    w = excitation_weights(state, phi)
    k = np.arange(state.N + 1)
    al = float(np.sum(_m_lambda(k, state.N, lam) * w))
    a1 = float(np.sum(k / state.N * w))
    return PicklValue(max(al, 0.0), max(a1, 0.0), w)


def delta_lambda(lam: float, beta: float) -> float:
    return 0.5 * max(1 - lam - 4 * beta, 3 * beta - lam, -1 + lam + 3 * beta)


def scan_delta(beta: float, samples: int = 10001) -> tuple[float, float]:
    """Minimise delta_lambda over lambda in (0, 1]: uniform grid plus the exact breakpoints."""
    lams = list(np.linspace(0.0, 1.0, samples)[1:])
    top = max(1 - 4 * beta, 3 * beta)
    lams += [1 - 3.5 * beta, 0.5, 0.5 * (top + 1 - 3 * beta), 1.0]
    lams = [x for x in lams if 0 < x <= 1]
    vals = [delta_lambda(x, beta) for x in lams]
    i = int(np.argmin(vals))
    return float(lams[i]), float(vals[i])


@dataclass
class MeanFieldTrace:
    times: np.ndarray
    linf: np.ndarray
    lap_rho: np.ndarray  # ||Laplacian |phi|^2||_L2

    def integral_linf2(self, upto: float) -> float:
        sel = self.times <= upto + 1e-12
        t, y = self.times[sel], self.linf[sel] ** 2
        return float(np.trapezoid(y, t)) if t.size > 1 else 0.0

    def sup_K(self, cv: float, upto: float) -> float:
        sel = self.times <= upto + 1e-12
        k = cv * (self.lap_rho[sel] + self.linf[sel] + 1.0) * self.linf[sel]
        return float(np.max(k))


def _lap_rho_norm(f: Field) -> float:
    rho = Field(f.grid, np.abs(f.values) ** 2)
    c = forward_transform(rho)
    return float(np.sqrt(np.sum((f.grid.k2**2) * np.abs(c) ** 2) * f.grid.length**f.grid.dim))


def mean_field_trace(fields: Sequence[Field], times: Sequence[float]) -> MeanFieldTrace:
    return MeanFieldTrace(
        np.asarray(times, float),
        np.array([norm(f, np.inf) for f in fields]),
        np.array([_lap_rho_norm(f) for f in fields]),
    )


def pickl_bound(trace: MeanFieldTrace, t: float, N: int, beta: float, lam: float, cv: float, alpha0: float = 0.0) -> float:
    """exp(C_v int ||phi||_inf^2) alpha(0) + [exp(C_v int ||phi||_inf^2) - 1] sup K N^delta."""
    growth = math.exp(cv * trace.integral_linf2(t))
    if t <= 0:
        return alpha0
    return growth * alpha0 + (growth - 1.0) * trace.sup_K(cv, t) * float(N) ** delta_lambda(lam, beta)


def calibrate_cv(trace: MeanFieldTrace, t: float, N: int, beta: float, lam: float, alpha_meas: float, alpha0: float = 0.0) -> float:
    """Smallest C_v (bisection) with pickl_bound >= alpha_meas at (t, N)."""
    if alpha_meas <= alpha0 or t <= 0:
        return 0.0

    def f(cv):
        return pickl_bound(trace, t, N, beta, lam, cv, alpha0) - alpha_meas

    lo, hi = 0.0, 1.0
    while f(hi) < 0:
        hi *= 2
        if hi > 1e6:
            raise NumericalAbort("could not bracket C_v")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-14 * hi:
            break
    return hi


@dataclass
class RateReport:
    N_list: list
    t: float
    beta: float
    lam: float
    delta: float
    distances: list
    alphas: list
    alphas_lambda: list
    slope: float | None
    cv: float
    bounds: list
    bound_ok: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "N": list(self.N_list),
            "t": self.t,
            "beta": self.beta,
            "lambda": self.lam,
            "delta_lambda": self.delta,
            "trace_distance": list(self.distances),
            "alpha": list(self.alphas),
            "alpha_lambda": list(self.alphas_lambda),
            "slope": self.slope,
            "C_v": self.cv,
            "pickl_bound": list(self.bounds),
            "bound_ok": list(self.bound_ok),
            "notes": list(self.notes),
        }


def rate_fit(
    N_list: Sequence[int],
    t: float,
    beta: float,
    phi0: Field,
    profile: Profile,
    dt: float = 0.01,
    lam: float | None = None,
    max_bytes: int = DEFAULT_MAX_BYTES,
    min_points: int = 8,
    record_every: int = 5,
) -> RateReport:
    """Full pipeline per N: evolve Psi_N and phi_t, marginal, trace distance, alpha; fit log d vs log N."""
    N_list = sorted(int(n) for n in N_list)
    if any(n > 5 or n < 2 for n in N_list):
        raise ValueError("rate_fit supports 2 <= N <= 5")
    g = phi0.grid
    for n in N_list:
        check_memory(g.points, n, max_bytes)
    if lam is None:
        lam, delta = scan_delta(beta)
    else:
        delta = delta_lambda(lam, beta)
    n_steps = int(round(t / dt))
    dists, alphas, alphas_l, traces = [], [], [], []
    for n in N_list:
        v = sample_scaled(profile, n, beta, g, min_points)
        prop = Propagator(g, v, dt)
        fields, times = [phi0], [0.0]
        u = phi0.values
        for k in range(1, n_steps + 1):
            u = prop.step(u)
            if k % record_every == 0 or k == n_steps:
                fields.append(phi0.with_values(u))
                times.append(k * dt)
        phit = fields[-1]
        psi = evolve_manybody(factorized_state(phi0, n, max_bytes), v, dt, n_steps * dt, max_bytes=max_bytes)
        gam = marginal(psi)
        d = trace_distance(gam, phit)
        pa = pickl_alpha(psi, phit, lam)
        dists.append(d)
        alphas.append(pa.alpha)
        alphas_l.append(pa.alpha_lambda)
        traces.append(mean_field_trace(fields, times))
        logger.info("N=%d trace distance %.4e alpha %.4e alpha^lambda %.4e", n, d, pa.alpha, pa.alpha_lambda)
        del psi
    notes = []
    slope = None
    if len(N_list) < 2:
        notes.append("slope not applicable: a single N")
    elif all(d > 1e-8 for d in dists):
        slope = loglog_fit(list(zip(N_list, dists)))[0]
    else:
        notes.append("slope not applicable: distances at round-off level")
    cv = calibrate_cv(traces[0], t, N_list[0], beta, lam, alphas_l[0])
    bounds = [pickl_bound(tr, t, n, beta, lam, cv) for tr, n in zip(traces, N_list)]
    ok = [a <= b * (1 + 1e-12) for a, b in zip(alphas_l, bounds)]
    notes.append(f"C_v calibrated at N={N_list[0]}; bound checks are up to this constant")
    return RateReport(N_list, t, beta, lam, delta, dists, alphas, alphas_l, slope, cv, bounds, ok, notes)


def crank_nicolson_two_body(phi0: Field, v: ScaledPotential, dt: float, t_end: float) -> np.ndarray:
    """Dense Crank-Nicolson reference for N = 2 (independent of the split-step code path)."""
    g = phi0.grid
    m = g.points
    if m > 64:
        raise ValueError("dense two-body reference is limited to M <= 64")
    D = laplacian_matrix(g)
    eye = np.eye(m)
    H = -(np.kron(D, eye) + np.kron(eye, D))
    idx = np.arange(m)
    d = np.abs(idx[:, None] - idx[None, :])
    d = np.minimum(d, m - d)
    H = H + np.diag(v.at(d * g.dx).ravel() / 2)
    A = np.eye(m * m) + 0.5j * dt * H
    B = np.eye(m * m) - 0.5j * dt * H
    lu = lu_factor(A)
    psi = np.outer(phi0.values, phi0.values).ravel()
    for _ in range(int(round(t_end / dt))):
        psi = lu_solve(lu, B @ psi)
    return psi.reshape(m, m)
