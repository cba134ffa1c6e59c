"""Pair-excitation kernels s2 = sh(2k), p2 = ch(2k) - delta evolved with the Hartree flow.

All kernels live on a 1D grid; compositions are quadrature-weighted matrix
products.  The equations integrated are

    (1/i) d_t s2 + g^T o s2 + s2 o g  = m o (delta + p2) + (delta + conj p2) o m
    (1/i) d_t conj(p2) + [g^T, conj(p2)] = m o conj(s2) - s2 o conj(m)

with g = -Laplacian delta + (v_N * |phi|^2) delta + v_N(x - y) conj(phi(x)) phi(y)
and m = -v_N(x - y) phi(x) phi(y).  The second equation acts on the conjugate
of ch(2k); with that placement the flow preserves
(delta + conj p2) o (delta + conj p2) - s2 o conj(s2) = delta.  The Laplacian parts are integrated exactly
in Fourier space; the bounded remainder takes one RK4 step per time step with
phi frozen at the midpoint (Strang splitting of the extended system).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalAbort
from .hartree import Propagator
from .potential import ScaledPotential, pair_matrix
from .spectral import Field, Grid, Kernel, ch_series, convolve_arrays, laplacian_matrix, sh_series

__all__ = [
    "PairState",
    "PairIntegrator",
    "HalfAngle",
    "build_mN",
    "exchange_kernel",
    "apply_gN",
    "assemble_gN",
    "initial_state",
    "pair_step",
    "from_series",
    "bogoliubov_residual",
    "pair_norms",
    "half_angle",
    "error_term_norms",
    "error_term_bounds",
]


RESIDUAL_TOL = 1e-5


@dataclass(frozen=True)
class PairState:
    t: float
    phi: Field
    s2: Kernel
    p2: Kernel
    potential: ScaledPotential

    @property
    def grid(self) -> Grid:
        return self.phi.grid


def _mean_field(phi: np.ndarray, vmat: np.ndarray, dx: float) -> np.ndarray:
    return (vmat @ np.abs(phi) ** 2).real * dx


def _sym_outer(u: np.ndarray) -> np.ndarray:
    o = np.outer(u, u)
    return 0.5 * (o + o.T)  # bitwise symmetric


def build_mN(phi: Field, v: ScaledPotential) -> Kernel:
    """m_N(x, y) = -v_N(x - y) phi(x) phi(y)."""
    _same(phi.grid, v.grid)
    u = phi.values
    return Kernel(phi.grid, -pair_matrix(v) * _sym_outer(u))


def exchange_kernel(phi: Field, v: ScaledPotential) -> Kernel:
    """Bounded off-diagonal part of g_N: v_N(x - y) conj(phi(x)) phi(y)."""
    _same(phi.grid, v.grid)
    u = phi.values
    return Kernel(phi.grid, pair_matrix(v) * u.conj()[:, None] * u[None, :])


def _same(a: Grid, b: Grid) -> None:
    if not a.same_as(b):
        raise ValueError(f"grid mismatch: {a} vs {b}")


def _lap_axis(a: np.ndarray, grid: Grid, axis: int) -> np.ndarray:
    k2 = grid.wavenumbers**2
    shape = [1, 1]
    shape[axis] = -1
    return np.fft.ifft(-k2.reshape(shape) * np.fft.fft(a, axis=axis), axis=axis)


def apply_gN(phi: Field, v: ScaledPotential, K: Kernel, side: str) -> Kernel:
    """Matrix-free g_N action: ``side="left-transpose"`` gives g^T o K, ``"right"`` gives K o g."""
    _same(phi.grid, K.grid)
    g = K.grid
    dx = g.dx
    V = convolve_arrays(v.values, np.abs(phi.values) ** 2, g).real
    X = exchange_kernel(phi, v).values
    A = K.values
    if side == "left-transpose":
        out = -_lap_axis(A, g, 0) + V[:, None] * A + (X.T @ A) * dx
    elif side == "right":
        out = -_lap_axis(A, g, 1) + A * V[None, :] + (A @ X) * dx
    else:
        raise ValueError(f"side must be 'left-transpose' or 'right', got {side!r}")
    return Kernel(g, out)


def assemble_gN(phi: Field, v: ScaledPotential) -> Kernel:
    """Dense g_N kernel (test oracle; only sensible for small M)."""
    g = phi.grid
    if g.points > 64:
        raise ValueError("dense g_N assembly is limited to M <= 64")
    V = convolve_arrays(v.values, np.abs(phi.values) ** 2, g).real
    dense = (-laplacian_matrix(g) + np.diag(V)) / g.dx + exchange_kernel(phi, v).values
    return Kernel(g, dense)


def initial_state(phi0: Field, v: ScaledPotential) -> PairState:
    zero = Kernel(phi0.grid, np.zeros((phi0.grid.points,) * 2, complex))
    return PairState(0.0, phi0, zero, zero, v)


class PairIntegrator:
    """Fixed-step integrator for (phi, s2, p2) on one grid and potential."""

    def __init__(self, v: ScaledPotential, dt: float, tolerance: float | None = RESIDUAL_TOL, check_every: int = 10):
        g = v.grid
        if g.dim != 1:
            raise ValueError("pair excitations are implemented on 1D grids only")
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.grid = g
        self.v = v
        self.dt = dt
        self.vmat = pair_matrix(v)
        k2 = g.wavenumbers**2
        self.free_s = np.exp(-1j * (k2[:, None] + k2[None, :]) * dt / 2)
        self.free_p = np.exp(-1j * (k2[:, None] - k2[None, :]) * dt / 2)
        self.full = Propagator(g, v, dt)
        self.half = Propagator(g, v, dt / 2)
        self.tolerance = tolerance
        self.check_every = max(1, int(check_every))
        self._count = 0

    def rhs(self, S, R, phi):
        """Bounded part of the flow for (s2, conj p2)."""
        dx = self.grid.dx
        vm = self.vmat
        V = _mean_field(phi, vm, dx)
        X = vm * phi.conj()[:, None] * phi[None, :]
        m = -vm * _sym_outer(phi)
        XT = X.T
        dS = 2 * m + (m @ R.conj() + R @ m) * dx
        dS -= V[:, None] * S + S * V[None, :] + (XT @ S + S @ X) * dx
        dR = (m @ S.conj() - S @ m.conj()) * dx
        dR -= (V[:, None] - V[None, :]) * R + (XT @ R - R @ XT) * dx
        return 1j * dS, 1j * dR

    def _free(self, S, P):
        S = np.fft.ifft2(np.fft.fft2(S) * self.free_s)
        P = np.fft.ifft2(np.fft.fft2(P) * self.free_p)
        return S, P

    def step_arrays(self, phi, S, P):
        dt = self.dt
        S, R = self._free(S, P.conj())
        mid = self.half.step(phi)
        k1 = self.rhs(S, R, mid)
        k2 = self.rhs(S + 0.5 * dt * k1[0], R + 0.5 * dt * k1[1], mid)
        k3 = self.rhs(S + 0.5 * dt * k2[0], R + 0.5 * dt * k2[1], mid)
        k4 = self.rhs(S + dt * k3[0], R + dt * k3[1], mid)
        S = S + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        R = R + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        S, R = self._free(S, R)
        phi = self.full.step(phi)
        if not (np.all(np.isfinite(S)) and np.all(np.isfinite(R))):
            raise NumericalAbort("non-finite pair kernels")
        return phi, S, R.conj()

    def step(self, state: PairState) -> PairState:
        phi, S, P = self.step_arrays(state.phi.values, state.s2.values, state.p2.values)
        g = self.grid
        new = PairState(state.t + self.dt, Field(g, phi), Kernel(g, S), Kernel(g, P), self.v)
        self._count += 1
        if self.tolerance is not None and self._count % self.check_every == 0:
            r = bogoliubov_residual(new.s2, new.p2)
            if r > 100 * self.tolerance:
                raise NumericalAbort(f"Bogoliubov residual {r:.3e} exceeds 100 x {self.tolerance:.1e} at t={new.t:g}")
        return new


def pair_step(state: PairState, dt: float) -> PairState:
    """Advance phi by one Hartree step and (s2, p2) by one split step."""
    return PairIntegrator(state.potential, dt).step(state)


def bogoliubov_residual(s2: Kernel, p2: Kernel) -> float:
    """L2 norm of conj(ch) o conj(ch) - sh o conj(sh) - delta with ch = delta + p2, sh = s2.

    Kernels built from the sh/ch series of a symmetric k satisfy it exactly,
    and the pair flow preserves it.
    """
    _same(s2.grid, p2.grid)
    dx = s2.grid.dx
    S, P = s2.values, p2.values
    Pb = P.conj()
    R = 2 * Pb + (Pb @ Pb - S @ S.conj()) * dx
    return float(np.sqrt(np.sum(np.abs(R) ** 2)) * dx)


def from_series(k: Kernel, tol: float = 1e-13) -> tuple[Kernel, Kernel]:
    """(sh(2k), ch(2k) - delta) from the series of a symmetric kernel k."""
    k2 = Kernel(k.grid, 2 * k.values)
    return sh_series(k2, tol), ch_series(k2, tol)


def pair_norms(state: PairState) -> tuple[float, float]:
    dx = state.grid.dx
    return (
        float(np.sqrt(np.sum(np.abs(state.s2.values) ** 2)) * dx),
        float(np.sqrt(np.sum(np.abs(state.p2.values) ** 2)) * dx),
    )


@dataclass(frozen=True)
class HalfAngle:
    """sh(k), ch(k) - delta and k itself, recovered from (s2, p2)."""

    sh: Kernel
    p1: Kernel
    k: Kernel
    condition: float
    consistency: float


def _hermitian_function(A: np.ndarray, f) -> np.ndarray:
    A = 0.5 * (A + A.conj().T)
    w, U = np.linalg.eigh(A)
    return (U * f(w)) @ U.conj().T


def half_angle(s2: Kernel, p2: Kernel) -> HalfAngle:
    """Recover sh(k) and k from s2 = sh(2k), p2 = ch(2k) - delta.

    With R = (k k*)^(1/2) acting on the left, conj ch(2k) = cosh 2R and
    sh(k) = (2 cosh R)^(-1) sh(2k), cosh R = ((2 + conj p2) / 2)^(1/2).
    k = asinh(sigma) / (2 sigma) sh(2k) with sigma^2 = s2 s2*.
    ``condition`` is the 2-norm condition number of 2 + conj p2;
    ``consistency`` compares cosh 2R built from s2 alone with delta + conj p2.
    ``p1`` is ch(k) - delta.
    """
    g = s2.grid
    dx = g.dx
    eye = np.eye(g.points)
    Pop = p2.values.conj() * dx
    Sop = s2.values * dx
    X = 2 * eye + Pop
    Xh = 0.5 * (X + X.conj().T)
    w = np.linalg.eigvalsh(Xh)
    cond = float(np.max(np.abs(w)) / np.min(np.abs(w)))
    inv_two_cosh = _hermitian_function(Xh, lambda lam: 1.0 / np.sqrt(2.0 * np.clip(lam, 1e-300, None)))
    sh = inv_two_cosh @ Sop / dx
    cosh_r = _hermitian_function(Xh / 2, lambda lam: np.sqrt(np.clip(lam, 0.0, None)))
    p1 = (cosh_r - eye).conj() / dx
    Y = Sop @ Sop.conj().T

    def k_of(lam):
        sig = np.sqrt(np.clip(lam, 0.0, None))
        out = np.full_like(sig, 0.5)
        big = sig > 1e-8
        out[big] = np.arcsinh(sig[big]) / (2 * sig[big])
        return out

    k = _hermitian_function(Y, k_of) @ Sop / dx
    cosh2r = _hermitian_function(Y, lambda lam: np.sqrt(1.0 + np.clip(lam, 0.0, None)))
    consistency = float(np.linalg.norm(cosh2r - eye - Pop))
    k = 0.5 * (k + k.T)
    return HalfAngle(Kernel(g, 0.5 * (sh + sh.T)), Kernel(g, p1), Kernel(g, k), cond, consistency)


def _sh_weights(sh: np.ndarray, dx: float) -> tuple[np.ndarray, np.ndarray]:
    a = np.sum(np.abs(sh) ** 2, axis=0) * dx  # int |sh(y3, y1)|^2 dy3
    b = np.sum(np.abs(sh) ** 2, axis=1) * dx  # int |sh(y2, y4)|^2 dy4
    return a, b


def error_term_norms(state: PairState, N: int, sh: Kernel | None = None) -> dict[str, float]:
    """L2 norms of the representatives q1, delta part of qd6, c1 and delta part of l3.

    Quartic/quadratic terms carry 1/N and cubic/linear 1/sqrt(N).  All are
    evaluated through their factorised structure on the M x M grid.
    """
    g = state.grid
    dx = g.dx
    if sh is None:
        sh = half_angle(state.s2, state.p2).sh
    s = sh.values
    vm = pair_matrix(state.potential)
    v2 = np.abs(vm) ** 2
    phi = state.phi.values
    a, b = _sh_weights(s, dx)
    q1 = np.sqrt(max(a @ v2 @ b, 0.0) * dx * dx) / N
    qd6 = np.sqrt(np.sum(np.abs(s * vm) ** 2) * dx * dx) / N
    c1 = np.sqrt(max(a @ v2 @ np.abs(phi) ** 2, 0.0) * dx * dx) / np.sqrt(N)
    lin = (s * vm) @ phi.conj() * dx
    l3 = np.sqrt(np.sum(np.abs(lin) ** 2) * dx) / np.sqrt(N)
    return {"q1": float(q1), "qd6": float(qd6), "c1": float(c1), "l3": float(l3)}


def error_term_bounds(state: PairState, N: int, sh: Kernel | None = None) -> dict[str, float]:
    """The norm chains used to bound the representatives (sup/L2 products)."""
    g = state.grid
    dx = g.dx
    if sh is None:
        sh = half_angle(state.s2, state.p2).sh
    shn = float(np.sqrt(np.sum(np.abs(sh.values) ** 2)) * dx)
    v = state.potential.values
    vinf = float(np.max(np.abs(v)))
    v2 = float(np.sqrt(np.sum(v**2) * g.cell_volume))
    finf = float(np.max(np.abs(state.phi.values)))
    return {
        "q1": vinf * shn**2 / N,
        "qd6": vinf * shn / N,
        "c1": finf * v2 * shn / np.sqrt(N),
        "l3": finf * v2 * shn / np.sqrt(N),
    }
