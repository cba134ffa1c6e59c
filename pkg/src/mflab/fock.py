"""Truncated bosonic Fock space over a small 1D lattice.

Each grid site is one mode, with the dictionary a_j = sqrt(dx) a(x_j), so the
lattice operators satisfy [a_j, a_k^+] = delta_jk below the cutoff shell.
States are coefficient vectors over all occupations with total number at
most ``n_max``.

Sign convention: psi(t) = exp(itH) psi_0 with H = H_1 - V / N and
H_1 = sum_jk D_jk a_j^+ a_k, D the spectral Laplacian. On the n-particle
sector exp(itH) is the N-body flow used by the manybody module.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import GuardViolation
from .fitting import loglog_fit
from .krylov import expm_krylov
from .manybody import Marginal
from .pairexc import PairIntegrator, half_angle, initial_state
from .potential import Profile, ScaledPotential, pair_matrix, sample_scaled
from .spectral import Field, Grid, Kernel, laplacian_matrix

logger = logging.getLogger(__name__)

__all__ = [
    "FockBasis",
    "FockState",
    "LadderOps",
    "FockLeakageError",
    "LEAKAGE_THRESHOLD",
    "build_ops",
    "number_operator",
    "fock_hamiltonian",
    "sector_isometry",
    "vacuum",
    "weyl_generator",
    "weyl_displace",
    "coherent_state",
    "pair_generator",
    "bogoliubov_apply",
    "evolve_exact",
    "approx_state",
    "fock_distance",
    "fock_marginal",
    "cutoff_ok",
    "conjugation_defect",
    "FockScaling",
    "fock_error_scaling",
]

LEAKAGE_THRESHOLD = 1e-4
KRYLOV_TOL = 1e-10
MAX_MODES = 12


class FockLeakageError(GuardViolation):
    """Weight in the top particle shell exceeds the configured threshold."""


class FockBasis:
    """All occupations (n_1..n_m) with sum n_j <= n_max, ordered by total number."""

    def __init__(self, modes: int, n_max: int):
        if not 1 <= modes <= MAX_MODES:
            raise ValueError(f"modes must lie in [1, {MAX_MODES}], got {modes}")
        if n_max < 0:
            raise ValueError(f"n_max must be >= 0, got {n_max}")
        self.modes = int(modes)
        self.n_max = int(n_max)
        rows = []
        for n in range(n_max + 1):
            for combo in itertools.combinations_with_replacement(range(modes), n):
                rows.append(np.bincount(np.array(combo, dtype=np.int64), minlength=modes))
        self.states = np.array(rows, dtype=np.int64).reshape(-1, modes)
        self.totals = self.states.sum(axis=1)
        self._radix = (n_max + 1) ** np.arange(modes, dtype=np.int64)
        keys = self.states @ self._radix
        self._order = np.argsort(keys)
        self._sorted = keys[self._order]

    @property
    def dim(self) -> int:
        return len(self.states)

    @staticmethod
    def expected_dim(modes: int, n_max: int) -> int:
        return sum(math.comb(n + modes - 1, n) for n in range(n_max + 1))

    def index(self, occ: np.ndarray) -> np.ndarray:
        """Basis indices of occupation rows (shape (..., m)); -1 when absent."""
        occ = np.asarray(occ, dtype=np.int64)
        keys = occ @ self._radix
        pos = np.searchsorted(self._sorted, keys)
        pos = np.clip(pos, 0, len(self._sorted) - 1)
        found = (self._sorted[pos] == keys) & np.all(occ >= 0, axis=-1) & (occ.sum(axis=-1) <= self.n_max)
        return np.where(found, self._order[pos], -1)

    def sector(self, n: int) -> np.ndarray:
        return np.flatnonzero(self.totals == n)

    def top_shell(self) -> np.ndarray:
        return self.totals == self.n_max


@dataclass
class FockState:
    basis: FockBasis
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=complex)
        if c.shape != (self.basis.dim,):
            raise ValueError(f"expected {self.basis.dim} coefficients, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite coefficients")
        self.coefficients = c

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.coefficients))

    @property
    def leakage(self) -> float:
        """Weight in the cutoff shell n = n_max."""
        c = self.coefficients[self.basis.top_shell()]
        return float(np.vdot(c, c).real)

    @property
    def mean_number(self) -> float:
        return float(np.sum(self.basis.totals * np.abs(self.coefficients) ** 2))

    def sector_weights(self) -> np.ndarray:
        return np.bincount(self.basis.totals, weights=np.abs(self.coefficients) ** 2, minlength=self.basis.n_max + 1)


@dataclass(frozen=True)
class LadderOps:
    a: list
    adag: list


def build_ops(basis: FockBasis) -> LadderOps:
    """Sparse a_j and a_j^+ in the occupation basis."""
    a, adag = [], []
    dim = basis.dim
    for j in range(basis.modes):
        src = np.flatnonzero(basis.states[:, j] > 0)
        lower = basis.states[src].copy()
        lower[:, j] -= 1
        dst = basis.index(lower)
        vals = np.sqrt(basis.states[src, j].astype(float))
        op = sp.csr_matrix((vals, (dst, src)), shape=(dim, dim))
        a.append(op)
        adag.append(op.T.tocsr())
    return LadderOps(a, adag)


def number_operator(basis: FockBasis) -> sp.csr_matrix:
    return sp.diags(basis.totals.astype(float)).tocsr()


def vacuum(basis: FockBasis) -> FockState:
    c = np.zeros(basis.dim, complex)
    c[basis.index(np.zeros(basis.modes, dtype=np.int64))] = 1.0
    return FockState(basis, c)


def _hopping(basis: FockBasis, D: np.ndarray) -> sp.csr_matrix:
    """sum_jk D_jk a_j^+ a_k, assembled directly in the occupation basis."""
    st = basis.states
    rows, cols, vals = [], [], []
    for k in range(basis.modes):
        src = np.flatnonzero(st[:, k] > 0)
        nk = st[src, k].astype(float)
        for j in range(basis.modes):
            if D[j, k] == 0:
                continue
            if j == k:
                rows.append(src)
                cols.append(src)
                vals.append(D[j, j] * nk)
                continue
            occ = st[src].copy()
            occ[:, k] -= 1
            occ[:, j] += 1
            dst = basis.index(occ)
            rows.append(dst)
            cols.append(src)
            vals.append(D[j, k] * np.sqrt(nk * occ[:, j]))
    dim = basis.dim
    if not rows:
        return sp.csr_matrix((dim, dim))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim))


def _lattice_grid(basis: FockBasis, grid: Grid) -> None:
    if grid.dim != 1 or grid.points != basis.modes:
        raise ValueError(f"grid with {grid.points} points does not match {basis.modes} modes")


def fock_hamiltonian(basis: FockBasis, v: ScaledPotential, N: int) -> sp.csr_matrix:
    """H = sum_jk D_jk a_j^+ a_k - (1/N) V with V = 1/2 sum_jk v_jk a_j^+ a_k^+ a_k a_j."""
    g = v.grid
    _lattice_grid(basis, g)
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    H1 = _hopping(basis, laplacian_matrix(g))
    vm = pair_matrix(v).real
    n = basis.states.astype(float)
    # a_j^+ a_k^+ a_k a_j = n_j n_k (j != k), n_j (n_j - 1) (j == k)
    pot = 0.5 * (np.einsum("sj,jk,sk->s", n, vm, n) - n @ np.diag(vm))
    return (H1 - sp.diags(pot / N)).tocsr()


def sector_isometry(basis: FockBasis, n: int) -> sp.csr_matrix:
    """Map n-sector coefficients to symmetric tensors in l2(sites^n) (rows: C-order tensor index).

    An L2-normalised wave function on the grid is this vector / sqrt(dx^n).
    """
    idx = basis.sector(n)
    m = basis.modes
    rows, cols, vals = [], [], []
    for col, s in enumerate(idx):
        occ = basis.states[s]
        config = np.repeat(np.arange(m), occ)
        perms = set(itertools.permutations(config.tolist()))
        amp = math.sqrt(np.prod([math.factorial(int(c)) for c in occ]) / math.factorial(n))
        for p in perms:
            rows.append(int(np.ravel_multi_index(p, (m,) * n)) if n else 0)
            cols.append(col)
            vals.append(amp)
    return sp.csr_matrix((vals, (rows, cols)), shape=(m**n, len(idx)))


# ------------------------------------------------------------ exponentials


def _check_leakage(state: FockState, threshold: float | None) -> FockState:
    if threshold is not None and state.leakage > threshold:
        raise FockLeakageError(
            f"cutoff shell weight {state.leakage:.3e} exceeds {threshold:.1e}; raise n_max above {state.basis.n_max}"
        )
    return state


def weyl_generator(basis: FockBasis, phi: Field, ops: LadderOps | None = None) -> sp.csr_matrix:
    """A(phi) = a(conj phi) - a^+(phi) = sum_j sqrt(dx) (conj phi_j a_j - phi_j a_j^+)."""
    _lattice_grid(basis, phi.grid)
    ops = ops or build_ops(basis)
    w = phi.values * math.sqrt(phi.grid.dx)
    out = sp.csr_matrix((basis.dim, basis.dim), dtype=complex)
    for j in range(basis.modes):
        if w[j] != 0:
            out = out + np.conj(w[j]) * ops.a[j] - w[j] * ops.adag[j]
    return out.tocsr()


def weyl_displace(
    psi: FockState,
    phi: Field,
    N: int,
    s: float = -1.0,
    ops: LadderOps | None = None,
    leakage_threshold: float | None = LEAKAGE_THRESHOLD,
) -> FockState:
    """exp(s sqrt(N) A(phi)) psi; s = -1 is the displacement creating the condensate."""
    A = weyl_generator(psi.basis, phi, ops)
    out, _ = expm_krylov(A, psi.coefficients, t=s * math.sqrt(N), tol=KRYLOV_TOL)
    return _check_leakage(FockState(psi.basis, out), leakage_threshold)


def coherent_state(basis: FockBasis, phi: Field, N: int, **kw) -> FockState:
    return weyl_displace(vacuum(basis), phi, N, -1.0, **kw)


def pair_generator(basis: FockBasis, k: Kernel, ops: LadderOps | None = None) -> sp.csr_matrix:
    """B(k) = 1/2 sum_jk dx (conj k_jk a_j a_k - k_jk a_j^+ a_k^+) for symmetric k."""
    _lattice_grid(basis, k.grid)
    if k.symmetry_defect() > 1e-10 * max(1.0, float(np.max(np.abs(k.values)))):
        raise ValueError("pair kernel must be symmetric")
    ops = ops or build_ops(basis)
    kv = k.values * k.grid.dx
    ann = sp.csr_matrix((basis.dim, basis.dim), dtype=complex)
    m = basis.modes
    for j in range(m):
        for l in range(j, m):
            c = kv[j, l] if j == l else 2 * kv[j, l]
            if c != 0:
                ann = ann + 0.5 * np.conj(c) * (ops.a[j] @ ops.a[l])
    return (ann - ann.conj().T).tocsr()


def bogoliubov_apply(
    psi: FockState,
    k: Kernel,
    s: float = -1.0,
    ops: LadderOps | None = None,
    leakage_threshold: float | None = LEAKAGE_THRESHOLD,
) -> FockState:
    """exp(s B(k)) psi; exp(B) a_j exp(-B) = sum_l conj(ch(k))_jl a_l + sh(k)_jl dx a_l^+."""
    B = pair_generator(psi.basis, k, ops)
    out, _ = expm_krylov(B, psi.coefficients, t=s, tol=KRYLOV_TOL)
    return _check_leakage(FockState(psi.basis, out), leakage_threshold)


def evolve_exact(psi0: FockState, H: sp.spmatrix, t: float, leakage_threshold: float | None = None) -> FockState:
    """exp(itH) psi0 by Krylov propagation."""
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    out, _ = expm_krylov(1j * H, psi0.coefficients, t=t, tol=KRYLOV_TOL)
    return _check_leakage(FockState(psi0.basis, out), leakage_threshold)


def approx_state(
    phi: Field,
    s2: Kernel,
    p2: Kernel,
    N: int,
    basis: FockBasis,
    ops: LadderOps | None = None,
    leakage_threshold: float | None = LEAKAGE_THRESHOLD,
    max_condition: float = 1e8,
) -> FockState:
    """exp(-sqrt(N) A(phi)) exp(-B(k)) vacuum, k recovered from (s2, p2)."""
    ops = ops or build_ops(basis)
    ha = half_angle(s2, p2)
    if not ha.condition < max_condition:
        raise GuardViolation(f"half-angle recovery ill conditioned ({ha.condition:.2e})")
    psi = bogoliubov_apply(vacuum(basis), ha.k, -1.0, ops, leakage_threshold)
    return weyl_displace(psi, phi, N, -1.0, ops, leakage_threshold)


def fock_distance(a: FockState | np.ndarray, b: FockState | np.ndarray) -> float:
    """min over theta of ||a - exp(i theta) b||."""
    a = getattr(a, "coefficients", a)
    b = getattr(b, "coefficients", b)
    ov = np.vdot(b, a)
    phase = ov / abs(ov) if ov != 0 else 1.0
    # explicit difference at the optimal phase avoids the cancellation in 2 - 2|<a, b>|
    return float(np.linalg.norm(a - phase * b))


def fock_marginal(psi: FockState, grid: Grid, ops: LadderOps | None = None) -> Marginal:
    """Gamma(x_j, x_k) = <a_k^+ a_j> / (dx <N>), so a coherent state gives phi phi^* / ||phi||^2."""
    _lattice_grid(psi.basis, grid)
    nbar = psi.mean_number
    if not nbar > 0:
        raise ValueError("marginal of a state without particles")
    ops = ops or build_ops(psi.basis)
    b = np.array([op @ psi.coefficients for op in ops.a])
    gam = b @ b.conj().T
    return Marginal(grid, gam / (grid.dx * nbar))


def cutoff_ok(n_max: int, mean: float) -> bool:
    """Poisson tail rule n_max >= mean + 6 sqrt(mean)."""
    return n_max >= mean + 6 * math.sqrt(max(mean, 0.0))


def conjugation_defect(generator: sp.spmatrix, lhs: sp.spmatrix, rhs, cut: int, basis: FockBasis) -> float:
    """max |<e, (exp(G) X exp(-G) - Y) e'>| over basis states with at most ``cut`` particles.

    ``rhs`` maps a block of column vectors to Y applied to them. Truncation
    makes the identity inexact near the cutoff shell only.
    """
    low = np.flatnonzero(basis.totals <= cut)
    worst = 0.0
    for col in low:
        e = np.zeros(basis.dim, complex)
        e[col] = 1.0
        y, _ = expm_krylov(generator, e, t=-1.0, tol=1e-13)
        z, _ = expm_krylov(generator, lhs @ y, t=1.0, tol=1e-13)
        worst = max(worst, float(np.max(np.abs((z - rhs(e))[low]))))
    return worst


# ------------------------------------------------------------ scaling probe


@dataclass
class FockScaling:
    N_list: list
    times: list
    distances: np.ndarray  # shape (len(N_list), len(times))
    coherent_distances: np.ndarray  # same, against the plain coherent ansatz
    leakage: list
    dim_fock: list
    slope: float | None
    notes: list

    @property
    def final(self) -> list:
        return [float(d) for d in self.distances[:, -1]]

    def as_dict(self) -> dict:
        return {
            "N": list(self.N_list),
            "t": list(self.times),
            "dim_fock": list(self.dim_fock),
            "leakage": list(self.leakage),
            "distance": [list(map(float, r)) for r in self.distances],
            "coherent_distance": [list(map(float, r)) for r in self.coherent_distances],
            "slope": self.slope,
            "notes": list(self.notes),
        }


def fock_error_scaling(
    profile: Profile,
    beta: float,
    phi0: Field,
    times: Sequence[float],
    N_list: Sequence[int],
    n_max: int,
    dt: float = 5e-3,
    leakage_threshold: float | None = LEAKAGE_THRESHOLD,
) -> FockScaling:
    """Distance between exact and second-order states for each N at each of ``times``."""
    g = phi0.grid
    times = [float(t) for t in times]
    if any(b <= a for a, b in zip([0.0] + times, times)):
        raise ValueError("times must be positive and increasing")
    basis = FockBasis(g.points, n_max)
    ops = build_ops(basis)
    notes = []
    mass = phi0.mass
    dists = np.zeros((len(N_list), len(times)))
    coh = np.zeros_like(dists)
    leak = []
    for i, N in enumerate(N_list):
        if not cutoff_ok(n_max, N * mass):
            notes.append(f"N={N}: n_max={n_max} below the Poisson tail rule for mean {N * mass:.3g}")
        v = sample_scaled(profile, N, beta, g, min_points=0)
        H = fock_hamiltonian(basis, v, N)
        exact = coherent_state(basis, phi0, N, ops=ops, leakage_threshold=leakage_threshold)
        state = initial_state(phi0, v)
        integ = PairIntegrator(v, dt)
        worst = exact.leakage
        t_now = 0.0
        for j, t in enumerate(times):
            exact = evolve_exact(exact, H, t - t_now, leakage_threshold)
            n_steps = int(round((t - t_now) / dt))
            for _ in range(n_steps):
                state = integ.step(state)
            t_now = t
            approx = approx_state(state.phi, state.s2, state.p2, N, basis, ops, leakage_threshold)
            plain = weyl_displace(vacuum(basis), state.phi, N, -1.0, ops, leakage_threshold)
            dists[i, j] = fock_distance(exact, approx)
            coh[i, j] = fock_distance(exact, plain)
            worst = max(worst, exact.leakage, approx.leakage)
        leak.append(worst)
        logger.info("N=%d dim=%d distance %.4e leakage %.2e", N, basis.dim, dists[i, -1], worst)
    slope = None
    if len(N_list) >= 2 and np.all(dists[:, -1] > 1e-8):
        slope = loglog_fit(list(zip(N_list, dists[:, -1])))[0]
    elif len(N_list) >= 2:
        notes.append("slope not applicable: distances at round-off level")
    return FockScaling(list(N_list), times, dists, coh, leak, [basis.dim] * len(N_list), slope, notes)
