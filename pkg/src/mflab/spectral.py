"""Periodic grids, Fourier transforms, field and kernel algebra.

Everything here works on the periodic box [-L/2, L/2)^dim sampled with M
points per axis.  Integrals are quadratures with weight dx**dim, so discrete
norms approximate the continuum ones.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import NumericalAbort

__all__ = [
    "Grid",
    "Field",
    "Kernel",
    "SeriesDivergence",
    "forward_transform",
    "inverse_transform",
    "free_propagate",
    "convolve",
    "norm",
    "spectral_l2_norm",
    "half_deriv_norm",
    "laplacian_matrix",
    "delta_kernel",
    "kernel_compose",
    "kernel_transpose",
    "kernel_conj",
    "kernel_norm",
    "sh_series",
    "ch_series",
    "save_checkpoint",
    "load_checkpoint",
]

SERIES_MAX_TERMS = 40


class SeriesDivergence(NumericalAbort):
    """Operator series did not reach the tolerance within the term cap."""


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on [-L/2, L/2)^dim with M points per axis.

    M must be a power of two unless ``lattice`` is set; lattice grids are the
    few-site mode sets used by the Fock-space code.
    """

    dim: int
    points: int
    length: float
    lattice: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        m = self.points
        if m < 2 or (not self.lattice and m & (m - 1)):
            raise ValueError(f"points per axis must be a power of two, got {m}")
        if not self.length > 0:
            raise ValueError("box length must be positive")

    @property
    def dx(self) -> float:
        return self.length / self.points

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points,) * self.dim

    @property
    def cell_volume(self) -> float:
        return self.dx**self.dim

    @cached_property
    def axis(self) -> np.ndarray:
        return -0.5 * self.length + self.dx * np.arange(self.points)

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Angular wavenumbers 2*pi*j/L in standard DFT ordering."""
        return 2 * np.pi * np.fft.fftfreq(self.points, d=self.dx)

    @cached_property
    def k2(self) -> np.ndarray:
        """|xi|^2 on the full spectral grid (DFT ordering on every axis)."""
        k = self.wavenumbers
        out = np.zeros(self.shape)
        for ax in range(self.dim):
            sl = [None] * self.dim
            sl[ax] = slice(None)
            out = out + (k**2)[tuple(sl)]
        return out

    def coords(self) -> list[np.ndarray]:
        """Broadcastable coordinate arrays, one per axis."""
        out = []
        for ax in range(self.dim):
            sl = [None] * self.dim
            sl[ax] = slice(None)
            out.append(self.axis[tuple(sl)])
        return out

    def radius(self) -> np.ndarray:
        return np.sqrt(sum(c**2 for c in self.coords()))

    def same_as(self, other: Grid) -> bool:
        return (self.dim, self.points, self.length) == (other.dim, other.points, other.length)


@dataclass(frozen=True)
class Field:
    """Complex scalar function sampled on a grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.complex128)
        if vals.shape != self.grid.shape:
            raise ValueError(f"values shape {vals.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field contains non-finite entries")
        object.__setattr__(self, "values", vals)

    def with_values(self, values: np.ndarray) -> Field:
        return Field(self.grid, values)

    @property
    def mass(self) -> float:
        return float(np.sum(np.abs(self.values) ** 2) * self.grid.cell_volume)


@dataclass(frozen=True)
class Kernel:
    """Complex function K(x, y) on a one-dimensional grid squared."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        if self.grid.dim != 1:
            raise ValueError("kernels are only supported on 1D grids")
        vals = np.asarray(self.values, dtype=np.complex128)
        m = self.grid.points
        if vals.shape != (m, m):
            raise ValueError(f"kernel must be {m}x{m}, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("kernel contains non-finite entries")
        object.__setattr__(self, "values", vals)

    def symmetry_defect(self) -> float:
        return float(np.max(np.abs(self.values - self.values.T)))


def _check_same(a: Grid, b: Grid) -> None:
    if not a.same_as(b):
        raise ValueError(f"grid mismatch: {a} vs {b}")


def _shift_phase(grid: Grid) -> np.ndarray:
    # exp(i k L/2) = (-1)^j for the grid origin at -L/2
    j = np.fft.fftfreq(grid.points, d=1.0 / grid.points).astype(int)
    sign = np.where(j % 2 == 0, 1.0, -1.0)
    out = np.ones(grid.shape)
    for ax in range(grid.dim):
        sl = [None] * grid.dim
        sl[ax] = slice(None)
        out = out * sign[tuple(sl)]
    return out


def forward_transform(f: Field) -> np.ndarray:
    """Fourier-series coefficients c_k with f(x) = sum_k c_k exp(i k.x)."""
    g = f.grid
    return np.fft.fftn(f.values) / g.points**g.dim * _shift_phase(g)


def inverse_transform(coeffs: np.ndarray, grid: Grid) -> Field:
    vals = np.fft.ifftn(np.asarray(coeffs) * _shift_phase(grid)) * grid.points**grid.dim
    return Field(grid, vals)


def spectral_l2_norm(f: Field) -> float:
    """L2 norm evaluated from Fourier coefficients (Parseval)."""
    c = forward_transform(f)
    return float(np.sqrt(np.sum(np.abs(c) ** 2) * f.grid.length**f.grid.dim))


def kinetic_phase(grid: Grid, t: float) -> np.ndarray:
    """Spectral multiplier of the free flow, exp(-i |xi|^2 t)."""
    return np.exp(-1j * grid.k2 * t)


def free_propagate(f: Field, t: float) -> Field:
    """Solve (1/i) d_t phi - Laplacian phi = 0 for time t."""
    if not np.isfinite(t):
        raise ValueError("propagation time must be finite")
    if t == 0:
        return f
    return f.with_values(np.fft.ifftn(np.fft.fftn(f.values) * kinetic_phase(f.grid, t)))


def convolve_arrays(a: np.ndarray, b: np.ndarray, grid: Grid) -> np.ndarray:
    """Periodic convolution of centred-grid samples, weighted by dx^dim."""
    ah = np.fft.fftn(np.fft.ifftshift(a))
    return np.fft.ifftn(ah * np.fft.fftn(b)) * grid.cell_volume


def convolve(a: Field, b: Field) -> Field:
    """Approximate int a(x - y) b(y) dy on the periodic box."""
    _check_same(a.grid, b.grid)
    return Field(a.grid, convolve_arrays(a.values, b.values, a.grid))


def norm(f: Field, p: float = 2) -> float:
    """Quadrature L^p norm; p = inf gives the max modulus."""
    if p == np.inf:
        return float(np.max(np.abs(f.values)))
    if not p >= 1:
        raise ValueError(f"invalid exponent p={p}")
    return float((np.sum(np.abs(f.values) ** p) * f.grid.cell_volume) ** (1.0 / p))


def half_deriv_norm(f: Field) -> float:
    """L2 norm of |nabla|^{1/2} f, i.e. the homogeneous H^{1/2} seminorm."""
    g = f.grid
    c = forward_transform(f)
    return float(np.sqrt(np.sum(np.sqrt(g.k2) * np.abs(c) ** 2) * g.length**g.dim))


def laplacian_matrix(grid: Grid) -> np.ndarray:
    """Dense spectral Laplacian acting on 1D sample vectors (real symmetric)."""
    if grid.dim != 1:
        raise ValueError("laplacian_matrix is 1D only")
    m = grid.points
    eye = np.eye(m)
    d = np.fft.ifft(-grid.wavenumbers[:, None] ** 2 * np.fft.fft(eye, axis=0), axis=0)
    d = d.real
    return 0.5 * (d + d.T)


# ---------------------------------------------------------------- kernels


def delta_kernel(grid: Grid) -> Kernel:
    """Discrete delta: 1/dx on the diagonal, the identity for composition."""
    return Kernel(grid, np.eye(grid.points) / grid.dx)


def kernel_compose(a: Kernel, b: Kernel) -> Kernel:
    """(A o B)(x, y) = sum_z A(x, z) B(z, y) dx."""
    _check_same(a.grid, b.grid)
    return Kernel(a.grid, (a.values @ b.values) * a.grid.dx)


def kernel_transpose(a: Kernel) -> Kernel:
    return Kernel(a.grid, a.values.T)


def kernel_conj(a: Kernel) -> Kernel:
    return Kernel(a.grid, a.values.conj())


def kernel_norm(a: Kernel) -> float:
    """L2(dx dy) norm of the kernel (Hilbert-Schmidt norm)."""
    return float(np.sqrt(np.sum(np.abs(a.values) ** 2)) * a.grid.dx)


def _series(k: Kernel, first: np.ndarray, offset: int, tol: float) -> Kernel:
    dx = k.grid.dx
    kbk = (k.values.conj() @ k.values) * dx * dx  # kbar o k as a weighted product
    total = first.copy()
    term = first
    for n in range(1, SERIES_MAX_TERMS):
        a = 2 * n + offset
        term = (term @ kbk) / (a * (a + 1))
        if np.sqrt(np.sum(np.abs(term) ** 2)) * dx < tol:
            total += term
            return Kernel(k.grid, total)
        total += term
    raise SeriesDivergence(
        f"series did not fall below tol={tol:g} in {SERIES_MAX_TERMS} terms; kernel too large"
    )


def sh_series(k: Kernel, tol: float = 1e-12) -> Kernel:
    """sh(k) = k + k o kbar o k / 3! + ..., truncated once a term drops below tol."""
    if k.symmetry_defect() > 1e-8 * max(1.0, np.max(np.abs(k.values))):
        raise ValueError("sh_series expects a symmetric kernel")
    if not np.any(k.values):
        return Kernel(k.grid, np.zeros_like(k.values))
    return _series(k, k.values.copy(), 0, tol)


def ch_series(k: Kernel, tol: float = 1e-12) -> Kernel:
    """Delta-free part of ch(k) = delta + kbar o k / 2! + kbar o k o kbar o k / 4! + ..."""
    if k.symmetry_defect() > 1e-8 * max(1.0, np.max(np.abs(k.values))):
        raise ValueError("ch_series expects a symmetric kernel")
    if not np.any(k.values):
        return Kernel(k.grid, np.zeros_like(k.values))
    dx = k.grid.dx
    first = (k.values.conj() @ k.values) * dx / 2.0
    return _series(k, first, 1, tol)


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"MFLB"
_VERSION = 1
_HEADER = struct.Struct("<4sIQQd")  # 32 bytes


def save_checkpoint(path: str | Path, f: Field) -> None:
    """Write the binary field checkpoint (header + interleaved float64 re/im)."""
    g = f.grid
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    body = np.empty(f.values.size * 2, dtype="<f8")
    flat = f.values.ravel()
    body[0::2] = flat.real
    body[1::2] = flat.imag
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, g.dim, g.points, g.length))
        fh.write(body.tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Field:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("checkpoint truncated")
    magic, version, dim, m, length = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    m = int(m)
    grid = Grid(int(dim), m, float(length), lattice=bool(m & (m - 1)))
    n = m**dim
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != 2 * n:
        raise ValueError(f"checkpoint body has {body.size} floats, expected {2 * n}")
    vals = (body[0::2] + 1j * body[1::2]).reshape(grid.shape)
    return Field(grid, vals)
