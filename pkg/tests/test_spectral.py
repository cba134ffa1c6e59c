import numpy as np
import pytest

from mflab.spectral import (
    Field,
    Grid,
    Kernel,
    SeriesDivergence,
    ch_series,
    convolve,
    delta_kernel,
    forward_transform,
    free_propagate,
    half_deriv_norm,
    inverse_transform,
    kernel_compose,
    kernel_norm,
    kernel_transpose,
    laplacian_matrix,
    load_checkpoint,
    norm,
    save_checkpoint,
    sh_series,
    spectral_l2_norm,
)


def gaussian(grid, width=1.0):
    r2 = grid.radius() ** 2
    return Field(grid, np.exp(-r2 / (2 * width**2)) * (np.pi * width**2) ** (-grid.dim / 4))


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(1, 100, 10.0)
    with pytest.raises(ValueError):
        Grid(4, 16, 10.0)
    with pytest.raises(ValueError):
        Grid(1, 16, -1.0)
    g = Grid(1, 8, 4.0)
    assert g.dx == 0.5
    assert g.axis[0] == -2.0


def test_field_rejects_nan_and_shape():
    g = Grid(1, 8, 4.0)
    with pytest.raises(ValueError):
        Field(g, np.full(8, np.nan))
    with pytest.raises(ValueError):
        Field(g, np.zeros(4))


def test_constant_and_single_mode_coefficients():
    g = Grid(1, 32, 7.0)
    c = forward_transform(Field(g, np.ones(32)))
    assert abs(c[0] - 1) < 1e-14
    assert np.sum(np.abs(c[1:])) < 1e-13
    x = g.axis
    c = forward_transform(Field(g, np.exp(2j * np.pi * x / g.length)))
    assert abs(c[1] - 1) < 1e-13
    assert np.sum(np.abs(np.delete(c, 1))) < 1e-12


def test_parseval_and_roundtrip():
    rng = np.random.default_rng(3)
    for dim, m in [(1, 64), (2, 16), (3, 8)]:
        g = Grid(dim, m, 5.0)
        f = Field(g, rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape))
        assert abs(spectral_l2_norm(f) - norm(f)) < 1e-12 * norm(f)
        back = inverse_transform(forward_transform(f), g)
        assert np.max(np.abs(back.values - f.values)) < 1e-12


def test_free_gaussian_matches_closed_form():
    g = Grid(1, 1024, 80.0)
    phi = gaussian(g)
    for t in [0.5, 1.0, 3.0]:
        out = free_propagate(phi, t)
        exact = np.pi**-0.25 * (1 + 4 * t**2) ** -0.25
        assert abs(norm(out, np.inf) - exact) < 1e-12
        assert abs(out.mass - 1) < 1e-12


def test_free_propagate_zero_time_is_identity():
    g = Grid(1, 16, 4.0)
    f = gaussian(g)
    assert free_propagate(f, 0.0) is f
    with pytest.raises(ValueError):
        free_propagate(f, np.inf)


def test_convolution_matches_direct_sum():
    g = Grid(1, 64, 10.0)
    rng = np.random.default_rng(0)
    a = rng.normal(size=64) * np.exp(-g.axis**2)
    b = rng.normal(size=64) + 1j * rng.normal(size=64)
    fast = convolve(Field(g, a), Field(g, b)).values
    # direct periodic sum with minimum-image differences
    direct = np.zeros(64, complex)
    for i in range(64):
        for j in range(64):
            d = (i - j) % 64
            idx = (d + 32) % 64  # sample of a at offset d, centred grid
            direct[i] += a[idx] * b[j] * g.dx
    assert np.max(np.abs(fast - direct)) < 1e-12


def test_convolution_grid_mismatch():
    with pytest.raises(ValueError):
        convolve(gaussian(Grid(1, 16, 4.0)), gaussian(Grid(1, 16, 5.0)))


def test_half_derivative_of_single_mode():
    g = Grid(1, 32, 2 * np.pi)
    f = Field(g, np.exp(3j * g.axis))
    assert abs(half_deriv_norm(f) - np.sqrt(3 * 2 * np.pi)) < 1e-10


def test_laplacian_matrix_matches_spectral():
    g = Grid(1, 32, 6.0)
    f = gaussian(g, 0.8)
    D = laplacian_matrix(g)
    spec = np.fft.ifft(-g.wavenumbers**2 * np.fft.fft(f.values))
    assert np.max(np.abs(D @ f.values - spec)) < 1e-10
    assert np.allclose(D, D.T)


def test_kernel_composition_associative_and_delta_identity():
    g = Grid(1, 16, 3.0)
    rng = np.random.default_rng(1)
    A, B, C = (Kernel(g, rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16))) for _ in range(3))
    left = kernel_compose(kernel_compose(A, B), C).values
    right = kernel_compose(A, kernel_compose(B, C)).values
    assert np.max(np.abs(left - right)) < 1e-12 * np.max(np.abs(left))
    assert np.allclose(kernel_compose(delta_kernel(g), A).values, A.values)
    assert kernel_norm(kernel_transpose(A)) == pytest.approx(kernel_norm(A))


def test_rank_one_series_closed_form():
    # k = c u u^T with real unit u: sh(k) = sinh(c) u u^T / dx-normalised
    g = Grid(1, 32, 4.0)
    u = np.exp(-g.axis**2)
    u /= np.sqrt(np.sum(u**2) * g.dx)
    c = 0.7
    k = Kernel(g, c * np.outer(u, u))
    sh = sh_series(k).values
    ch = ch_series(k).values
    assert np.max(np.abs(sh - np.sinh(c) * np.outer(u, u))) < 1e-12
    assert np.max(np.abs(ch - (np.cosh(c) - 1) * np.outer(u, u))) < 1e-12


def test_series_identity_for_random_symmetric_kernel():
    g = Grid(1, 32, 4.0)
    rng = np.random.default_rng(5)
    a = 0.1 * (rng.normal(size=(32, 32)) + 1j * rng.normal(size=(32, 32)))
    k = Kernel(g, a + a.T)
    s, p = sh_series(k).values, ch_series(k).values
    dx = g.dx
    eye = np.eye(32) / dx
    cb = eye + p.conj()
    resid = cb @ cb * dx - s @ s.conj() * dx - eye
    assert np.sqrt(np.sum(np.abs(resid) ** 2)) * dx < 1e-10


def test_series_zero_and_divergence():
    g = Grid(1, 8, 2.0)
    assert not np.any(sh_series(Kernel(g, np.zeros((8, 8)))).values)
    with pytest.raises(SeriesDivergence):
        sh_series(Kernel(g, 40 * np.ones((8, 8))))
    with pytest.raises(ValueError):
        sh_series(Kernel(g, np.triu(np.ones((8, 8)))))


def test_checkpoint_roundtrip(tmp_path):
    g = Grid(2, 8, 3.5)
    rng = np.random.default_rng(2)
    f = Field(g, rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape))
    path = tmp_path / "phi.bin"
    save_checkpoint(path, f)
    raw = path.read_bytes()
    assert len(raw) == 32 + 16 * 64
    assert raw[:4] == b"MFLB"
    back = load_checkpoint(path)
    assert back.grid == g
    assert np.array_equal(back.values, f.values)


def test_checkpoint_rejects_corruption(tmp_path):
    g = Grid(1, 8, 1.0)
    path = tmp_path / "c.bin"
    save_checkpoint(path, Field(g, np.ones(8)))
    raw = bytearray(path.read_bytes())
    (tmp_path / "short.bin").write_bytes(bytes(raw[:-8]))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "short.bin")
    raw[0:4] = b"XXXX"
    (tmp_path / "magic.bin").write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "magic.bin")
