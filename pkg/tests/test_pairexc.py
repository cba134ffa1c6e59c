from dataclasses import replace

import numpy as np
import pytest

from mflab.errors import NumericalAbort
from mflab.pairexc import (
    PairIntegrator,
    apply_gN,
    assemble_gN,
    bogoliubov_residual,
    build_mN,
    error_term_bounds,
    error_term_norms,
    from_series,
    half_angle,
    initial_state,
    pair_norms,
    pair_step,
)
from mflab.potential import Profile, sample_scaled
from mflab.spectral import Field, Grid, Kernel, kernel_transpose, laplacian_matrix, sh_series


@pytest.fixture
def small():
    g = Grid(1, 32, 20.0)
    x = g.axis
    phi = Field(g, np.exp(-(x**2) / 2) * np.pi**-0.25 * (1 + 0.3j * x))
    v = sample_scaled(Profile(1.0, 5.0), 1, 0.0, g)
    return g, phi, v


def random_kernel(g, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    m = g.points
    return Kernel(g, scale * (rng.normal(size=(m, m)) + 1j * rng.normal(size=(m, m))))


def random_symmetric(g, seed=0, scale=0.05):
    a = random_kernel(g, seed, scale).values
    return Kernel(g, a + a.T)


def test_mN_symmetric_and_vanishes_with_phi(small):
    g, phi, v = small
    m = build_mN(phi, v).values
    assert np.array_equal(m, m.T)
    zero = Field(g, np.zeros(g.points))
    assert not np.any(build_mN(zero, v).values)


def test_gN_reduces_to_laplacian_for_zero_phi(small):
    g, _, v = small
    zero = Field(g, np.zeros(g.points))
    K = random_kernel(g, 1)
    out = apply_gN(zero, v, K, "left-transpose").values
    assert np.max(np.abs(out + laplacian_matrix(g) @ K.values)) < 1e-10


def test_gN_matches_dense_oracle(small):
    g, phi, v = small
    K = random_kernel(g, 2)
    G = assemble_gN(phi, v).values
    left = apply_gN(phi, v, K, "left-transpose").values
    right = apply_gN(phi, v, K, "right").values
    assert np.max(np.abs(left - G.T @ K.values * g.dx)) < 1e-10
    assert np.max(np.abs(right - K.values @ G * g.dx)) < 1e-10
    # g_N is Hermitian as an operator
    assert np.max(np.abs(G - G.conj().T)) < 1e-10
    with pytest.raises(ValueError):
        apply_gN(phi, v, K, "left")


def test_grid_mismatch(small):
    g, phi, v = small
    other = Grid(1, 32, 21.0)
    with pytest.raises(ValueError):
        apply_gN(phi, v, Kernel(other, np.zeros((32, 32))), "right")


def test_zero_potential_gives_zero_trajectory(small):
    g, phi, _ = small
    v = sample_scaled(Profile(kind="zero"), 1, 0.0, g)
    st = initial_state(phi, v)
    it = PairIntegrator(v, 0.01)
    for _ in range(20):
        st = it.step(st)
    assert not np.any(st.s2.values) and not np.any(st.p2.values)


def test_zero_condensate_gives_zero_trajectory(small):
    g, _, v = small
    st = initial_state(Field(g, np.zeros(g.points)), v)
    for _ in range(5):
        st = pair_step(st, 0.01)
    assert not np.any(st.s2.values) and not np.any(st.p2.values)


def test_short_time_duhamel(small):
    g, phi, v = small
    dt = 1e-4
    st = pair_step(initial_state(phi, v), dt)
    m = build_mN(phi, v).values
    rel = np.linalg.norm(st.s2.values - 2j * dt * m) / np.linalg.norm(2j * dt * m)
    assert rel < 0.05


def test_series_pair_satisfies_identity(small):
    g = small[0]
    for seed in range(3):
        s, p = from_series(random_symmetric(g, seed))
        assert bogoliubov_residual(s, p) < 1e-8
    z = Kernel(g, np.zeros((32, 32)))
    assert bogoliubov_residual(z, z) == 0.0


def test_trajectory_preserves_identity_and_symmetry(small):
    g, phi, v = small
    st = initial_state(phi, v)
    it = PairIntegrator(v, 1e-2)
    for _ in range(100):
        st = it.step(st)
    assert bogoliubov_residual(st.s2, st.p2) < 1e-5
    assert st.s2.symmetry_defect() < 1e-8
    P = st.p2.values
    assert np.max(np.abs(P - P.conj().T)) < 1e-8
    assert pair_norms(st)[0] > 0.05


def test_residual_shrinks_with_dt(small):
    g, phi, v = small
    res = []
    for dt in (0.1, 0.05):
        st = initial_state(phi, v)
        it = PairIntegrator(v, dt, tolerance=None)
        for _ in range(int(round(1 / dt))):
            st = it.step(st)
        res.append(bogoliubov_residual(st.s2, st.p2))
    assert res[0] / res[1] >= 3


def test_residual_abort(small):
    g, phi, v = small
    it = PairIntegrator(v, 1e-2, tolerance=1e-30, check_every=1)
    with pytest.raises(NumericalAbort):
        it.step(initial_state(phi, v))
    with pytest.raises(ValueError):
        PairIntegrator(v, -1e-2)


def test_pair_norms(small):
    g, phi, v = small
    assert pair_norms(initial_state(phi, v)) == (0.0, 0.0)
    s = random_symmetric(g, 4)
    p = random_kernel(g, 5)
    st = replace(initial_state(phi, v), s2=s, p2=p)
    st_t = replace(st, s2=kernel_transpose(s), p2=kernel_transpose(p))
    assert pair_norms(st) == pytest.approx(pair_norms(st_t))


def test_half_angle_recovers_series_kernel(small):
    g = small[0]
    k = random_symmetric(g, 7, 0.1)
    s2, p2 = from_series(k)
    ha = half_angle(s2, p2)
    assert np.max(np.abs(ha.k.values - k.values)) < 1e-10
    assert np.max(np.abs(ha.sh.values - sh_series(k).values)) < 1e-10
    assert ha.condition >= 1.0
    assert ha.consistency < 1e-10


def test_error_terms_vanish_without_pairs(small):
    g, phi, v = small
    rep = error_term_norms(initial_state(phi, v), 10)
    assert rep == {"q1": 0.0, "qd6": 0.0, "c1": 0.0, "l3": 0.0}


def _factorised_reference(sh, phi, vm, dx, N):
    # brute-force 4-index contractions on a tiny grid
    q1 = np.einsum("ab,ca,bd->abcd", vm, sh, sh)
    c1 = np.einsum("ab,b,ca->abc", vm, phi, sh)
    lin = np.einsum("yx,x,yx->y", sh, phi.conj(), vm) * dx
    return {
        "q1": np.sqrt(np.sum(np.abs(q1) ** 2) * dx**4) / N,
        "qd6": np.sqrt(np.sum(np.abs(sh * vm) ** 2) * dx**2) / N,
        "c1": np.sqrt(np.sum(np.abs(c1) ** 2) * dx**3) / np.sqrt(N),
        "l3": np.sqrt(np.sum(np.abs(lin) ** 2) * dx) / np.sqrt(N),
    }


def test_error_terms_match_brute_force():
    from mflab.potential import pair_matrix

    g = Grid(1, 16, 10.0)
    phi = Field(g, np.exp(-(g.axis**2)) * (1 + 0.5j))
    v = sample_scaled(Profile(1.0, 3.0), 1, 0.0, g, min_points=0)
    sh = random_symmetric(g, 9, 0.1)
    st = initial_state(phi, v)
    got = error_term_norms(st, 7, sh)
    ref = _factorised_reference(sh.values, phi.values, pair_matrix(v), g.dx, 7)
    for key in ref:
        assert got[key] == pytest.approx(ref[key], rel=1e-12)


def test_c1_bound_chain(small):
    g, phi, v = small
    st = initial_state(phi, v)
    it = PairIntegrator(v, 1e-2)
    for _ in range(30):
        st = it.step(st)
        ha = half_angle(st.s2, st.p2)
        got = error_term_norms(st, 5, ha.sh)
        bound = error_term_bounds(st, 5, ha.sh)
        assert got["c1"] <= bound["c1"] + 1e-9
        assert got["q1"] <= bound["q1"] + 1e-9


def test_fixed_state_scaling_exponents():
    # For a fixed smooth sh and v_N = N^beta v(N^beta x) in 1D:
    # q1, qd6 ~ N^(beta/2 - 1), c1 ~ N^((beta - 1)/2), l3 ~ N^(-1/2)
    g = Grid(1, 1024, 32.0)
    x = g.axis
    phi = Field(g, np.exp(-(x**2) / 2) * np.pi**-0.25)
    sh = Kernel(g, 0.1 * np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / 4))
    beta = 0.3
    prof = Profile(1.0, 2.0)
    N1, N2 = 4, 1024
    reps = []
    for N in (N1, N2):
        v = sample_scaled(prof, N, beta, g)
        reps.append(error_term_norms(initial_state(phi, v), N, sh))
    lr = np.log(N2 / N1)
    expect = {"q1": beta / 2 - 1, "qd6": beta / 2 - 1, "c1": (beta - 1) / 2, "l3": -0.5}
    for key, e in expect.items():
        slope = np.log(reps[1][key] / reps[0][key]) / lr
        assert abs(slope - e) < 0.03, (key, slope, e)
