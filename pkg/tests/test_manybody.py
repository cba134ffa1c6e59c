import numpy as np
import pytest

from mflab.errors import GuardViolation
from mflab.fitting import convergence_ratios
from mflab.manybody import (
    ManyBodySolver,
    ManyBodyState,
    Marginal,
    MeanFieldTrace,
    crank_nicolson_two_body,
    delta_lambda,
    evolve_manybody,
    excitation_weights,
    excitation_weights_enumerated,
    factorized_state,
    marginal,
    mb_energy,
    mb_step,
    operator_norm_distance,
    pickl_alpha,
    pickl_bound,
    rate_fit,
    scan_delta,
    symmetry_defect,
    trace_distance,
)
from mflab.potential import Profile, sample_scaled
from mflab.spectral import Field, Grid, free_propagate


@pytest.fixture
def setup():
    g = Grid(1, 32, 12.0)
    x = g.axis
    phi = Field(g, np.exp(-(x**2) / 2) * np.pi**-0.25)
    v = sample_scaled(Profile(2.0, 3.0), 1, 0.0, g)
    return g, phi, v


def orthonormal_pair(g):
    x = g.axis
    a = np.exp(-(x**2) / 2)
    b = x * np.exp(-(x**2) / 2)
    a /= np.sqrt(np.sum(np.abs(a) ** 2) * g.dx)
    b /= np.sqrt(np.sum(np.abs(b) ** 2) * g.dx)
    return Field(g, a), Field(g, b)


def test_factorized_state(setup):
    g, phi, _ = setup
    st = factorized_state(phi, 2)
    assert np.array_equal(st.values, np.outer(phi.values, phi.values))
    assert abs(st.norm - 1) < 1e-12
    assert symmetry_defect(factorized_state(phi, 4)) == 0.0
    with pytest.raises(ValueError):
        factorized_state(Field(g, 2 * phi.values), 2)


def test_product_marginal_is_rank_one(setup):
    g, phi, _ = setup
    gam = marginal(factorized_state(phi, 3))
    assert np.max(np.abs(gam.matrix - np.outer(phi.values, phi.values.conj()))) < 1e-10
    assert abs(gam.trace - 1) < 1e-10
    assert trace_distance(gam, phi) < 1e-10


def test_superposition_marginal(setup):
    g = setup[0]
    a, b = orthonormal_pair(g)
    psi = (np.outer(a.values, a.values) + np.outer(b.values, b.values)) / np.sqrt(2)
    gam = marginal(ManyBodyState(g, 2, psi))
    expect = 0.5 * (np.outer(a.values, a.values.conj()) + np.outer(b.values, b.values.conj()))
    assert np.max(np.abs(gam.matrix - expect)) < 1e-12
    assert abs(gam.trace - 1) < 1e-10


def test_trace_distance_limits(setup):
    g = setup[0]
    a, b = orthonormal_pair(g)
    ga = Marginal(g, np.outer(a.values, a.values.conj()))
    assert trace_distance(ga, a) < 1e-12
    assert trace_distance(ga, b) == pytest.approx(2.0, abs=1e-12)


def test_trace_norm_is_twice_operator_norm_for_rank_one_differences(setup):
    g = setup[0]
    rng = np.random.default_rng(0)
    for _ in range(5):
        u = rng.normal(size=32) + 1j * rng.normal(size=32)
        w = rng.normal(size=32) + 1j * rng.normal(size=32)
        u /= np.sqrt(np.sum(np.abs(u) ** 2) * g.dx)
        w /= np.sqrt(np.sum(np.abs(w) ** 2) * g.dx)
        gam = Marginal(g, np.outer(w, w.conj()))
        phi = Field(g, u)
        assert abs(trace_distance(gam, phi) - 2 * operator_norm_distance(gam, phi)) < 1e-10


def test_free_product_stays_product(setup):
    g, phi, _ = setup
    zero = sample_scaled(Profile(kind="zero"), 1, 0.0, g)
    st = evolve_manybody(factorized_state(phi, 3), zero, 0.01, 0.3)
    u = free_propagate(phi, 0.3).values
    expect = np.multiply.outer(np.multiply.outer(u, u), u)
    assert np.max(np.abs(st.values - expect)) < 1e-12


def test_norm_and_symmetry_preserved(setup):
    g, phi, v = setup
    solver = ManyBodySolver(v, 3, 1e-2)
    st = factorized_state(phi, 3)
    for _ in range(10):
        new = solver.step(st)
        assert abs(new.norm - st.norm) < 1e-12
        st = new
    assert symmetry_defect(st) < 1e-10
    gam = marginal(st)
    assert gam.hermiticity_defect() < 1e-10
    assert abs(gam.trace - 1) < 1e-10
    assert np.min(gam.eigenvalues()) > -1e-8


def test_fused_steps_equal_repeated_single_steps(setup):
    g, phi, v = setup
    st = factorized_state(phi, 2)
    fused = evolve_manybody(st, v, 0.01, 0.05)
    single = st
    for _ in range(5):
        single = mb_step(single, v, 0.01)
    assert np.max(np.abs(fused.values - single.values)) < 1e-12


def test_two_body_matches_crank_nicolson(setup):
    g, phi, v = setup
    ref = crank_nicolson_two_body(phi, v, 1e-4, 0.1)
    st = evolve_manybody(factorized_state(phi, 2), v, 1e-3, 0.1)
    err = np.sqrt(np.sum(np.abs(st.values - ref) ** 2) * g.dx**2)
    assert err < 1e-4


def test_energy_conserved(setup):
    g, phi, v = setup
    st = factorized_state(phi, 3)
    e0 = mb_energy(st, v)
    st = evolve_manybody(st, v, 1e-3, 1.0)
    assert abs(mb_energy(st, v) - e0) / abs(e0) < 1e-6


def test_energy_of_product_matches_hartree_form(setup):
    # <phi^N, H phi^N> = N ||grad phi||^2 + (N - 1)/2 int (v * |phi|^2)|phi|^2
    from mflab.hartree import energy

    g, phi, v = setup
    N = 3
    e_mb = mb_energy(factorized_state(phi, N), v)
    kin = energy(phi, None)
    pot = energy(phi, v) - kin
    assert e_mb == pytest.approx(N * kin + (N - 1) * pot, rel=1e-12)


def test_second_order(setup):
    g, phi, v = setup
    psi0 = factorized_state(phi, 2)

    def solve(h):
        return evolve_manybody(psi0, v, h, 0.4).values

    _, ratios = convergence_ratios(solve, 0.02, levels=3, refine=32, weight=g.dx**2)
    assert all(3.3 <= r <= 4.7 for r in ratios), ratios


def test_memory_guard(setup):
    g, phi, v = setup
    with pytest.raises(GuardViolation):
        factorized_state(phi, 5, max_bytes=1 << 20)
    with pytest.raises(GuardViolation):
        ManyBodySolver(v, 4, 0.01, max_bytes=1 << 20)


def test_weights_distribution(setup):
    g, phi, v = setup
    st = evolve_manybody(factorized_state(phi, 3), v, 0.01, 0.3)
    w = excitation_weights(st, phi)
    assert abs(np.sum(w) - 1) < 1e-10
    assert np.all(w > -1e-14)
    ref = excitation_weights_enumerated(st, phi)
    assert np.max(np.abs(w - ref)) < 1e-12


def test_weights_of_orthogonal_product(setup):
    g = setup[0]
    a, b = orthonormal_pair(g)
    st = factorized_state(b, 3)
    w = excitation_weights(st, a)
    assert w[3] == pytest.approx(1.0, abs=1e-12)


def test_alpha_of_product_is_zero(setup):
    g, phi, _ = setup
    for N in (2, 3, 4):
        pa = pickl_alpha(factorized_state(phi, N), phi, 0.65)
        assert pa.alpha_lambda == 0.0 or pa.alpha_lambda < 1e-15
        assert pa.alpha < 1e-15


def test_alpha_ordering(setup):
    g, phi, v = setup
    st = evolve_manybody(factorized_state(phi, 4), v, 0.01, 0.3)
    phit = Field(g, st.values[(slice(None),) + (16,) * 3])
    phit = phit.with_values(phit.values / np.sqrt(phit.mass))
    a1 = pickl_alpha(st, phit, 1.0)
    for lam in (0.3, 0.5, 0.9):
        assert a1.alpha <= pickl_alpha(st, phit, lam).alpha_lambda + 1e-15
    # alpha_N equals ||q_1 Psi||^2
    u = phit.values
    proj = np.tensordot(u.conj() * g.dx, st.values, axes=([0], [0]))
    q1 = st.values - np.multiply.outer(u, proj)
    assert a1.alpha == pytest.approx(np.vdot(q1, q1).real * g.dx**4, rel=1e-10)
    with pytest.raises(ValueError):
        pickl_alpha(st, phit, 0.0)


def test_delta_lambda_example():
    assert delta_lambda(0.65, 0.1) == pytest.approx(-0.025, abs=1e-15)


@pytest.mark.parametrize("beta", [0.05, 0.10, 0.15])
def test_delta_scan_feasible(beta):
    lam, d = scan_delta(beta)
    assert d < 0
    expect = -beta / 4 if beta < 1 / 7 else (6 * beta - 1) / 4
    assert d == pytest.approx(expect, abs=1e-12)


def test_delta_scan_threshold():
    _, d = scan_delta(1 / 6)
    assert abs(d) < 1e-12
    assert scan_delta(0.2)[1] > 0


def test_pickl_bound_trivial():
    tr = MeanFieldTrace(np.array([0.0, 0.5]), np.array([1.0, 0.8]), np.array([2.0, 1.0]))
    assert pickl_bound(tr, 0.0, 10, 0.1, 0.65, 1.0, 0.0) == 0.0
    b1 = pickl_bound(tr, 0.5, 10, 0.1, 0.65, 1.0)
    b2 = pickl_bound(tr, 0.5, 100, 0.1, 0.65, 1.0)
    assert b2 < b1


def test_rate_fit_free_case(setup):
    g, phi, _ = setup
    rep = rate_fit([2, 3], 0.2, 0.0, phi, Profile(kind="zero"), dt=0.01)
    assert max(rep.distances) < 1e-8
    assert rep.slope is None


def test_rate_fit_decreasing_small(setup):
    g, phi, _ = setup
    rep = rate_fit([2, 3, 4], 0.5, 0.0, phi, Profile(2.0, 3.0), dt=0.01)
    d = rep.distances
    assert d[0] > d[1] > d[2]
    assert rep.slope < -0.3
    assert all(rep.bound_ok)
