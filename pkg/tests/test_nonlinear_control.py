import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phasefield_moments.galerkin_sim import forward_solve
from phasefield_moments.linear_control import FourierState, null_control
from phasefield_moments.nonlinear_control import (
    NoContraction,
    TimeMesh,
    WeightedSource,
    fixed_point,
    g_terms,
    make_weights,
    mirror_check,
    nonlinearity,
    relay_control,
    resimulate,
    weight_ratio_profile,
)
from phasefield_moments.spectral import Parameters, build_spectrum

P = Parameters(1.0, 1.0, 2.0, 1)
SQ = math.sqrt(2 / math.pi)


# ---------------------------------------------------------------- weights


def test_default_schedule_valid():
    s = make_weights(1.0, 2.0, 1.1, 1.0)
    assert np.all(np.diff(s.grid) > 0) and s.grid[0] == 0.0 and s.grid[-1] < 1.0
    assert s.rho0(1.0) == 0.0 and s.rhoF(1.0) == 0.0
    t = np.linspace(0, 1, 2001)
    assert np.all(np.diff(s.rho0(t)) <= 0) and np.all(np.diff(s.rhoF(t)) <= 0)
    # constant before T (1 - 1/b^2)
    flat = t[t <= 1 - 1 / 1.21]
    assert np.ptp(s.rho0(flat)) == 0.0


@pytest.mark.parametrize("a,b", [(2.0, 1.5), (2.0, 1.0), (1.0, 1.05), (100.0, 1.42)])
def test_schedule_rejected(a, b):
    with pytest.raises(ValueError):
        make_weights(1.0, a, b, 1.0)


def test_est0_identity():
    s = make_weights(1.0, 2.0, 1.1, 1.0)
    r = s.est0_residuals()
    assert r.size == s.K_max - 1 and np.max(r) <= 1e-12
    # k = 0 directly from the closed forms in double precision
    T0, T1, T2 = s.grid[:3]
    lhs = -2 * 1 / (0.1 * (1 - T2))
    rhs = -1.21 * 3 / (0.1 * (1 - T0)) + 1 / (T2 - T1)
    assert math.isclose(lhs, rhs, rel_tol=1e-12)


def test_est0_on_constant_extension_is_an_inequality():
    rows = make_weights(1.0, 2.0, 1.1, 1.0).est0_extension()
    assert rows and all(r["holds"] for r in rows)


def test_ratio_profile():
    assert weight_ratio_profile(1.0, 2.0, 1.1, 1.0)["bounded"]
    prof = weight_ratio_profile(1.0, 2.0, math.sqrt(4 / 3) * 1.01, 1.0)
    assert prof["divergent_p2"] and not prof["bounded"]
    # p = 3 stays bounded longer (needs b^2 (a+1) > 3a)
    assert weight_ratio_profile(1.0, 2.0, math.sqrt(4 / 3) * 1.01, 1.0)["bounded_p3"]


@settings(max_examples=25, deadline=None)
@given(st.floats(1.2, 50.0), st.floats(0.01, 0.99), st.floats(0.2, 3.0))
def test_est0_property(a, frac, M):
    b = math.sqrt(1 + frac * (2 * a / (a + 1) - 1))
    s = make_weights(1.0, a, b, M)
    assert np.max(s.est0_residuals()) <= 1e-12


# ---------------------------------------------------------------- nonlinearity


def test_nonlinearity_zero():
    g, tail = nonlinearity(np.zeros(8), 1, P)
    assert not np.any(g) and tail == 0.0


def test_sign_structure():
    rng = np.random.default_rng(0)
    phi = rng.standard_normal(64)
    g1p, g2p = g_terms(phi, 1, P)
    g1m, g2m = g_terms(phi, -1, P)
    quad1, cub1 = (g1p - g1m) / 2, (g1p + g1m) / 2
    assert np.allclose(quad1, 3 / 8 * phi**2) and np.allclose(cub1, phi**3 / 8)
    assert np.allclose((g2p - g2m) / 2, -0.75 * phi**2) and np.allclose((g2p + g2m) / 2, -phi**3 / 4)
    g1z, g2z = g_terms(phi, 0, P)
    assert np.allclose(g1z, phi**3 / 8) and np.allclose(g2z, -phi**3 / 4)


def test_single_mode_square_parity():
    eps = 1e-2
    phi = np.zeros(64)
    phi[0] = eps
    gp, _ = nonlinearity(phi, 1, P)
    gm, _ = nonlinearity(phi, -1, P)
    quad = (gp - gm)[:, 0] / 2  # (3 rho / 4 tau) phi^2
    k = np.arange(1, 65)
    # sin^2 x has only odd sine modes: int sin^2 x sin kx = -4 / (k (k^2 - 4)) for odd k
    ref = np.where(k % 2 == 1, -4.0 / (k * (k**2 - 4.0)), 0.0) * SQ * (2 / math.pi) * eps**2 * 3 / 8
    even = quad[1::2]
    assert np.max(np.abs(even)) <= 1e-10 * np.max(np.abs(quad))
    assert np.allclose(quad, ref, atol=1e-8 * np.max(np.abs(ref)))


def test_nonlinearity_sign_flip_of_field():
    rng = np.random.default_rng(1)
    phi = rng.standard_normal(6) * 0.1
    a, _ = nonlinearity(phi, 1, P)
    b, _ = nonlinearity(-phi, -1, P)
    assert np.allclose(a, -b, atol=1e-17)


# ---------------------------------------------------------------- relay


@pytest.fixture(scope="module")
def relay_setup():
    N = 4
    sched = make_weights(1.0, 2.0, 1.1, 2.0)
    mesh = TimeMesh.from_schedule(sched, 32)
    return N, sched, mesh, build_spectrum(P, N)


def test_relay_without_source_is_single_control(relay_setup):
    N, sched, mesh, spec = relay_setup
    y0 = FourierState.mode(N, 1, [1.0, 0.5])
    rel = relay_control(P, y0, WeightedSource.zero(mesh, N), sched, spec, N)
    # one control on the first relay interval, nothing left to relay afterwards
    assert rel.K_used == 1 and rel.info["stop_reason"] == "small"
    assert len(rel.v.pieces) == 1
    assert rel.terminal.norm() <= 1e-4 * y0.norm()
    direct = null_control(P, y0, 1.0, N, patch_horizon=float(sched.grid[1]))
    t = np.linspace(0, 1, 33)
    assert np.allclose(rel.v.evaluate(t), direct.evaluate(t), rtol=1e-10, atol=1e-12 * np.max(np.abs(direct.evaluate(t))))


def test_relay_zero(relay_setup):
    N, sched, mesh, spec = relay_setup
    rel = relay_control(P, FourierState.zeros(N), WeightedSource.zero(mesh, N), sched, spec, N)
    assert rel.v.is_zero and all(not np.any(y) for y in rel.Y)


def test_relay_with_source_continuity_and_terminal(relay_setup):
    N, sched, mesh, spec = relay_setup
    coeffs = []
    for m in range(mesh.n_intervals):
        t = mesh.local(m)
        src = np.zeros((t.size, N, 2))
        # decays at T like a member of the weighted source space
        s = (1.0 - t) ** 3
        src[:, 0, 1] = 1e-3 * np.cos(3 * t) * s
        src[:, 1, 0] = 1e-3 * t * s
        coeffs.append(src)
    f = WeightedSource(mesh, coeffs, 0.0, 0.0)
    y0 = FourierState.mode(N, 1, [1e-3, 1e-3])
    rel = relay_control(P, y0, f, sched, spec, N)
    assert rel.K_used >= 1
    assert max(rel.knot_jumps) <= 1e-8
    assert rel.terminal.norm() <= 1e-4 * y0.norm()
    # relay terminal decay along the computed grid
    assert rel.a_norms[-1] < rel.a_norms[1]


def test_relay_matches_linear_simulator(relay_setup):
    N, sched, mesh, spec = relay_setup
    y0 = FourierState.mode(N, 2, [0.2, -0.4])
    rel = relay_control(P, y0, WeightedSource.zero(mesh, N), sched, spec, N)
    sim = forward_solve(P, y0, rel.v, N=N, steps=64)
    assert np.allclose(sim.terminal.coeffs, rel.terminal.coeffs, atol=1e-12)


def test_mode_count_checked(relay_setup):
    N, sched, mesh, spec = relay_setup
    with pytest.raises(ValueError):
        relay_control(P, FourierState.zeros(N), WeightedSource.zero(mesh, N + 1), sched, spec, N)


# ---------------------------------------------------------------- fixed point


def test_fixed_point_at_origin():
    sched = make_weights(1.0, 2.0, 1.1, 1.0)
    r = fixed_point(P, FourierState.zeros(2), 1.0, sched, 2)
    assert r.converged and r.iterations == 1 and r.f_star.is_zero and r.v.is_zero


@pytest.fixture(scope="module")
def small_run():
    sched = make_weights(1.0, 2.0, 1.1, 0.7)
    y0 = FourierState.mode(1, 1, [1e-3, 1e-3])
    return sched, y0, fixed_point(P, y0, 1.0, sched, 1)


def test_fixed_point_converges_single_mode(small_run):
    sched, y0, r = small_run
    assert r.converged and r.iterations <= 15 and r.contraction_est < 1
    assert r.terminal_ratio <= 1e-4
    rs = resimulate(P, y0, r.v, 1.0, 1)
    assert rs["terminal_norm"] <= 1e-3 * y0.norm()
    assert r.log_csv().startswith("n,log_F_norm_f")


def test_halving_data_does_not_add_iterations(small_run):
    sched, y0, r = small_run
    r2 = fixed_point(P, y0.scaled(0.5), 1.0, sched, 1)
    assert r2.converged and r2.iterations <= r.iterations


def test_mirror_symmetry():
    sched = make_weights(1.0, 2.0, 1.1, 0.7)
    m = mirror_check(P, FourierState.mode(1, 1, [1e-3, 2e-3]), 1.0, sched, 1)
    assert m["state_mismatch"] <= 1e-8 and m["control_mismatch"] <= 1e-8


def test_large_data_does_not_contract():
    sched = make_weights(1.0, 2.0, 1.1, 0.7)
    with pytest.raises(NoContraction):
        fixed_point(P, FourierState.mode(2, 1, [5.0, 5.0]), 1.0, sched, 2, max_iter=8)


def test_resimulate_linear_limit():
    # tiny data: the nonlinear solve agrees with the linear closed loop
    y0 = FourierState.mode(3, 1, [1e-8, 0.0])
    v = null_control(P, y0, 1.0, 3)
    lin = forward_solve(P, y0, v, steps=64).terminal
    rs = resimulate(P, y0, v, 1.0, 3, substeps=1024)
    assert np.max(np.abs(rs["terminal"].coeffs - lin.coeffs)) <= 1e-6 * y0.norm()


def test_fixed_point_certificate(small_run):
    # independent re-simulation within 10x of the controller's own terminal norm
    sched, y0, r = small_run
    rs = resimulate(P, y0, r.v, 1.0, 1, substeps=1024)
    assert rs["terminal_norm"] <= 10 * r.terminal_ratio * y0.norm()
