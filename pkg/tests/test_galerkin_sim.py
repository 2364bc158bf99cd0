import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from phasefield_moments.galerkin_sim import adjoint_solve, duality_residual, forward_solve, pairing
from phasefield_moments.linear_control import ControlSignal, FourierState, null_control
from phasefield_moments.spectral import Parameters, eigen_pair, mode_matrix

P = Parameters(1.0, 1.0, 2.0, 1)
SQ = math.sqrt(2 / math.pi)


def _random_state(rng, N, decay=1.0):
    k = np.arange(1, N + 1)[:, None]
    return FourierState(rng.standard_normal((N, 2)) / k**decay)


def _rk_oracle(params, y0, vfun, T, N):
    # per mode y' = -(k^2 D + A) y + sqrt(2/pi) k (xi, 0) v, solved by a generic ODE solver
    out = np.zeros((N, 2))
    for k in range(1, N + 1):
        K = np.array(mode_matrix(params, k))
        b = SQ * k * np.array([params.xi, 0.0])
        sol = solve_ivp(lambda t, y: -K @ y + b * vfun(t), (0, T), y0.coeffs[k - 1], rtol=1e-12, atol=1e-14)
        out[k - 1] = sol.y[:, -1]
    return out


def test_eigen_decay_exact():
    for k in (1, 3, 7):
        pair = eigen_pair(P, k)
        for j in (1, 2):
            y0 = FourierState.mode(k, k, pair.psi(j))
            res = forward_solve(P, y0, None, N=k, T=0.8, steps=64)
            for t, s in zip(res.grid_t, res.states):
                expect = np.exp(-pair.eigenvalue(j) * t) * pair.psi(j)
                assert np.max(np.abs(s.coeffs[k - 1] - expect)) <= 1e-10


def test_free_decay_matches_matrix_exponential():
    rng = np.random.default_rng(3)
    y0 = _random_state(rng, 6)
    res = forward_solve(P, y0, None, T=0.7, steps=16)
    for k in range(1, 7):
        expect = expm(-0.7 * np.array(mode_matrix(P, k))) @ y0.coeffs[k - 1]
        assert np.allclose(res.terminal.coeffs[k - 1], expect, atol=1e-13)
    assert res.terminal.norm() <= y0.norm()


def test_atom_control_against_generic_integrator():
    spec_v = null_control(P, FourierState.mode(3, 1, [1.0, 0.0]), 1.0, 3)
    res = forward_solve(P, FourierState.mode(3, 1, [1.0, 0.0]), spec_v, steps=16)
    ref = _rk_oracle(P, FourierState.mode(3, 1, [1.0, 0.0]), lambda t: float(spec_v.evaluate(t)[0]), 1.0, 3)
    assert np.allclose(res.terminal.coeffs, ref, atol=1e-8)
    assert res.terminal.norm() <= 1e-10


def test_sampled_control_against_generic_integrator():
    T = 0.6
    v = ControlSignal.from_samples(T, np.sin(7 * np.linspace(0, T, 4097)) + 0.5)
    y0 = FourierState.mode(4, 2, [0.3, -0.1])
    res = forward_solve(P, y0, v, steps=4096)
    ref = _rk_oracle(P, y0, lambda t: math.sin(7 * t) + 0.5, T, 4)
    assert np.allclose(res.terminal.coeffs, ref, atol=1e-9)


def test_step_halving_order():
    T = 0.5
    f = lambda t: np.array([[math.cos(3 * t), math.sin(t)], [t**2, 1.0]])  # noqa: E731
    y0 = FourierState.zeros(2)
    errs = []
    ref = forward_solve(P, y0, None, f, T=T, steps=8192).terminal.coeffs
    for steps in (64, 128, 256):
        errs.append(np.max(np.abs(forward_solve(P, y0, None, f, T=T, steps=steps).terminal.coeffs - ref)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    # fourth order, approached from below
    assert np.all(orders >= 3.9) and orders[-1] > orders[0]


def test_closed_loop_terminal_and_doubled_resolution():
    y0 = FourierState.mode(16, 1, [1.0, 0.0])
    v = null_control(P, y0, 0.5, 16, patch_horizon=0.25)
    coarse = forward_solve(P, y0, v, N=16, steps=4096)
    fine = forward_solve(P, y0, v, N=32, steps=16384)
    r_c = coarse.terminal.norm() / y0.norm()
    r_f = fine.terminal.norm() / y0.norm()
    assert r_c <= 1e-4
    assert abs(r_f - r_c) <= 0.1 * max(r_c, 1e-4)


def test_adjoint_eigen_trace_closed_form():
    k, T = 3, 0.4
    pair = eigen_pair(P, k)
    for j, sign in ((1, 1.0), (2, -1.0)):
        adj = adjoint_solve(P, FourierState.mode(k, k, pair.phi(j)), N=k, T=T, steps=256)
        t = adj.trace_grid
        expect = sign * SQ * k * P.xi / math.sqrt(P.tau * pair.r_k) * np.exp(-pair.eigenvalue(j) * (T - t))
        assert np.max(np.abs(adj.boundary_trace - expect)) <= 1e-12
        for tt, s in zip(adj.grid_t, adj.states):
            assert np.allclose(s.coeffs[k - 1], np.exp(-pair.eigenvalue(j) * (T - tt)) * pair.phi(j), atol=1e-13)


def test_zero_data():
    adj = adjoint_solve(P, FourierState.zeros(5), T=1.0, steps=32)
    assert not np.any(adj.boundary_trace) and adj.terminal.norm("H1") == 0
    fwd = forward_solve(P, FourierState.zeros(5), ControlSignal.zero(1.0), steps=32)
    assert fwd.terminal.norm() == 0
    assert duality_residual(P, FourierState.zeros(4), None, None, FourierState.zeros(4), 4, T=1.0) == 0


def test_duality_single_modes():
    pair = eigen_pair(P, 2)
    y0 = FourierState.mode(2, 2, pair.psi1)
    phi0 = FourierState.mode(2, 2, pair.phi1)
    assert duality_residual(P, y0, None, None, phi0, 2, T=0.9) <= 1e-10


def test_duality_random_trials():
    rng = np.random.default_rng(20261014)
    worst = 0.0
    for _ in range(20):
        N = 8
        y0 = _random_state(rng, N)
        phi0 = _random_state(rng, N, decay=2.0)
        T = float(rng.uniform(0.3, 1.0))
        v = ControlSignal.from_samples(T, rng.standard_normal() * np.cos(rng.uniform(1, 6) * np.linspace(0, T, 4097)))
        worst = max(worst, duality_residual(P, y0, v, None, phi0, N, steps=4096))
    assert worst <= 1e-6


def test_duality_with_source_and_atoms():
    rng = np.random.default_rng(5)
    y0 = _random_state(rng, 4)
    v = null_control(P, y0, 0.8, 4)
    f = lambda t: np.array([[math.sin(t), 0.2], [0.0, t], [0.1, 0.0], [0.0, 0.0]])  # noqa: E731
    phi0 = _random_state(rng, 4, decay=2.0)
    assert duality_residual(P, y0, v, None, phi0, 4, steps=4096) <= 1e-10
    assert duality_residual(P, y0, v, f, phi0, 4, steps=4096) <= 1e-6


def test_scale_invariance():
    rng = np.random.default_rng(6)
    y0 = _random_state(rng, 5)
    v = ControlSignal.from_samples(0.5, np.linspace(0, 1, 513) ** 2)
    a = forward_solve(P, y0, v, steps=512)
    b = forward_solve(P, y0.scaled(1e3), v.scaled(1e3), steps=512)
    assert np.allclose(b.terminal.coeffs, 1e3 * a.terminal.coeffs, rtol=1e-13, atol=0)


def test_mode_count_rejected():
    with pytest.raises(ValueError):
        forward_solve(P, FourierState.zeros(6), None, N=4, T=1.0)
    with pytest.raises(ValueError):
        adjoint_solve(P, FourierState.zeros(6), N=4)
    with pytest.raises(ValueError):
        forward_solve(P, FourierState.zeros(2), None, f=np.zeros((5, 3, 2)), N=2, T=1.0, steps=4)


def test_norms_trace_and_csv():
    rng = np.random.default_rng(7)
    res = forward_solve(P, _random_state(rng, 4), None, T=1.0, steps=128, record_every=8)
    assert len(res.grid_t) == len(res.states) == res.norms_trace.shape[0] == 17
    for s, row in zip(res.states, res.norms_trace):
        assert row[0] == pytest.approx(s.component_norm(0, "H-1"), rel=1e-12)
        assert row[5] == pytest.approx(s.component_norm(1, "H1"), rel=1e-12)
    lines = res.to_csv().split("\r\n")
    assert lines[0] == "t,theta_H-1,phi_H-1,theta_L2,phi_L2,boundary_trace"
    x, vals = res.physical(-1, 64)
    assert vals.shape == (64, 2)


def test_pairing_is_coefficient_dot():
    a = FourierState(np.array([[1.0, 2.0]]))
    b = FourierState(np.array([[3.0, -1.0], [5.0, 5.0]]))
    assert pairing(a, b) == 1.0
