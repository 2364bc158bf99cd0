"""Null control of (eta_1, 0) at T = 0.5 with 16 modes, checked at 32 modes."""

from phasefield_moments.galerkin_sim import forward_solve
from phasefield_moments.linear_control import FourierState, null_control
from phasefield_moments.spectral import Parameters

p = Parameters(1.0, 1.0, 2.0, c=1)
y0 = FourierState.mode(16, 1, [1.0, 0.0])
v = null_control(p, y0, 0.5, 16, patch_horizon=0.25)
print(f"|v|_L2 = {v.l2_norm:.3e}, moment residual {v.diagnostics['moment_residual_abs']:.1e}")
for N, steps in ((16, 4096), (32, 16384)):
    r = forward_solve(p, y0, v, N=N, steps=steps).terminal.norm() / y0.norm()
    print(f"N={N:2d}: |y(T)|/|y0| = {r:.2e}")
