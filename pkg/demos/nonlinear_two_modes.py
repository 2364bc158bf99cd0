"""Fixed-point controller on two modes, with re-simulation at 2 and 4 modes.

The 4-mode number shows what the 2-mode controller does not see.
"""

from phasefield_moments.linear_control import FourierState
from phasefield_moments.nonlinear_control import calibrate_M, fixed_point, make_weights, resimulate
from phasefield_moments.spectral import Parameters

N, T = 2, 1.0
y0 = FourierState.mode(N, 1, [1e-3, 1e-3])
for c in (1, -1):
    p = Parameters(1.0, 1.0, 2.0, c)
    M = calibrate_M(p, N)
    r = fixed_point(p, y0, T, make_weights(T, 100.0, 1.4, M), N)
    print(f"c={c:+d}: M={M:.3f}, {r.iterations} iterations, contraction {r.contraction_est:.1e}")
    for n in (N, 2 * N):
        rs = resimulate(p, y0, r.v, T, n, substeps=512)
        print(f"   resimulated with {n} modes: {rs['terminal_norm'] / y0.norm():.2e}")
