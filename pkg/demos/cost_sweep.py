"""Control cost against T and the fit log K = log C0 + M/T."""

from phasefield_moments.linear_control import control_cost
from phasefield_moments.spectral import Parameters

Ts = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
sweep = control_cost(Parameters(1.0, 1.0, 2.0), Ts, 16, N_probe=8)
for row in sweep.rows:
    print(f"T={row[0]:.1f}  K={row[1]:.3e}")
print(f"M_fit={sweep.M_fit:.3f}  R^2={sweep.r2:.4f}")
