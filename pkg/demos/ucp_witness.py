"""A resonant xi where the adjoint trace vanishes for a nonzero datum."""

from phasefield_moments.galerkin_sim import ucp_witness
from phasefield_moments.spectral import Parameters, check_H2, resonant_xi

xi = resonant_xi(1.0, 2.0, 1, 2)
p = Parameters(xi, 1.0, 2.0)
print(f"xi = {xi:.15f}, H2 holds: {check_H2(p).holds}")
w = ucp_witness(p, 1, 2)
print(f"|phi0|_H1 = {w['norm_H1']:.15f}, sup trace = {w['trace_sup']:.2e}")
