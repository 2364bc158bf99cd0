"""Spectral-Galerkin solver for the forward and adjoint linear systems.

Each sine mode is a 2x2 linear ODE, diagonalized by the closed-form
eigenvectors. Free evolution is exact. Controls given as exponential
pieces are convolved in closed form in multiprecision (their weights can
be huge and cancel); sampled controls and sources go through a fourth
order exponential quadrature on the uniform step grid.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import mpmath as mp
import numpy as np
from scipy.integrate import simpson

from .linear_control import SPACES, ControlSignal, FourierState, _SQ2PI
from .spectral import Parameters, eigen_pair


@dataclass
class _Modes:
    lam: np.ndarray  # (N, 2)
    psi: np.ndarray  # (N, 2, 2): psi[k, j] is the right eigenvector of branch j
    phi: np.ndarray  # (N, 2, 2)
    beta: np.ndarray  # (N, 2) boundary gain in eigen coordinates
    obs: np.ndarray  # (N, 2) boundary observation weight of Phi_kj


def _modes(params: Parameters, N: int) -> _Modes:
    pairs = [eigen_pair(params, k) for k in range(1, N + 1)]
    lam = np.array([[p.lambda1, p.lambda2] for p in pairs])
    psi = np.array([[p.psi1, p.psi2] for p in pairs])
    phi = np.array([[p.phi1, p.phi2] for p in pairs])
    k = np.arange(1, N + 1, dtype=float)[:, None]
    gain = _SQ2PI * k * params.xi * phi[:, :, 0]
    return _Modes(lam, psi, phi, gain, gain)


# ---------------------------------------------------------------- exponential quadrature


def _phi_weights(z: np.ndarray) -> np.ndarray:
    """J_p(z) = int_0^1 e^{-z(1-s)} s^p ds for p = 0..3, elementwise in z."""
    z = np.asarray(z, dtype=float)
    J = np.empty(z.shape + (4,))
    small = np.abs(z) < 1.0
    if np.any(small):
        zs = z[small]
        for p in range(4):
            acc = np.zeros_like(zs)
            term = np.full_like(zs, math.factorial(p) / math.factorial(p + 1))
            for m in range(30):
                acc += term
                term = term * (-zs) / (p + m + 2)
            J[small, p] = acc
    big = ~small
    if np.any(big):
        zb = z[big]
        J[big, 0] = -np.expm1(-zb) / zb
        for p in range(1, 4):
            J[big, p] = (1.0 - p * J[big, p - 1]) / zb
    return J


def _quadrature_kernels(lam: np.ndarray, dt: float) -> dict:
    """Weights of int_{t_n}^{t_n + dt} e^{-lam (t_n + dt - s)} g(s) ds on 4 nodes.

    g is replaced by its cubic interpolant on nodes t_n + (i - shift) dt,
    i = 0..3; shift 1 is the centred stencil, 0 and 2 are used at the ends.
    """
    J = _phi_weights(lam * dt) * dt  # (..., 4)
    out = {}
    for shift in (0, 1, 2):
        offs = np.arange(4, dtype=float) - shift
        Cinv = np.linalg.inv(np.vander(offs, 4, increasing=True))  # coef = Cinv @ g
        out[shift] = J @ Cinv  # (..., 4) weights on the 4 nodes
    return out


def _stencil_shift(n: int, n_steps: int) -> int:
    if n_steps < 3:
        raise ValueError("quadrature needs at least 3 steps")
    if n == 0:
        return 0
    if n == n_steps - 1:
        return 2
    return 1


def _integrate_sampled(lam: np.ndarray, g: np.ndarray, dt: float) -> np.ndarray:
    """Solve a' = -lam a + g(t), a(0) = 0, on the grid; g shape (n_t, ...)."""
    n_steps = g.shape[0] - 1
    W = _quadrature_kernels(lam, dt)
    E = np.exp(-lam * dt)
    out = np.zeros_like(g)
    a = np.zeros(g.shape[1:])
    for n in range(n_steps):
        sh = _stencil_shift(n, n_steps)
        start = n - sh
        w = W[sh]
        inc = sum(w[..., i] * g[start + i] for i in range(4))
        a = E * a + inc
        out[n + 1] = a
    return out


# ---------------------------------------------------------------- results


@dataclass
class SimulationResult:
    """Snapshots of a forward or adjoint run."""

    params: Parameters
    grid_t: np.ndarray
    states: list
    terminal: FourierState
    norms_trace: np.ndarray  # (n_snap, 6): theta/phi in H^-1, L2, H1
    boundary_trace: np.ndarray | None = None
    trace_grid: np.ndarray | None = None
    eigen_coords: np.ndarray | None = None  # (n_snap, N, 2)
    info: dict = field(default_factory=dict)

    NORM_COLUMNS = ("theta_H-1", "phi_H-1", "theta_L2", "phi_L2", "theta_H1", "phi_H1")

    def norm_at(self, i: int, space: str = "H-1") -> float:
        return self.states[i].norm(space)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["t", "theta_H-1", "phi_H-1", "theta_L2", "phi_L2", "boundary_trace"])
        bt = None
        if self.boundary_trace is not None and self.trace_grid is not None:
            bt = np.interp(self.grid_t, self.trace_grid, self.boundary_trace)
        for i, t in enumerate(self.grid_t):
            row = [repr(float(t))] + [repr(float(x)) for x in self.norms_trace[i, :4]]
            row.append("" if bt is None else repr(float(bt[i])))
            w.writerow(row)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "grid_t": self.grid_t.tolist(),
            "states": [s.coeffs.tolist() for s in self.states],
            "norms_trace": self.norms_trace.tolist(),
            "boundary_trace": None if self.boundary_trace is None else self.boundary_trace.tolist(),
            "info": self.info,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def physical(self, i: int = -1, n_points: int = 512) -> tuple[np.ndarray, np.ndarray]:
        return self.states[i].to_physical(n_points)


def _assemble(params, grid, alpha, vecs, tag, **extra) -> SimulationResult:
    # alpha (n_snap, N, 2) eigen coordinates, vecs (N, 2, 2) reconstruction vectors
    states = [FourierState(np.einsum("kj,kjc->kc", a, vecs), tag) for a in alpha]
    norms = np.array([[s.component_norm(c, sp) for sp in SPACES for c in (0, 1)] for s in states])
    return SimulationResult(params, grid, states, states[-1], norms, eigen_coords=alpha, **extra)


# ---------------------------------------------------------------- sources


def _source_samples(f, N: int, grid: np.ndarray) -> np.ndarray | None:
    """Sine coefficients of the source on the step grid, shape (n_t, N, 2)."""
    if f is None:
        return None
    if callable(f):
        vals = [f(float(t)) for t in grid]
        arr = np.array([v.coeffs if isinstance(v, FourierState) else np.asarray(v, float) for v in vals])
    else:
        arr = np.asarray(f, dtype=float)
    if arr.ndim != 3 or arr.shape[0] != grid.size or arr.shape[2] != 2:
        raise ValueError(f"source must have shape ({grid.size}, N, 2), got {arr.shape}")
    if arr.shape[1] > N:
        raise ValueError(f"source has {arr.shape[1]} modes, simulation has {N}")
    if arr.shape[1] < N:
        arr = np.concatenate([arr, np.zeros((grid.size, N - arr.shape[1], 2))], axis=1)
    return arr


def _snapshot_indices(steps: int, record_every: int | None) -> np.ndarray:
    if record_every is None:
        record_every = max(1, steps // 64)
    idx = np.arange(0, steps + 1, record_every)
    if idx[-1] != steps:
        idx = np.append(idx, steps)
    return idx


def _piece_response(lam: np.ndarray, beta: np.ndarray, piece, times: np.ndarray, t0: float) -> np.ndarray:
    """int_{t0}^{t} e^{-lam (t - s)} beta v_piece(s) ds at each time, exact.

    lam, beta shape (N, 2); result (len(times), N, 2).
    """
    out = np.zeros((times.size,) + lam.shape)
    a, b = piece.t_start, piece.t_end
    inside = np.flatnonzero((times > a) & (times < b))
    after = np.flatnonzero(times >= b)
    with mp.workprec(piece.bits):
        Lam = [mp.mpf(x) for x in piece.exponents]
        W = piece.weights
        am, bm = mp.mpf(a), mp.mpf(b)
        h = bm - am
        e_full = [mp.exp(-L * h) for L in Lam]
        E_in = [[mp.exp(-L * (bm - mp.mpf(float(times[i])))) for L in Lam] for i in inside]
        for k in range(lam.shape[0]):
            for j in range(2):
                lm = mp.mpf(float(lam[k, j]))
                c = [w / (lm + L) for w, L in zip(W, Lam)]
                tail = mp.fdot(c, e_full)
                if after.size:
                    at_b = mp.fsum(c) - mp.exp(-lm * h) * tail
                    val_b = float(at_b)
                    out[after, k, j] = beta[k, j] * val_b * np.exp(-lam[k, j] * (times[after] - b))
                for n, i in enumerate(inside):
                    t = mp.mpf(float(times[i]))
                    val = mp.fdot(c, E_in[n]) - mp.exp(-lm * (t - am)) * tail
                    out[i, k, j] = beta[k, j] * float(val)
    return out


def forward_solve(
    params: Parameters,
    y0: FourierState,
    v: ControlSignal | None = None,
    f=None,
    N: int | None = None,
    steps: int = 4096,
    T: float | None = None,
    record_every: int | None = None,
) -> SimulationResult:
    """Controlled forward run on [0, T] with N sine modes.

    ``f`` is None, a callable t -> (N, 2) coefficients, or an array
    (steps + 1, N, 2) sampled on the uniform step grid. Snapshots are
    recorded every ``record_every`` steps (default: 64 snapshots) and
    always include t = T.
    """
    N = y0.N if N is None else int(N)
    if y0.N > N:
        raise ValueError(f"initial datum has {y0.N} modes, simulation has {N}")
    if T is None:
        if v is None:
            raise ValueError("T is required when no control is given")
        T = v.T
    if steps < 3:
        raise ValueError("steps must be at least 3")
    md = _modes(params, N)
    grid = np.linspace(0.0, T, steps + 1)
    idx = _snapshot_indices(steps, record_every)
    times = grid[idx]
    y0 = y0.padded(N)
    alpha0 = np.einsum("kc,kjc->kj", y0.coeffs, md.phi)
    alpha = alpha0[None] * np.exp(-md.lam[None] * times[:, None, None])
    if v is not None and not v.is_zero:
        if v.pieces:
            for piece in v.pieces:
                alpha += _piece_response(md.lam, md.beta, piece, times, 0.0)
        else:
            vs = np.interp(grid, np.linspace(0.0, v.T, v.samples.size), v.samples)
            g = vs[:, None, None] * md.beta[None]
            alpha += _integrate_sampled(md.lam, g, T / steps)[idx]
    fs = _source_samples(f, N, grid)
    if fs is not None:
        g = np.einsum("tkc,kjc->tkj", fs, md.phi)
        alpha += _integrate_sampled(md.lam, g, T / steps)[idx]
    res = _assemble(params, times, alpha, md.psi, "H-1")
    res.info = {"kind": "forward", "N": N, "steps": steps, "T": T}
    return res


def adjoint_solve(
    params: Parameters,
    phi0: FourierState,
    g=None,
    N: int | None = None,
    steps: int = 4096,
    T: float = 1.0,
    record_every: int | None = None,
) -> SimulationResult:
    """Backward adjoint run from phi(T) = phi0 down to t = 0.

    The boundary observation sqrt(2/pi) sum_k k xi phi_{1,k}(t) is sampled
    on the full step grid.
    """
    N = phi0.N if N is None else int(N)
    if phi0.N > N:
        raise ValueError(f"final datum has {phi0.N} modes, simulation has {N}")
    md = _modes(params, N)
    grid = np.linspace(0.0, T, steps + 1)
    idx = _snapshot_indices(steps, record_every)
    phi0 = phi0.padded(N)
    # gamma_kj = <phi_k, psi_j>, phi_k = sum_j gamma_kj Phi_j
    gamma_T = np.einsum("kc,kjc->kj", phi0.coeffs, md.psi)
    s = T - grid  # time to go
    gamma = gamma_T[None] * np.exp(-md.lam[None] * s[:, None, None])
    gs = _source_samples(g, N, grid)
    if gs is not None:
        # reverse time: sigma = T - t turns the backward equation forward
        src = np.einsum("tkc,kjc->tkj", gs[::-1], md.psi)
        gamma += _integrate_sampled(md.lam, src, T / steps)[::-1]
    trace = np.sum(gamma * md.obs[None], axis=(1, 2))
    res = _assemble(params, grid[idx], gamma[idx], md.phi, "H1", boundary_trace=trace, trace_grid=grid)
    res.info = {"kind": "adjoint", "N": N, "steps": steps, "T": T, "sourced": gs is not None}
    return res


def pairing(y: FourierState, phi: FourierState) -> float:
    n = min(y.N, phi.N)
    return float(np.sum(y.coeffs[:n] * phi.coeffs[:n]))


def _trace_control_integral(adj: SimulationResult, v: ControlSignal, md: _Modes) -> float:
    """int_0^T B*D*phi_x(0, t) v(t) dt."""
    T = adj.info["T"]
    if v is None or v.is_zero:
        return 0.0
    gamma_T = adj.eigen_coords[-1]
    if v.pieces and not adj.info.get("sourced"):
        # trace = sum obs_kj gamma_kj(T) e^{-lam (T - t)}: exact against exponential pieces
        tot = mp.mpf(0)
        for p in v.pieces:
            with mp.workprec(p.bits):
                a, b = mp.mpf(p.t_start), mp.mpf(p.t_end)
                Tm = mp.mpf(T)
                for k in range(md.lam.shape[0]):
                    for j in range(2):
                        amp = md.obs[k, j] * gamma_T[k, j]
                        if amp == 0:
                            continue
                        lm = mp.mpf(float(md.lam[k, j]))
                        # int_a^b e^{-lm (T - t)} e^{-L (b - t)} dt
                        for w, L in zip(p.weights, p.exponents):
                            L = mp.mpf(L)
                            s = lm + L
                            tot += mp.mpf(amp) * w * mp.exp(-lm * (Tm - b)) * (-mp.expm1(-s * (b - a))) / s
        return float(tot)


    grid = adj.trace_grid
    return float(simpson(adj.boundary_trace * v.evaluate(grid), x=grid))


def duality_residual(
    params: Parameters,
    y0: FourierState,
    v: ControlSignal | None,
    f,
    phi0: FourierState,
    N: int,
    steps: int = 4096,
    T: float | None = None,
) -> float:
    """|LHS - RHS| / (1 + |RHS|) for the transposition identity.

    LHS = int_0^T B*D*phi_x(0,t) v dt + int_0^T <f, phi> dt,
    RHS = <y(T), phi0> - <y0, phi(0)>.
    """
    if T is None:
        if v is None:
            raise ValueError("T is required when no control is given")
        T = v.T
    fwd = forward_solve(params, y0, v, f, N=N, steps=steps, T=T)
    adj = adjoint_solve(params, phi0, None, N=N, steps=steps, T=T, record_every=1 if f is not None else None)
    md = _modes(params, N)
    lhs = _trace_control_integral(adj, v, md)
    if f is not None:
        grid = np.linspace(0.0, T, steps + 1)
        fs = _source_samples(f, N, grid)
        inner = np.array([np.sum(fs[i] * adj.states[i].coeffs) for i in range(grid.size)])
        lhs += float(simpson(inner, x=grid))
    rhs = pairing(fwd.terminal, phi0.padded(N)) - pairing(y0.padded(N), adj.states[0])
    return abs(lhs - rhs) / (1.0 + abs(rhs))


def ucp_witness(params: Parameters, k: int, ell: int, T: float = 1.0, steps: int = 1024) -> dict:
    """Adjoint datum with identically vanishing boundary observation.

    When lambda_ell^(1) = lambda_k^(2), the datum a Phi_ell^(1) + b Phi_k^(2)
    with a = k / sqrt(r_k), b = ell / sqrt(r_ell) has cancelling traces; it
    is normalized to unit H^1_0 norm.
    """
    if not 1 <= k < ell:
        raise ValueError("need 1 <= k < ell")
    pk, pl = eigen_pair(params, k), eigen_pair(params, ell)
    gap = abs(pl.lambda1 - pk.lambda2)
    coeffs = np.zeros((ell, 2))
    coeffs[ell - 1] = k / math.sqrt(pk.r_k) * pl.phi1
    coeffs[k - 1] = ell / math.sqrt(pl.r_k) * pk.phi2
    phi0 = FourierState(coeffs, "H1")
    phi0 = phi0.scaled(1.0 / phi0.norm("H1"))
    adj = adjoint_solve(params, phi0, N=ell, steps=steps, T=T)
    return {
        "phi0": phi0,
        "eigen_gap": gap,
        "trace_sup": float(np.max(np.abs(adj.boundary_trace))),
        "norm_H1": phi0.norm("H1"),
        "adjoint": adj,
    }
