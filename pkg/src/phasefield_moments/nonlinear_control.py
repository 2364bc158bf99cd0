"""Local controllability of the nonlinear system to the trajectories (0, c).

The deviation y = (theta, phi - c) obeys the linear system plus the source
g(phi). A source f is absorbed by a relay of short null controls on the
geometric grid T_k = T - T/b^k; a Banach iteration f <- g(phi_f) closes
the loop. Weighted norms use rho_F and rho_0, which vanish at T faster
than any power, so every weighted quantity is kept as a logarithm.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import mpmath as mp
import numpy as np
from scipy.fft import dst

from .biortho import ExponentialDictionary, build_biorth
from .galerkin_sim import _integrate_sampled, _modes, _piece_response
from .linear_control import ControlSignal, FourierState, _SQ2PI, control_cost, synthesize_control
from .spectral import Parameters, SpectrumTable, build_spectrum

PHYS_POINTS = 512


class NoContraction(RuntimeError):
    """The fixed-point map failed to contract."""


class TruncationStop(RuntimeError):
    """The relay ran out of grid before the state became negligible."""

    def __init__(self, residual: float, k: int):
        super().__init__(f"relay stopped at interval {k} with residual {residual:.3e}")
        self.residual = residual
        self.k = k


# ---------------------------------------------------------------- weights


def _check_ab(a: float, b: float) -> None:
    if not a > 1:
        raise ValueError(f"a must exceed 1, got {a}")
    if not (b > 1 and b * b < 2 * a / (a + 1)):
        raise ValueError(f"need 1 < b^2 < 2a/(a+1) = {2 * a / (a + 1):.6g}, got b^2 = {b * b:.6g}")


@dataclass
class WeightSchedule:
    """Weights rho_F, rho_0 and the geometric grid; times to go s = T - t."""

    T: float
    a: float
    b: float
    M: float
    grid: np.ndarray  # T_k, k = 0..K_max
    to_go: np.ndarray  # T / b^k
    info: dict = field(default_factory=dict)

    @property
    def K_max(self) -> int:
        return len(self.grid) - 1

    @property
    def s_flat(self) -> float:
        """Time to go below which the weights stop being constant."""
        return self.T / self.b**2

    def log_rhoF_closed(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore"):
            return -self.b**2 * (self.a + 1) * self.M / ((self.b - 1) * s)

    def log_rho0_closed(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore"):
            return -self.a * self.M / ((self.b - 1) * s)

    def log_rhoF(self, s):
        return self.log_rhoF_closed(np.minimum(s, self.s_flat))

    def log_rho0(self, s):
        return self.log_rho0_closed(np.minimum(s, self.s_flat))

    def rhoF(self, t):
        return np.exp(self.log_rhoF(self.T - np.asarray(t, dtype=float)))

    def rho0(self, t):
        return np.exp(self.log_rho0(self.T - np.asarray(t, dtype=float)))

    def est0_residuals(self, dps: int = 50) -> np.ndarray:
        """|rho0(T_{k+2}) / (rhoF(T_k) e^{M/(T_{k+2}-T_{k+1})}) - 1| on the closed forms."""
        out = []
        with mp.workdps(dps):
            T, a, b, M = (mp.mpf(x) for x in (self.T, self.a, self.b, self.M))
            for k in range(self.K_max - 1):
                s_k, s_k1, s_k2 = T / b**k, T / b ** (k + 1), T / b ** (k + 2)
                lhs = -a * M / ((b - 1) * s_k2)
                rhs = -(b**2) * (a + 1) * M / ((b - 1) * s_k) + M / (s_k1 - s_k2)
                out.append(float(abs(mp.expm1(lhs - rhs))))
        return np.array(out)

    def est0_extension(self) -> list:
        """On the constant part (T_k < T(1 - 1/b^2)) the identity becomes rho0(T_{k+2}) >= RHS."""
        rows = []
        for k in range(min(self.K_max - 1, 8)):
            s_k, s_k1, s_k2 = self.to_go[k], self.to_go[k + 1], self.to_go[k + 2]
            if s_k <= self.s_flat * (1 + 1e-15):
                continue
            lhs = float(self.log_rho0(s_k2))
            rhs = float(self.log_rhoF(s_k) + self.M / (s_k1 - s_k2))
            rows.append({"k": k, "log_lhs": lhs, "log_rhs": rhs, "holds": lhs >= rhs})
        return rows

    def to_dict(self) -> dict:
        return {"T": self.T, "a": self.a, "b": self.b, "M": self.M, "grid": self.grid.tolist(), **self.info}


def weight_ratio_profile(T: float, a: float, b: float, M: float, n: int = 400) -> dict:
    """log of rho0^p / rhoF (p = 2, 3) sampled as t -> T.

    The exponent of rho0^p / rhoF is (b^2 (a+1) - p a) M / ((b-1)(T-t)); the
    ratio stays bounded iff that coefficient is <= 0.
    """
    s = T / b**2 * np.logspace(0, -12, n)
    out = {}
    for p in (2, 3):
        logr = (-p * a + b * b * (a + 1)) * M / ((b - 1) * s)
        growth = bool(np.all(np.diff(logr) > 0) and logr[-1] > 50.0)
        out[f"log_sup_p{p}"] = float(np.max(np.r_[logr, 0.0]))
        out[f"bounded_p{p}"] = not growth
        out[f"divergent_p{p}"] = growth
    out["bounded"] = out["bounded_p2"] and out["bounded_p3"]
    return out


def make_weights(
    T: float,
    a: float = 2.0,
    b: float = 1.1,
    M: float = 1.0,
    dt_min: float | None = None,
) -> WeightSchedule:
    """Weights and grid; the grid stops once T_{k+1} - T_k < dt_min (default T/1e4)."""
    _check_ab(a, b)
    if not (T > 0 and M > 0):
        raise ValueError("T and M must be positive")
    dt_min = T / 1e4 if dt_min is None else dt_min
    to_go = [T]
    while to_go[-1] * (b - 1) / b >= dt_min:
        to_go.append(to_go[-1] / b)
    to_go = np.array(to_go)
    grid = T - to_go
    prof = weight_ratio_profile(T, a, b, M)
    sched = WeightSchedule(T, a, b, M, grid, to_go, {"ratio_profile": prof, "dt_min": dt_min})
    return sched


def calibrate_M(params: Parameters, N: int, T_list=None, precision_bits: int = 256) -> float:
    """Cost exponent M_fit from a linear cost sweep on the same truncation."""
    T_list = np.round(np.arange(0.2, 1.01, 0.1), 10) if T_list is None else T_list
    sweep = control_cost(params, list(T_list), N, N_probe=N, precision_bits=precision_bits)
    if not sweep.M_fit > 0:
        raise ValueError(f"cost fit gave M = {sweep.M_fit}; a positive exponent is required")
    return float(sweep.M_fit)


# ---------------------------------------------------------------- time structure


@dataclass
class TimeMesh:
    """Relay intervals [T_k, T_{k+1}] (the last ends at T), each uniformly refined."""

    starts: np.ndarray
    ends: np.ndarray
    to_go_start: np.ndarray
    substeps: int

    @classmethod
    def from_schedule(cls, sched: WeightSchedule, substeps: int = 64) -> TimeMesh:
        starts = sched.grid.copy()
        ends = np.r_[sched.grid[1:], sched.T]
        return cls(starts, ends, sched.to_go.copy(), substeps)

    @property
    def n_intervals(self) -> int:
        return len(self.starts)

    def local(self, m: int) -> np.ndarray:
        return np.linspace(self.starts[m], self.ends[m], self.substeps + 1)

    def local_to_go(self, m: int) -> np.ndarray:
        h = self.ends[m] - self.starts[m]
        return self.to_go_start[m] - np.linspace(0.0, h, self.substeps + 1)

    def times(self) -> np.ndarray:
        return np.concatenate([self.local(m) for m in range(self.n_intervals)])


def _log_l2_weighted(values: list, log_w: list, mesh: TimeMesh, window: int | None = None) -> float:
    """log sqrt(sum_{m < window} int |values|^2 / w^2 dt) by the trapezoid rule."""
    logs = []
    for m in range(mesh.n_intervals if window is None else window):
        h = (mesh.ends[m] - mesh.starts[m]) / mesh.substeps
        q = np.full(mesh.substeps + 1, h)
        q[0] = q[-1] = h / 2
        mag = values[m]
        with np.errstate(divide="ignore"):
            lv = 2 * np.log(np.abs(mag)) - 2 * log_w[m]
        ok = np.isfinite(log_w[m]) & (mag != 0)
        logs.append(lv[ok] + np.log(q[ok]))
    allv = np.concatenate(logs) if logs else np.array([])
    if allv.size == 0:
        return -math.inf
    mx = np.max(allv)
    return float(0.5 * (mx + math.log(np.sum(np.exp(allv - mx)))))


# ---------------------------------------------------------------- sources


@dataclass
class WeightedSource:
    """Source on the relay mesh: coeffs[m] has shape (substeps + 1, N, 2)."""

    mesh: TimeMesh
    coeffs: list
    log_F_norm: float
    tail: float = 0.0

    @property
    def F_norm(self) -> float:
        return math.exp(self.log_F_norm) if self.log_F_norm < 700 else math.inf

    @property
    def N(self) -> int:
        return self.coeffs[0].shape[1]

    @classmethod
    def zero(cls, mesh: TimeMesh, N: int) -> WeightedSource:
        return cls(mesh, [np.zeros((mesh.substeps + 1, N, 2)) for _ in range(mesh.n_intervals)], -math.inf)

    def is_zero(self) -> bool:
        return all(not np.any(c) for c in self.coeffs)


def log_F_norm(coeffs: list, mesh: TimeMesh, sched: WeightSchedule, window: int | None = None) -> float:
    """log ||f / rho_F||_{L2} over the first ``window`` relay intervals (default: all)."""
    mags = [np.sqrt(np.sum(c**2, axis=(1, 2))) for c in coeffs]
    lw = [sched.log_rhoF(mesh.local_to_go(m)) for m in range(mesh.n_intervals)]
    return _log_l2_weighted(mags, lw, mesh, window)


def tail_l2(coeffs: list, mesh: TimeMesh, window: int) -> float:
    """Unweighted L2(Q) norm of a source on the intervals from ``window`` on."""
    tot = 0.0
    for m in range(window, mesh.n_intervals):
        h = (mesh.ends[m] - mesh.starts[m]) / mesh.substeps
        q = np.full(mesh.substeps + 1, h)
        q[0] = q[-1] = h / 2
        tot += float(np.sum(q * np.sum(coeffs[m] ** 2, axis=(1, 2))))
    return math.sqrt(tot)


def g_terms(phi: np.ndarray, c: int, params: Parameters) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise (g1, g2) of the deviation phi for trajectory constant c."""
    rho, tau = params.rho, params.tau
    p2, p3 = phi * phi, phi * phi * phi
    if c == 0:
        return rho / (4 * tau) * p3, -p3 / (2 * tau)
    return c * 3 * rho / (4 * tau) * p2 + rho / (4 * tau) * p3, -c * 3 / (2 * tau) * p2 - p3 / (2 * tau)


def _synth_matrix(N: int, n: int) -> np.ndarray:
    x = np.arange(1, n + 1) * math.pi / (n + 1)
    return _SQ2PI * np.sin(np.outer(x, np.arange(1, N + 1)))


def _project(values: np.ndarray, n: int) -> np.ndarray:
    """Sine coefficients (all n of them) of interior samples along axis -1."""
    return dst(values, type=1, axis=-1) * (math.pi / (n + 1)) * _SQ2PI / 2.0


def nonlinearity_coeffs(phi_coeffs: np.ndarray, c: int, params: Parameters, n: int = PHYS_POINTS):
    """Pseudo-spectral g(phi) for phi given by sine coefficients (..., N).

    Returns the first N coefficients of (g1, g2), shape (..., N, 2), and the
    relative size of the discarded tail.
    """
    N = phi_coeffs.shape[-1]
    S = _synth_matrix(N, n)
    phi = phi_coeffs @ S.T
    g1, g2 = g_terms(phi, c, params)
    G1, G2 = _project(g1, n), _project(g2, n)
    full = np.sqrt(np.sum(G1**2) + np.sum(G2**2))
    tail = np.sqrt(np.sum(G1[..., N:] ** 2) + np.sum(G2[..., N:] ** 2))
    out = np.stack([G1[..., :N], G2[..., :N]], axis=-1)
    return out, float(tail / full) if full > 0 else 0.0


def nonlinearity(
    phi_field,
    c: int,
    params: Parameters,
    mesh: TimeMesh | None = None,
    sched: WeightSchedule | None = None,
    window: int | None = None,
):
    """g(phi) as sine coefficients, evaluated on 512 physical points.

    ``phi_field`` is an array of phi sine coefficients (..., N) or, together
    with a mesh, a list of such arrays per relay interval; with a schedule
    the result is a WeightedSource carrying its F-norm.
    """
    if isinstance(phi_field, list):
        if mesh is None:
            raise ValueError("a mesh is required for interval-wise data")
        parts, tails = [], []
        for ph in phi_field:
            g, t = nonlinearity_coeffs(ph, c, params)
            parts.append(g)
            tails.append(t)
        lf = log_F_norm(parts, mesh, sched, window) if sched is not None else math.nan
        return WeightedSource(mesh, parts, lf, max(tails))
    return nonlinearity_coeffs(np.asarray(phi_field, dtype=float), c, params)


# ---------------------------------------------------------------- relay


@dataclass
class RelayResult:
    v: ControlSignal
    Y: list  # per interval: (substeps + 1, N, 2) state coefficients
    mesh: TimeMesh
    a_norms: list
    K_used: int
    log_v_V_norm: float
    log_Y_norm: float
    terminal: FourierState
    residual: float
    knot_jumps: list
    info: dict = field(default_factory=dict)

    @property
    def v_V_norm(self) -> float:
        return math.exp(min(self.log_v_V_norm, 700))

    @property
    def Y_Y0_norm(self) -> float:
        return math.exp(min(self.log_Y_norm, 700))

    def phi_coeffs(self) -> list:
        return [y[..., 1] for y in self.Y]


class _FamilyCache:
    def __init__(self, spectrum: SpectrumTable, precision_bits: int, tol: float):
        self.spec = spectrum
        self.bits = precision_bits
        self.tol = tol
        self.store = {}

    def get(self, h: float):
        key = float(h)
        if key not in self.store:
            d = ExponentialDictionary(key, tuple(self.spec.Lambda))
            self.store[key] = build_biorth(d, precision_bits=self.bits, tol=self.tol)
        return self.store[key]


def _source_run(md, f_parts: list, mesh: TimeMesh, m0: int, m1: int) -> list:
    """Zero-initial response to f over intervals m0..m1-1, chained; eigen coords."""
    out = []
    alpha = np.zeros(md.lam.shape)
    for m in range(m0, m1):
        h = (mesh.ends[m] - mesh.starts[m]) / mesh.substeps
        loc = np.linspace(0.0, mesh.ends[m] - mesh.starts[m], mesh.substeps + 1)
        free = alpha[None] * np.exp(-md.lam[None] * loc[:, None, None])
        g = np.einsum("tkc,kjc->tkj", f_parts[m], md.phi)
        forced = _integrate_sampled(md.lam, g, h) if np.any(g) else 0.0
        a = free + forced
        out.append(a)
        alpha = a[-1]
    return out


def _controlled_run(md, a0: np.ndarray, piece, mesh: TimeMesh, m0: int, m1: int) -> list:
    """Response to initial state a0 (eigen coords) at T_{m0} plus one control piece."""
    t0 = mesh.starts[m0]
    out = []
    for m in range(m0, m1):
        t = mesh.local(m)
        a = a0[None] * np.exp(-md.lam[None] * (t - t0)[:, None, None])
        if piece is not None:
            a = a + _piece_response(md.lam, md.beta, piece, t, t0)
        out.append(a)
    return out


def relay_control(
    params: Parameters,
    y0: FourierState,
    f: WeightedSource,
    sched: WeightSchedule,
    spectrum: SpectrumTable,
    N: int | None = None,
    tol_terminal: float = 1e-4,
    precision_bits: int = 256,
    biorth_tol: float = 1e-12,
    cache: _FamilyCache | None = None,
    strict: bool = False,
) -> RelayResult:
    """Null control of the linear system with source f by the relay construction.

    On Q_k the zero-initial response to f gives a_{k+1}; the state a_k is
    killed by a fresh null control of horizon T_{k+1} - T_k. The relay stops
    at the first k whose interval is below dt_min or with
    ||a_k|| <= 1e-2 tol_terminal ||y0||, and one last linear control drives
    a_k to zero on [T_k, T].
    """
    N = spectrum.N if N is None else N
    if N != spectrum.N or f.N != N:
        raise ValueError("mode counts of spectrum, source and N must agree")
    mesh = f.mesh
    md = _modes(params, N)
    cache = cache or _FamilyCache(spectrum, precision_bits, biorth_tol)
    y0 = y0.padded(N)
    scale0 = y0.mixed_norm()
    stop_at = 1e-2 * tol_terminal * scale0
    n_int = mesh.n_intervals
    Y_alpha = [None] * n_int
    pieces = []
    a = y0
    a_norms = [a.mixed_norm()]
    k = 0
    reason = "grid"
    while True:
        last = k == n_int - 1 or a_norms[-1] <= stop_at
        if last:
            reason = "grid" if k == n_int - 1 and a_norms[-1] > stop_at else "small"
        m1 = n_int if last else k + 1
        h = mesh.ends[m1 - 1] - mesh.starts[k]
        piece = None
        if a.mixed_norm() > 0:
            fam = cache.get(h)
            sig = synthesize_control(a, spectrum, fam, h, t0=float(mesh.starts[k]))
            piece = sig.pieces[0]
            pieces.append(sig)
        alpha_a = np.einsum("kc,kjc->kj", a.coeffs, md.phi)
        hat = _controlled_run(md, alpha_a, piece, mesh, k, m1)
        til = _source_run(md, f.coeffs, mesh, k, m1)
        for i, m in enumerate(range(k, m1)):
            Y_alpha[m] = hat[i] + til[i]
        a_next = FourierState(np.einsum("kj,kjc->kc", til[-1][-1], md.psi))
        if last:
            residual = a_next.mixed_norm()
            break
        a = a_next
        a_norms.append(a.mixed_norm())
        k += 1
    K_used = k
    Y = [np.einsum("tkj,kjc->tkc", al, md.psi) for al in Y_alpha]
    terminal = FourierState(Y[-1][-1])
    jumps = []
    for m in range(1, n_int):
        left, right = Y[m - 1][-1], Y[m][0]
        scale = 1.0 + max(np.max(np.abs(Y[m - 1])), np.max(np.abs(Y[m])))
        jumps.append(FourierState(right - left).norm("H-1") / scale)
    v = ControlSignal.concatenate(pieces, sched.T) if pieces else ControlSignal.zero(sched.T)
    # weighted norms
    # weighted norms over the relayed intervals; the remainder is reported unweighted
    window = max(K_used, 1)
    vmag = [v.evaluate(mesh.local(m)) if pieces else np.zeros(mesh.substeps + 1) for m in range(window)]
    lw0 = [sched.log_rho0(mesh.local_to_go(m)) for m in range(window)]
    log_v = _log_l2_weighted(vmag, lw0, mesh, window)
    th = [np.sqrt(np.sum(y[..., 0] ** 2, axis=1)) for y in Y[:window]]
    log_th = _log_l2_weighted(th, lw0, mesh, window)
    S = _synth_matrix(N, 128)
    log_c0 = -math.inf
    for m in range(window):
        pm = np.max(np.abs(Y[m][..., 1] @ S.T), axis=1)
        with np.errstate(divide="ignore"):
            lv = np.log(pm) - lw0[m]
        ok = np.isfinite(lw0[m]) & (pm > 0)
        if np.any(ok):
            log_c0 = max(log_c0, float(np.max(lv[ok])))
    mx = max(log_th, log_c0)
    log_Y = -math.inf if mx == -math.inf else float(mx + 0.5 * math.log(math.exp(2 * (log_th - mx)) + math.exp(2 * (log_c0 - mx))))
    if strict and reason == "grid" and residual > tol_terminal * max(scale0, 1e-300):
        raise TruncationStop(residual, K_used)
    return RelayResult(
        v, Y, mesh, a_norms, K_used, log_v, log_Y, terminal, residual, jumps,
        {"stop_reason": reason, "families": len(cache.store), "window": window},
    )


# ---------------------------------------------------------------- fixed point


@dataclass
class FixedPointResult:
    f_star: WeightedSource
    v: ControlSignal
    relay: RelayResult
    iterations: int
    contraction_est: float
    converged: bool
    log: list
    terminal_ratio: float
    params: Parameters
    info: dict = field(default_factory=dict)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["n", "log_F_norm_f", "log_F_norm_diff", "contraction", "terminal_H-1"])
        for row in self.log:
            w.writerow([row["n"], repr(row["log_F"]), repr(row["log_dF"]), repr(row["factor"]), repr(row["terminal"])])
        return buf.getvalue()

    def manifest(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "iterations": self.iterations,
            "converged": self.converged,
            "contraction_est": self.contraction_est,
            "terminal_ratio": self.terminal_ratio,
            "K_used": self.relay.K_used,
            "a_norms": self.relay.a_norms,
            "log_v_V_norm": self.relay.log_v_V_norm,
            "log_Y_norm": self.relay.log_Y_norm,
            "v_l2": self.v.l2_norm,
            "log": self.log,
            **self.info,
        }


def fixed_point(
    params: Parameters,
    y0: FourierState,
    T: float,
    sched: WeightSchedule,
    N: int,
    max_iter: int = 15,
    tol_fp: float = 1e-10,
    substeps: int = 64,
    precision_bits: int = 256,
    tol_terminal: float = 1e-4,
) -> FixedPointResult:
    """Banach iteration f_{n+1} = g(phi of relay(y0, f_n)) from f_0 = 0.

    Convergence is declared when ||f_{n+1} - f_n||_F <= tol_fp ||f_{n+1}||_F
    (or f_{n+1} = 0). Difference ratios are taken over the relay window and
    only once it has been unchanged for three iterations. NoContraction is
    raised after three consecutive such ratios above 1, or on overflow.
    """
    if not math.isclose(sched.T, T, rel_tol=1e-14):
        raise ValueError("schedule horizon differs from T")
    spec = build_spectrum(params, N)
    mesh = TimeMesh.from_schedule(sched, substeps)
    cache = _FamilyCache(spec, precision_bits, 1e-12)
    f = WeightedSource.zero(mesh, N)
    log, factors = [], []
    prev_diff = None
    windows = []
    bad = 0
    n0 = max(y0.norm("H-1"), 1e-300)
    converged = False
    for n in range(1, max_iter + 1):
        rel = relay_control(params, y0, f, sched, spec, N, tol_terminal=tol_terminal, cache=cache)
        window = rel.info["window"]
        with np.errstate(over="ignore", invalid="ignore"):
            f_new = nonlinearity(rel.phi_coeffs(), params.c, params, mesh, sched, window)
        if not all(np.all(np.isfinite(c)) for c in f_new.coeffs):
            raise NoContraction(f"iterate {n} overflowed")
        diff = [a - b for a, b in zip(f_new.coeffs, f.coeffs)]
        ldiff = log_F_norm(diff, mesh, sched, window)
        tail = tail_l2(diff, mesh, window)
        windows.append(window)
        # ratios only count once the relay window has settled: right after it
        # grows the control changes shape on the new interval
        stable = len(windows) >= 3 and windows[-1] == windows[-2] == windows[-3]
        prev_ldiff = None if prev_diff is None else log_F_norm(prev_diff, mesh, sched, window)
        factor = math.nan
        if stable and prev_ldiff is not None and prev_ldiff > -math.inf:
            factor = math.exp(min(ldiff - prev_ldiff, 700))
        term = rel.terminal.norm("H-1")
        log.append(
            {"n": n, "log_F": f_new.log_F_norm, "log_dF": ldiff, "factor": factor, "terminal": term,
             "window": window, "tail_diff_l2": tail}
        )
        if not math.isnan(factor):
            factors.append(factor)
            bad = bad + 1 if factor > 1 else 0
            if bad >= 3:
                raise NoContraction(f"difference ratio above 1 for 3 iterations (last {factor:.3g})")
        f = f_new
        prev_diff = diff
        if ldiff == -math.inf or ldiff - f_new.log_F_norm <= math.log(tol_fp):
            converged = True
            break
    # the control belongs to the last relay; refresh it with the converged source
    rel = relay_control(params, y0, f, sched, spec, N, tol_terminal=tol_terminal, cache=cache)
    est = max(factors) if factors else 0.0
    return FixedPointResult(
        f, rel.v, rel, n, est, converged, log, rel.terminal.norm("H-1") / n0, params,
        {"tail": f.tail, "schedule": sched.to_dict()},
    )


def fixed_point_backoff(params, y0: FourierState, T, sched, N, max_halvings: int = 30, **kw) -> dict:
    """Halve the datum until the iteration contracts; report the largest verified size."""
    scale = 1.0
    attempts = []
    for _ in range(max_halvings + 1):
        y = y0.scaled(scale)
        try:
            res = fixed_point(params, y, T, sched, N, **kw)
            if res.converged and res.contraction_est < 1:
                attempts.append({"scale": scale, "eps": y.mixed_norm(), "ok": True})
                return {"eps": y.mixed_norm(), "scale": scale, "result": res, "attempts": attempts}
            attempts.append({"scale": scale, "eps": y.mixed_norm(), "ok": False, "why": "not converged"})
        except NoContraction as exc:
            attempts.append({"scale": scale, "eps": y.mixed_norm(), "ok": False, "why": str(exc)})
        scale /= 2
    return {"eps": 0.0, "scale": 0.0, "result": None, "attempts": attempts}


# ---------------------------------------------------------------- independent re-simulation


def _etd_coefficients(L: np.ndarray, h: float, n_contour: int = 32):
    """Scalar ETDRK4 coefficients for z = L h by the contour-mean recipe."""
    z = (L * h)[..., None]
    r = np.exp(1j * math.pi * (np.arange(1, n_contour + 1) - 0.5) / n_contour)
    zr = z + r
    E = np.exp(L * h)
    E2 = np.exp(L * h / 2)
    Q = h * np.real(np.mean((np.exp(zr / 2) - 1) / zr, axis=-1))
    f1 = h * np.real(np.mean((-4 - zr + np.exp(zr) * (4 - 3 * zr + zr**2)) / zr**3, axis=-1))
    f2 = h * np.real(np.mean((2 + zr + np.exp(zr) * (-2 + zr)) / zr**3, axis=-1))
    f3 = h * np.real(np.mean((-4 - 3 * zr - zr**2 + np.exp(zr) * (4 - zr)) / zr**3, axis=-1))
    return E, E2, Q, f1, f2, f3


def resimulate(
    params: Parameters,
    y0: FourierState,
    v: ControlSignal,
    T: float,
    N: int,
    knots=None,
    substeps: int = 128,
    dealias: float = 1.5,
) -> dict:
    """ETDRK4 solve of the full nonlinear system with N modes.

    The nonlinearity is evaluated pseudo-spectrally on max(N, 512) points
    padded by the factor ``dealias``. Products of sine series are not
    band-limited in the sine basis, so the grid is never tied to N alone.
    The time mesh refines each interval between
    consecutive ``knots`` (default: control piece ends) uniformly.
    """
    md = _modes(params, N)
    n_phys = int(math.ceil(dealias * max(N, PHYS_POINTS))) + 1
    S = _synth_matrix(N, n_phys)
    if knots is None:
        knots = sorted({0.0, T, *[p.t_start for p in v.pieces], *[p.t_end for p in v.pieces]})
    knots = np.asarray(knots, dtype=float)
    L = -md.lam

    def rhs(alpha, t_vals):
        y = np.einsum("kj,kjc->kc", alpha, md.psi)
        phi = S @ y[:, 1]
        g1, g2 = g_terms(phi, params.c, params)
        G = np.stack([_project(g1, n_phys)[:N], _project(g2, n_phys)[:N]], axis=-1)
        return np.einsum("kc,kjc->kj", G, md.phi) + md.beta * t_vals

    alpha = np.einsum("kc,kjc->kj", y0.padded(N).coeffs, md.phi)
    times, norms = [0.0], [y0.padded(N).norm("H-1")]
    for a, b in zip(knots[:-1], knots[1:]):
        h = (b - a) / substeps
        E, E2, Q, f1, f2, f3 = _etd_coefficients(L, h)
        ts = np.linspace(a, b, 2 * substeps + 1)
        # one-sided values: only the piece covering (a, b) acts on this interval
        mid = 0.5 * (a + b)
        cover = [pc for pc in v.pieces if pc.t_start <= mid < pc.t_end]
        if cover:
            vs = cover[0].evaluate(np.clip(ts, cover[0].t_start, cover[0].t_end))
        elif v.pieces or v.samples is None:
            vs = np.zeros_like(ts)
        else:
            vs = v.evaluate(ts)
        for i in range(substeps):
            vi, vm, ve = vs[2 * i], vs[2 * i + 1], vs[2 * i + 2]
            Nu = rhs(alpha, vi)
            a_ = E2 * alpha + Q * Nu
            Na = rhs(a_, vm)
            b_ = E2 * alpha + Q * Na
            Nb = rhs(b_, vm)
            c_ = E2 * a_ + Q * (2 * Nb - Nu)
            Nc = rhs(c_, ve)
            alpha = E * alpha + f1 * Nu + 2 * f2 * (Na + Nb) + f3 * Nc
            if not np.all(np.isfinite(alpha)):
                return {"terminal": None, "terminal_norm": math.inf, "times": np.array(times), "norms": np.array(norms)}
        times.append(b)
        norms.append(FourierState(np.einsum("kj,kjc->kc", alpha, md.psi)).norm("H-1"))
    term = FourierState(np.einsum("kj,kjc->kc", alpha, md.psi))
    return {"terminal": term, "terminal_norm": term.norm("H-1"), "times": np.array(times), "norms": np.array(norms)}


def mirror_check(params: Parameters, y0: FourierState, T: float, sched: WeightSchedule, N: int, **kw) -> dict:
    """Run c and -c with data y0 and -y0; the trajectories must be negatives of each other."""
    if params.c == 0:
        raise ValueError("mirror symmetry pairs c = +1 with c = -1")
    p_minus = Parameters(params.xi, params.rho, params.tau, -params.c)
    r1 = fixed_point(params, y0, T, sched, N, **kw)
    r2 = fixed_point(p_minus, y0.scaled(-1.0), T, sched, N, **kw)
    worst = 0.0
    for A, B in zip(r1.relay.Y, r2.relay.Y):
        scale = max(np.max(np.abs(A)), 1e-300)
        worst = max(worst, float(np.max(np.abs(A + B)) / scale))
    grid = np.linspace(0.0, T, 257)
    va, vb = r1.v.evaluate(grid), r2.v.evaluate(grid)
    vscale = max(np.max(np.abs(va)), 1e-300)
    return {"state_mismatch": worst, "control_mismatch": float(np.max(np.abs(va + vb)) / vscale), "plus": r1, "minus": r2}
