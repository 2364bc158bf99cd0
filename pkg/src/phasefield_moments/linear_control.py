"""Boundary null controls for the linearized system via the moment method.

A state is stored by its sine coefficients y_k = (theta_k, phi_k). In the
eigen coordinates alpha_kj = <y_k, phi_j> every mode decouples into

    alpha' = -lambda_kj alpha + beta_kj v(t),
    beta_kj = sqrt(2/pi) k xi phi_j[0],

so with u(t) = v(T - t) the state vanishes at T iff every moment

    int_0^T e^{-lambda_kj t} u(t) dt = -e^{-lambda_kj T} alpha_kj(0) / beta_kj

holds. The minimal-norm u solving the first N mode pairs lives in the span
of the merged exponential dictionary and is assembled from the
biorthogonal family.
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
from scipy.integrate import simpson

from .biortho import BiorthFamily, ExponentialDictionary, build_biorth, gram_matrix
from .spectral import Parameters, SpectrumTable, build_spectrum

SPACES = ("H-1", "L2", "H1")
_SQ2PI = math.sqrt(2.0 / math.pi)


class IndexMapMismatch(ValueError):
    """Spectrum and biorthogonal family describe different dictionaries."""


def _weights(N: int, space: str) -> np.ndarray:
    k = np.arange(1, N + 1, dtype=float)
    if space == "H-1":
        return 1.0 / k**2
    if space == "L2":
        return np.ones_like(k)
    if space == "H1":
        return k**2
    raise ValueError(f"unknown space {space!r}; expected one of {SPACES}")


@dataclass
class FourierState:
    """Sine coefficients of (theta, phi); row k-1 holds mode k."""

    coeffs: np.ndarray
    space_tag: str = "H-1"

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.ndim == 1 and c.size % 2 == 0:
            c = c.reshape(-1, 2)
        if c.ndim != 2 or c.shape[1] != 2:
            raise ValueError("coeffs must have shape (N, 2)")
        if not np.all(np.isfinite(c)):
            raise ValueError("coeffs must be finite")
        if self.space_tag not in SPACES:
            raise ValueError(f"unknown space {self.space_tag!r}")
        self.coeffs = c

    @property
    def N(self) -> int:
        return self.coeffs.shape[0]

    @classmethod
    def zeros(cls, N: int, space_tag: str = "H-1") -> FourierState:
        return cls(np.zeros((N, 2)), space_tag)

    @classmethod
    def mode(cls, N: int, k: int, vec, space_tag: str = "H-1") -> FourierState:
        c = np.zeros((N, 2))
        c[k - 1] = vec
        return cls(c, space_tag)

    def component_norm(self, component: int, space: str | None = None) -> float:
        w = _weights(self.N, space or self.space_tag)
        return float(math.sqrt(np.sum(w * self.coeffs[:, component] ** 2)))

    def norm(self, space: str | None = None) -> float:
        w = _weights(self.N, space or self.space_tag)
        return float(math.sqrt(np.sum(w[:, None] * self.coeffs**2)))

    def mixed_norm(self) -> float:
        """||theta||_{H^-1} + ||phi||_{H^1_0}."""
        return self.component_norm(0, "H-1") + self.component_norm(1, "H1")

    def norms(self) -> dict:
        out = {}
        for s in SPACES:
            out[f"theta_{s}"] = self.component_norm(0, s)
            out[f"phi_{s}"] = self.component_norm(1, s)
        return out

    def padded(self, N: int) -> FourierState:
        if N < self.N:
            raise ValueError(f"cannot pad {self.N} modes down to {N}")
        c = np.zeros((N, 2))
        c[: self.N] = self.coeffs
        return FourierState(c, self.space_tag)

    def __add__(self, other: FourierState) -> FourierState:
        N = max(self.N, other.N)
        return FourierState(self.padded(N).coeffs + other.padded(N).coeffs, self.space_tag)

    def __sub__(self, other: FourierState) -> FourierState:
        N = max(self.N, other.N)
        return FourierState(self.padded(N).coeffs - other.padded(N).coeffs, self.space_tag)

    def scaled(self, s: float) -> FourierState:
        return FourierState(s * self.coeffs, self.space_tag)

    # physical space: eta_k(x) = sqrt(2/pi) sin(k x) on interior points x_i = i pi/(n+1)

    def to_physical(self, n_points: int = 512) -> tuple[np.ndarray, np.ndarray]:
        x = np.arange(1, n_points + 1) * math.pi / (n_points + 1)
        S = np.sin(np.outer(x, np.arange(1, self.N + 1)))
        return x, _SQ2PI * S @ self.coeffs

    @classmethod
    def from_physical(cls, values: np.ndarray, N: int, space_tag: str = "H-1") -> FourierState:
        """Exact discrete sine transform of interior samples (n, 2)."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = np.stack([values, np.zeros_like(values)], axis=1)
        n = values.shape[0]
        if N > n:
            raise ValueError("more modes requested than samples")
        coef = dst(values, type=1, axis=0)[:N] * (math.pi / (n + 1)) * _SQ2PI / 2.0
        return cls(coef, space_tag)

    def to_dict(self) -> dict:
        return {"space_tag": self.space_tag, "coeffs": self.coeffs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> FourierState:
        return cls(np.array(d["coeffs"], dtype=float), d.get("space_tag", "H-1"))


# ---------------------------------------------------------------- control signals


@dataclass
class ControlPiece:
    """v(t) = sum_i weights[i] e^{-exponents[i] (t_end - t)} on [t_start, t_end)."""

    t_start: float
    t_end: float
    weights: list
    exponents: tuple
    bits: int

    @property
    def length(self) -> float:
        return self.t_end - self.t_start

    def evaluate(self, t: np.ndarray) -> np.ndarray:
        out = np.zeros(t.shape)
        mask = (t >= self.t_start) & (t <= self.t_end)
        with mp.workprec(self.bits):
            lam = [mp.mpf(x) for x in self.exponents]
            b = mp.mpf(self.t_end)
            for idx in np.flatnonzero(mask):
                s = b - mp.mpf(float(t[idx]))
                out[idx] = float(mp.fsum(w * mp.exp(-a * s) for w, a in zip(self.weights, lam)))
        return out

    def l2_squared(self) -> mp.mpf:
        d = ExponentialDictionary(self.length, self.exponents)
        with mp.workprec(self.bits):
            G = gram_matrix(d, self.bits)
            w = mp.matrix(self.weights)
            return (w.T * G * w)[0]

    def to_dict(self) -> dict:
        digits = int(self.bits * math.log10(2)) + 2
        return {
            "t_start": self.t_start,
            "t_end": self.t_end,
            "bits": self.bits,
            "exponents": list(self.exponents),
            "weights": [mp.nstr(w, digits) for w in self.weights],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ControlPiece:
        bits = int(d["bits"])
        with mp.workprec(bits):
            w = [mp.mpf(x) for x in d["weights"]]
        return cls(float(d["t_start"]), float(d["t_end"]), w, tuple(d["exponents"]), bits)


@dataclass
class ControlSignal:
    """Scalar boundary control on [0, T].

    Either a list of exponential pieces (exact) or a uniform sample trace
    on [0, T]; a signal built from pieces may also carry samples.
    """

    T: float
    pieces: list = field(default_factory=list)
    samples: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def zero(cls, T: float) -> ControlSignal:
        return cls(T)

    @classmethod
    def from_samples(cls, T: float, samples) -> ControlSignal:
        s = np.asarray(samples, dtype=float)
        if s.ndim != 1 or s.size < 3:
            raise ValueError("samples must be a 1-d array with at least 3 points")
        return cls(T, samples=s)

    @property
    def atoms(self) -> list:
        """(weight, Lambda, t_start, t_end) for every exponential atom."""
        return [(w, lam, p.t_start, p.t_end) for p in self.pieces for w, lam in zip(p.weights, p.exponents)]

    @property
    def is_zero(self) -> bool:
        if self.pieces:
            return all(w == 0 for p in self.pieces for w in p.weights)
        return self.samples is None or not np.any(self.samples)

    def evaluate(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.pieces:
            out = np.zeros(t.shape)
            for i, p in enumerate(self.pieces):
                last = i == len(self.pieces) - 1
                m = (t >= p.t_start) & ((t < p.t_end) | (last & (t <= p.t_end)))
                if np.any(m):
                    out[m] = p.evaluate(t[m])
            return out
        if self.samples is None:
            return np.zeros(t.shape)
        grid = np.linspace(0.0, self.T, self.samples.size)
        return np.interp(t, grid, self.samples)

    @property
    def l2_norm(self) -> float:
        if self.pieces:
            tot = mp.mpf(0)
            for p in self.pieces:
                tot += p.l2_squared()
            return float(mp.sqrt(max(tot, 0)))
        if self.samples is None:
            return 0.0
        return self.sampled_l2_norm()

    def sampled_l2_norm(self) -> float:
        if self.samples is None:
            raise ValueError("signal carries no samples")
        grid = np.linspace(0.0, self.T, self.samples.size)
        return float(math.sqrt(simpson(self.samples**2, x=grid)))

    def with_samples(self, n: int = 2048) -> ControlSignal:
        grid = np.linspace(0.0, self.T, n + 1)
        return ControlSignal(self.T, list(self.pieces), self.evaluate(grid), dict(self.diagnostics))

    def scaled(self, s: float) -> ControlSignal:
        pieces = []
        for p in self.pieces:
            with mp.workprec(p.bits):
                pieces.append(ControlPiece(p.t_start, p.t_end, [mp.mpf(s) * w for w in p.weights], p.exponents, p.bits))
        samples = None if self.samples is None else s * self.samples
        return ControlSignal(self.T, pieces, samples)

    @staticmethod
    def concatenate(signals, T: float) -> ControlSignal:
        pieces = sorted((p for s in signals for p in s.pieces), key=lambda p: p.t_start)
        for a, b in zip(pieces, pieces[1:]):
            if b.t_start < a.t_end - 1e-14 * max(1.0, T):
                raise ValueError("control pieces overlap")
        return ControlSignal(T, pieces)

    def to_csv(self, n: int = 2048) -> str:
        grid = np.linspace(0.0, self.T, n + 1)
        vals = self.evaluate(grid)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["t", "v"])
        for t, v in zip(grid, vals):
            w.writerow([repr(float(t)), repr(float(v))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        d = {"T": self.T, "pieces": [p.to_dict() for p in self.pieces], "l2_norm": self.l2_norm}
        if self.samples is not None and not self.pieces:
            d["samples"] = self.samples.tolist()
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> ControlSignal:
        pieces = [ControlPiece.from_dict(p) for p in d.get("pieces", [])]
        samples = d.get("samples")
        return cls(float(d["T"]), pieces, None if samples is None else np.asarray(samples, dtype=float))


# ---------------------------------------------------------------- moment problem


def control_gain(spectrum: SpectrumTable) -> np.ndarray:
    """beta_kj = sqrt(2/pi) k xi phi_j[0], shape (N, 2)."""
    xi = spectrum.params.xi
    return np.array([[_SQ2PI * p.k * xi * p.phi(j)[0] for j in (1, 2)] for p in spectrum.pairs])


def eigen_coordinates(y: FourierState, spectrum: SpectrumTable) -> np.ndarray:
    """alpha_kj = <y_k, phi_j(k)> for k <= spectrum.N (missing modes are zero)."""
    out = np.zeros((spectrum.N, 2))
    n = min(y.N, spectrum.N)
    for i in range(n):
        p = spectrum.pairs[i]
        out[i] = (y.coeffs[i] @ p.phi1, y.coeffs[i] @ p.phi2)
    return out


def moment_rhs(y0: FourierState, spectrum: SpectrumTable, T: float) -> np.ndarray:
    """Right-hand sides c_kj of the moment problem, shape (N, 2).

    c_kj = (-1)^j sqrt(pi/2) sqrt(tau r_k) / (k xi) e^{-lambda_kj T} <y0_k, phi_j>.
    The factor (-1)^j sqrt(tau r_k) equals -1 / (sqrt(2/pi) phi_j[0]) for both
    trajectory families, so c = -e^{-lambda T} alpha / beta.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    alpha = eigen_coordinates(y0, spectrum)
    beta = control_gain(spectrum)
    lam = np.stack([spectrum.lam1, spectrum.lam2], axis=1)
    return -np.exp(-lam * T) * alpha / beta


def _check_index_map(spectrum: SpectrumTable, fam: BiorthFamily, horizon: float) -> None:
    lam = np.asarray(spectrum.Lambda, dtype=float)
    flam = np.asarray(fam.dict.Lambda, dtype=float)
    if lam.shape != flam.shape:
        raise IndexMapMismatch(f"spectrum has {lam.size} exponents, family has {flam.size}")
    if np.any(lam != flam):
        bad = int(np.flatnonzero(lam != flam)[0])
        raise IndexMapMismatch(f"merged exponent {bad} differs: {lam[bad]!r} vs {flam[bad]!r}")
    if not math.isclose(fam.dict.T, horizon, rel_tol=1e-14, abs_tol=0.0):
        raise IndexMapMismatch(f"family horizon {fam.dict.T} differs from control horizon {horizon}")
    pairs = sorted(zip(spectrum.Lambda_k.tolist(), spectrum.Lambda_branch.tolist()))
    if pairs != [(k, b) for k in range(1, spectrum.N + 1) for b in (1, 2)]:
        raise IndexMapMismatch("merged-index map does not cover every (k, branch) exactly once")


def moment_residuals(signal_piece: ControlPiece, spectrum: SpectrumTable, c: np.ndarray) -> np.ndarray:
    """int_0^h e^{-lambda_kj t} u(t) dt - c_kj with u(t) = v(t_end - t)."""
    h = signal_piece.length
    out = np.zeros((spectrum.N, 2))
    with mp.workprec(signal_piece.bits):
        lam_atoms = [mp.mpf(x) for x in signal_piece.exponents]
        hm = mp.mpf(h)
        for i, p in enumerate(spectrum.pairs):
            for j in (1, 2):
                lam = mp.mpf(p.eigenvalue(j))
                s = mp.fsum(
                    w * (-mp.expm1(-(lam + a) * hm)) / (lam + a) for w, a in zip(signal_piece.weights, lam_atoms)
                )
                out[i, j - 1] = float(s - mp.mpf(float(c[i, j - 1])))
    return out


def synthesize_control(
    y0: FourierState,
    spectrum: SpectrumTable,
    fam: BiorthFamily,
    T: float,
    patch_horizon: float | None = None,
    t0: float = 0.0,
) -> ControlSignal:
    """Minimal-norm null control for the first ``spectrum.N`` mode pairs.

    The control acts on [t0, t0 + h] with h = patch_horizon (or T) and is
    zero on the rest of [0, t0 + T]; ``fam`` must be built on the merged
    dictionary of ``spectrum`` at horizon h.
    """
    h = float(T if patch_horizon is None else patch_horizon)
    if not 0 < h <= T * (1 + 1e-15):
        raise ValueError("patch horizon must lie in (0, T]")
    _check_index_map(spectrum, fam, h)
    c = moment_rhs(y0, spectrum, h)
    bits = fam.precision_bits
    M = fam.M
    with mp.workprec(bits):
        m = mp.matrix(M, 1)
        for i in range(M):
            k, b = int(spectrum.Lambda_k[i]), int(spectrum.Lambda_branch[i])
            m[i] = mp.mpf(float(c[k - 1, b - 1]))
        W = fam.coeffs * m
        weights = [W[i] for i in range(M)]
    piece = ControlPiece(t0, t0 + h, weights, tuple(fam.dict.Lambda), bits)
    res = moment_residuals(piece, spectrum, c)
    scale = float(np.max(np.abs(c))) if np.any(c) else 1.0
    sig = ControlSignal(t0 + T, [piece])
    sig.diagnostics = {
        "moments": c,
        "moment_residual_abs": float(np.max(np.abs(res))),
        "moment_residual_rel": float(np.max(np.abs(res)) / scale),
        "horizon": h,
        "biorth_residual": fam.max_residual,
        "precision_bits": bits,
        "truncation_tail": float(math.exp(-spectrum.pairs[-1].lambda1 * T)),
        "index_map": [(int(k), int(b)) for k, b in zip(spectrum.Lambda_k, spectrum.Lambda_branch)],
    }
    return sig


def null_control(
    params: Parameters,
    y0: FourierState,
    T: float,
    N: int,
    patch_horizon: float | None = None,
    precision_bits: int = 256,
    tol: float = 1e-12,
    t0: float = 0.0,
) -> ControlSignal:
    """Convenience wrapper: spectrum, family and synthesis in one call."""
    spec = build_spectrum(params, N)
    h = T if patch_horizon is None else patch_horizon
    fam = build_biorth(ExponentialDictionary(h, tuple(spec.Lambda)), precision_bits=precision_bits, tol=tol)
    return synthesize_control(y0, spec, fam, T, patch_horizon=patch_horizon, t0=t0)


# ---------------------------------------------------------------- control cost


@dataclass
class CostSweep:
    params: Parameters
    N: int
    N_probe: int
    rows: list  # (T, K_emp, argmax probe label)
    log_C0: float
    M_fit: float
    r2: float

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "N": self.N,
            "N_probe": self.N_probe,
            "rows": [{"T": t, "K_emp": k, "probe": lab} for t, k, lab in self.rows],
            "fit": {"C0": math.exp(self.log_C0), "log_C0": self.log_C0, "M_fit": self.M_fit, "r2": self.r2},
        }


def probe_cost(spectrum: SpectrumTable, fam: BiorthFamily, T: float, N_probe: int) -> tuple[float, str]:
    """max over unit-H^-1 probes (eta_k, 0) k and (0, eta_k) k of ||v||_{L2}."""
    _check_index_map(spectrum, fam, T)
    best, label = 0.0, ""
    X = fam.coeffs
    with mp.workprec(fam.precision_bits):
        for k in range(1, min(N_probe, spectrum.N) + 1):
            for comp in (0, 1):
                vec = np.zeros(2)
                vec[comp] = float(k)  # ||k eta_k||_{H^-1} = 1
                y = FourierState.mode(spectrum.N, k, vec)
                c = moment_rhs(y, spectrum, T)
                idx = [spectrum.merged_index(k, 1), spectrum.merged_index(k, 2)]
                mv = [mp.mpf(float(c[k - 1, 0])), mp.mpf(float(c[k - 1, 1]))]
                q = mp.fsum(mv[a] * mv[b] * X[idx[a], idx[b]] for a in range(2) for b in range(2))
                val = float(mp.sqrt(max(q, 0)))
                if val > best:
                    best, label = val, f"{'theta' if comp == 0 else 'phi'}_{k}"
    return best, label


def control_cost(
    params: Parameters,
    T_list,
    N: int,
    N_probe: int = 8,
    precision_bits: int = 256,
    tol: float = 1e-12,
) -> CostSweep:
    """Empirical cost K_emp(T) and the fit log K = log C0 + M / T."""
    spec = build_spectrum(params, N)
    rows = []
    for T in T_list:
        fam = build_biorth(ExponentialDictionary(float(T), tuple(spec.Lambda)), precision_bits=precision_bits, tol=tol)
        K, lab = probe_cost(spec, fam, float(T), N_probe)
        rows.append((float(T), K, lab))
    Ts = np.array([r[0] for r in rows])
    logK = np.log(np.array([r[1] for r in rows]))
    if len(rows) >= 2:
        A = np.vstack([np.ones_like(Ts), 1.0 / Ts]).T
        (logC0, Mfit), *_ = np.linalg.lstsq(A, logK, rcond=None)
        pred = A @ np.array([logC0, Mfit])
        ss = np.sum((logK - logK.mean()) ** 2)
        r2 = 1.0 - np.sum((logK - pred) ** 2) / ss if ss > 0 else 1.0
    else:
        logC0, Mfit, r2 = float(logK[0]), float("nan"), float("nan")
    return CostSweep(params, N, N_probe, rows, float(logC0), float(Mfit), float(r2))
