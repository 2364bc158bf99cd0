"""Biorthogonal families to real exponentials on (0, T).

For a finite dictionary e^{-Lambda_j t}, j = 1..M, the minimal-norm
biorthogonal family lies in the span of the dictionary and its coefficient
matrix is the inverse Gram matrix. The Gram matrix is a (shifted) Cauchy
matrix whose condition number grows exponentially in M and 1/T, so all
linear algebra runs in mpmath at a configurable precision. Solutions are
certified by recomputing the biorthogonality residual at higher precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import mpmath as mp
import numpy as np

DEFAULT_BITS = 256
MAX_BITS = 4096
MAX_ATOMS = 64


class PrecisionExhausted(RuntimeError):
    """Residual target not reached at the precision ceiling."""

    def __init__(self, achieved: float, bits: int, tol: float):
        super().__init__(f"biorthogonal residual {achieved:.3e} > {tol:.1e} at {bits} bits")
        self.achieved = achieved
        self.bits = bits
        self.tol = tol


@dataclass(frozen=True)
class ExponentialDictionary:
    T: float
    Lambda: tuple

    def __post_init__(self):
        lam = np.asarray(self.Lambda, dtype=float)
        if lam.ndim != 1 or lam.size == 0:
            raise ValueError("Lambda must be a non-empty 1-d sequence")
        if np.any(lam <= 0) or np.any(np.diff(lam) <= 0):
            raise ValueError("Lambda must be positive and strictly increasing")
        if not self.T > 0:
            raise ValueError("T must be positive (math.inf allowed)")
        object.__setattr__(self, "Lambda", tuple(float(x) for x in lam))

    @property
    def M(self) -> int:
        return len(self.Lambda)


def gram_matrix(d: ExponentialDictionary, bits: int = DEFAULT_BITS) -> mp.matrix:
    """G_ij = (1 - e^{-(Lambda_i + Lambda_j) T}) / (Lambda_i + Lambda_j)."""
    with mp.workprec(bits):
        lam = [mp.mpf(x) for x in d.Lambda]
        M = len(lam)
        G = mp.matrix(M, M)
        if math.isinf(d.T):
            for i in range(M):
                for j in range(i, M):
                    G[i, j] = G[j, i] = 1 / (lam[i] + lam[j])
            return G
        T = mp.mpf(d.T)
        for i in range(M):
            for j in range(i, M):
                s = lam[i] + lam[j]
                G[i, j] = G[j, i] = -mp.expm1(-s * T) / s
        return G


def _cholesky_inverse(G: mp.matrix) -> tuple[mp.matrix, list]:
    """Inverse of an SPD matrix through its Cholesky factor, plus the pivots."""
    L = mp.cholesky(G)
    M = G.rows
    pivots = [L[i, i] for i in range(M)]
    # W = L^{-1} by forward substitution, column by column
    W = mp.zeros(M, M)
    for c in range(M):
        W[c, c] = 1 / L[c, c]
        for i in range(c + 1, M):
            s = mp.fsum(L[i, m] * W[m, c] for m in range(c, i))
            W[i, c] = -s / L[i, i]
    return W.T * W, pivots


def _residual(X: mp.matrix, d: ExponentialDictionary, bits: int) -> tuple[np.ndarray, float]:
    with mp.workprec(bits):
        G = gram_matrix(d, bits)
        R = X * G
        M = G.rows
        res = np.empty((M, M))
        for i in range(M):
            R[i, i] -= 1
            for j in range(M):
                res[i, j] = float(R[i, j])
        return res, float(np.max(np.abs(res)))


@dataclass
class BiorthFamily:
    """q_k(t) = sum_j coeffs[k, j] e^{-Lambda_j t} on (0, T)."""

    dict: ExponentialDictionary
    coeffs: mp.matrix
    residual: np.ndarray
    norms: np.ndarray
    log_norms: np.ndarray
    precision_bits: int
    max_residual: float
    pivots_positive: bool

    @property
    def M(self) -> int:
        return self.dict.M

    def evaluate(self, k: int, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        with mp.workprec(self.precision_bits):
            out = [
                mp.fsum(self.coeffs[k, j] * mp.exp(-mp.mpf(lam) * mp.mpf(float(s))) for j, lam in enumerate(self.dict.Lambda))
                for s in t
            ]
        return np.array([float(x) for x in out])

    def to_dict(self) -> dict:
        digits = int(self.precision_bits * math.log10(2)) + 2
        return {
            "T": self.dict.T,
            "Lambda": list(self.dict.Lambda),
            "precision_bits": self.precision_bits,
            "coeffs": [[mp.nstr(self.coeffs[i, j], digits) for j in range(self.M)] for i in range(self.M)],
            "norms": self.norms.tolist(),
            "max_residual": self.max_residual,
        }

    def csv_rows(self):
        yield ("k", "Lambda_k", "norm_q_k", "max_residual_row")
        for k in range(self.M):
            yield (k + 1, self.dict.Lambda[k], self.norms[k], float(np.max(np.abs(self.residual[k]))))


def build_biorth(
    d: ExponentialDictionary,
    precision_bits: int = DEFAULT_BITS,
    tol: float = 1e-12,
    max_bits: int = MAX_BITS,
    max_atoms: int = MAX_ATOMS,
) -> BiorthFamily:
    """Minimal-norm biorthogonal family, certified to ``tol``.

    The inverse is formed from a Cholesky factorization at ``bits``, polished
    by one Newton-Schulz step at 2*bits, and the residual max|X G - I| is
    recomputed at 2*bits + 64. Precision doubles until the residual is below
    ``tol`` or ``max_bits`` is exceeded.
    """
    if d.M > max_atoms:
        raise ValueError(f"dictionary has {d.M} atoms, cap is {max_atoms}")
    bits = int(precision_bits)
    achieved = math.inf
    while True:
        with mp.workprec(bits):
            G = gram_matrix(d, bits)
            try:
                X, pivots = _cholesky_inverse(G)
                spd = all(p > 0 for p in pivots)
            except (ValueError, ZeroDivisionError):
                X, spd = None, False
        if X is not None:
            with mp.workprec(2 * bits):
                G2 = gram_matrix(d, 2 * bits)
                E = mp.eye(d.M) - G2 * X
                X = X + X * E
            residual, achieved = _residual(X, d, 2 * bits + 64)
            if achieved <= tol:
                break
        if 2 * bits > max_bits:
            raise PrecisionExhausted(achieved, bits, tol)
        bits *= 2
    with mp.workprec(2 * bits):
        diag = [X[i, i] for i in range(d.M)]
        log_norms = np.array([float(mp.log(x) / 2) for x in diag])
    norms = np.exp(log_norms)
    return BiorthFamily(d, X, residual, norms, log_norms, 2 * bits, achieved, spd)


def moment_matrix(fam: BiorthFamily, lam, bits: int | None = None) -> mp.matrix:
    """int_0^T q_k(t) e^{-lam t} dt for every k and every lam in ``lam``."""
    bits = bits or fam.precision_bits
    T = fam.dict.T
    with mp.workprec(bits):
        Lam = [mp.mpf(x) for x in fam.dict.Lambda]
        lam = [mp.mpf(float(x)) for x in np.atleast_1d(lam)]
        E = mp.matrix(fam.M, len(lam))
        for j, a in enumerate(Lam):
            for m, b in enumerate(lam):
                s = a + b
                E[j, m] = (1 / s) if math.isinf(T) else -mp.expm1(-s * mp.mpf(T)) / s
        return fam.coeffs * E


def norm_bound_check(fam: BiorthFamily) -> dict:
    """Fit log||q_k|| against sqrt(Lambda_k) + 1/T.

    Returns the least-squares slope and intercept in sqrt(Lambda_k), and the
    smallest C with log||q_k|| <= C (sqrt(Lambda_k) + 1/T) + C for every k.
    ``admissible`` means that C is positive and finite.
    """
    lam = np.asarray(fam.dict.Lambda)
    y = fam.log_norms
    x = np.sqrt(lam)
    inv_T = 0.0 if math.isinf(fam.dict.T) else 1.0 / fam.dict.T
    if lam.size == 1:
        C = max(y[0] / (x[0] + inv_T + 1.0), 1e-300)
        return {"C_fit": float(C), "slope": 0.0, "intercept": float(y[0]), "r2": 1.0, "admissible": True}
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ np.array([slope, intercept])
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum((y - pred) ** 2) / ss if ss > 0 else 1.0
    C = float(np.max(y / (x + inv_T + 1.0)))
    C = max(C, float(slope), 0.0)
    return {
        "C_fit": C,
        "slope": float(slope),
        "intercept": float(intercept),
        "r2": float(r2),
        "admissible": bool(np.isfinite(C) and C > 0),
    }
