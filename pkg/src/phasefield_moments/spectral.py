"""Closed-form spectrum of the linearized phase-field operator.

The operator is L = -D d^2/dx^2 + A on (0, pi) with Dirichlet conditions.
On the sine mode eta_k = sqrt(2/pi) sin(kx) it acts as the 2x2 matrix
k^2 D + A, whose eigenvalues and (bi)orthogonal eigenvectors are known in
closed form. This module evaluates them, checks the two non-degeneracy
conditions (H1) and (H2), merges both branches into one increasing
sequence and reports the gap and counting constants used downstream.

For c = 0 the linearization is taken around (0, 0); its eigenvalues are
those of the c = +-1 case with (rho, tau) replaced by (2 rho, 2 tau).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Parameters:
    """Physical parameters and the trajectory constant.

    Attributes:
        xi: thermal diffusivity.
        rho: latent heat.
        tau: relaxation time.
        c: constant trajectory (0, c) to steer to; one of -1, 0, +1.
    """

    xi: float
    rho: float
    tau: float
    c: int = 1

    def __post_init__(self):
        for name in ("xi", "rho", "tau"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be a positive real, got {val!r}")
        if self.c not in (-1, 0, 1):
            raise ValueError(f"c must be -1, 0 or 1, got {self.c!r}")

    @property
    def effective(self) -> tuple[float, float]:
        """(rho, tau) as they enter the eigenvalue formulas."""
        if self.c == 0:
            return 2.0 * self.rho, 2.0 * self.tau
        return self.rho, self.tau

    def to_dict(self) -> dict:
        return {"xi": self.xi, "rho": self.rho, "tau": self.tau, "c": self.c}


def diffusion_matrix(params: Parameters) -> np.ndarray:
    xi, rho = params.xi, params.rho
    return np.array([[xi, -0.5 * rho * xi], [0.0, xi]])


def coupling_matrix(params: Parameters) -> np.ndarray:
    """Zero-order matrix A (c = +-1) or its c = 0 counterpart."""
    rho, tau = params.rho, params.tau
    if params.c == 0:
        # the matrix whose spectrum is the (2 rho, 2 tau) substitution
        return np.array([[rho / tau, -rho / (4 * tau)], [-2.0 / tau, 1.0 / (2 * tau)]])
    return np.array([[rho / tau, -rho / (2 * tau)], [-2.0 / tau, 1.0 / tau]])


def mode_matrix(params: Parameters, k: int) -> np.ndarray:
    return k * k * diffusion_matrix(params) + coupling_matrix(params)


CONTROL_DIRECTION = np.array([1.0, 0.0])  # B


@dataclass(frozen=True)
class EigenPair:
    k: int
    lambda1: float
    lambda2: float
    r_k: float
    psi1: np.ndarray
    psi2: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray

    def eigenvalue(self, branch: int) -> float:
        return self.lambda1 if branch == 1 else self.lambda2

    def psi(self, branch: int) -> np.ndarray:
        return self.psi1 if branch == 1 else self.psi2

    def phi(self, branch: int) -> np.ndarray:
        return self.phi1 if branch == 1 else self.phi2

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "r_k": self.r_k,
            "psi1": self.psi1.tolist(),
            "psi2": self.psi2.tolist(),
            "phi1": self.phi1.tolist(),
            "phi2": self.phi2.tolist(),
        }


def _shift(params: Parameters) -> float:
    rho_e, tau_e = params.effective
    return (rho_e + 1.0) / (2.0 * tau_e)


def gap_radius(params: Parameters, k) -> np.ndarray | float:
    rho_e, tau_e = params.effective
    k = np.asarray(k, dtype=float)
    return np.sqrt(params.xi * rho_e * k**2 / tau_e + _shift(params) ** 2)


def eigenvalues(params: Parameters, k) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized (lambda_k^(1), lambda_k^(2)) for integer array k."""
    k = np.asarray(k, dtype=float)
    r = gap_radius(params, k)
    centre = params.xi * k**2 + _shift(params)
    # centre - r suffers cancellation for large k; use the product form
    prod = params.xi**2 * k**4 + params.xi * k**2 / params.effective[1]
    lam2 = centre + r
    return prod / lam2, lam2


def eigen_pair(params: Parameters, k: int) -> EigenPair:
    """Eigenvalues and normalized eigenvector pairs of k^2 D + A.

    psi_i are right eigenvectors, phi_i the eigenvectors of the transpose,
    scaled so that psi_i . phi_j = delta_ij.
    """
    if int(k) != k or k < 1:
        raise ValueError(f"mode index must be a positive integer, got {k!r}")
    k = int(k)
    lam1, lam2 = eigenvalues(params, k)
    r = float(gap_radius(params, k))
    rho, tau = params.rho, params.tau
    if params.c == 0:
        pre = 1.0 / (8.0 * math.sqrt(tau * r))
        psi1 = pre * np.array([1 - 2 * rho + 4 * tau * r, 8.0])
        psi2 = pre * np.array([1 - 2 * rho - 4 * tau * r, 8.0])
        phi1 = pre * np.array([8.0, 2 * rho - 1 + 4 * tau * r])
        phi2 = -pre * np.array([8.0, 2 * rho - 1 - 4 * tau * r])
    else:
        pre = 1.0 / (4.0 * math.sqrt(tau * r))
        psi1 = pre * np.array([1 - rho + 2 * tau * r, 4.0])
        psi2 = pre * np.array([1 - rho - 2 * tau * r, 4.0])
        phi1 = pre * np.array([4.0, rho - 1 + 2 * tau * r])
        phi2 = -pre * np.array([4.0, rho - 1 - 2 * tau * r])
    return EigenPair(k, float(lam1), float(lam2), r, psi1, psi2, phi1, phi2)


# -- non-degeneracy conditions ---------------------------------------------


@dataclass(frozen=True)
class H1Result:
    holds: bool
    j_star: int | None
    violating_j: int | None = None


@dataclass(frozen=True)
class H2Result:
    holds: bool
    witnesses: list
    k0_bound: int
    near_misses: list = field(default_factory=list)


def check_H1(params: Parameters) -> H1Result:
    """xi != rho/(j^2 tau) for every j >= 1, plus the bracketing index j_star."""
    ratio = params.rho / params.tau
    j_max = math.ceil(math.sqrt(ratio / params.xi)) + 1
    for j in range(1, j_max + 1):
        if math.isclose(params.xi, ratio / j**2, rel_tol=1e-14, abs_tol=0.0):
            return H1Result(False, None, j)
    # ratio/(j+1)^2 < xi < ratio/j^2
    j = 0
    while params.xi < ratio / (j + 1) ** 2:
        j += 1
    return H1Result(True, j)


def h2_expression(params: Parameters, k, ell):
    """The (H2) polynomial; it vanishes iff modes k and ell share an eigenvalue."""
    rho_e, tau_e = params.effective
    xi = params.xi
    k = np.asarray(k, dtype=float)
    ell = np.asarray(ell, dtype=float)
    return (
        xi**2 * tau_e**2 * (ell**2 - k**2) ** 2
        - 2 * xi * rho_e * tau_e * (ell**2 + k**2)
        - 2 * rho_e
        - 1
    )


def _h2_scale(params: Parameters, k, ell):
    rho_e, tau_e = params.effective
    xi = params.xi
    k = np.asarray(k, dtype=float)
    ell = np.asarray(ell, dtype=float)
    return np.maximum(
        1.0,
        xi**2 * tau_e**2 * (ell**2 - k**2) ** 2 + 2 * xi * rho_e * tau_e * (ell**2 + k**2) + 2 * rho_e + 1,
    )


def k0_bound(params: Parameters, j: int) -> int:
    """Smallest k0 beyond which lambda_k^(2) < lambda_{k+1+j}^(1) is guaranteed."""
    rho_e, tau_e = params.effective
    xi = params.xi
    rhs = 0.5 * (1.0 - math.sqrt(rho_e / ((j + 1) ** 2 * xi * tau_e)))
    if rhs <= 0:
        raise ValueError("bracketing index does not satisfy the strict lower inequality")
    lead = _shift(params) ** 2 * math.sqrt(tau_e / (xi * rho_e)) / (xi * (j + 1))
    # lead / (k (2k + j + 1)) <= rhs  <=>  2k^2 + (j+1)k - lead/rhs >= 0
    c0 = lead / rhs
    k = max(1, math.ceil((-(j + 1) + math.sqrt((j + 1) ** 2 + 8 * c0)) / 4))
    while k > 1 and lead / ((k - 1) * (2 * (k - 1) + j + 1)) <= rhs:
        k -= 1
    while lead / (k * (2 * k + j + 1)) > rhs:
        k += 1
    return k


def _resonance_candidates(params: Parameters, k: int, j: int) -> range:
    """ell values that can resonate with lambda_k^(2) (all others are separated)."""
    lam2_k = eigenvalues(params, k)[1]
    ell = k + j + 1
    start = ell
    while eigenvalues(params, ell)[0] <= lam2_k * (1 + 1e-12) + 1e-12:
        ell += 1
    return range(start, ell + 1)


def check_H2(params: Parameters, safety_margin: float | None = None) -> H2Result:
    """Finite check of (H2).

    Resonances lambda_k^(2) = lambda_ell^(1) can only occur for k below the
    analytic k0 bound. For each such k the candidate ell run from k+j+1 while
    lambda_ell^(1) does not exceed lambda_k^(2); usually that is the single
    value ell = k+j+1.

    Args:
        params: parameters.
        safety_margin: relative tolerance on the polynomial; defaults to 1e-9.
            Values within 1e3 times the margin are returned as near misses.
    """
    margin = 1e-9 if safety_margin is None else safety_margin
    h1 = check_H1(params)
    if h1.holds:
        j = h1.j_star
    else:
        # boundary case xi = rho/(j^2 tau) belongs to the bracket of index j
        j = h1.violating_j
    try:
        kb = k0_bound(params, j)
    except ValueError:
        kb = 1
    witnesses, near = [], []
    for k in range(1, kb):
        for ell in _resonance_candidates(params, k, j):
            val = float(h2_expression(params, k, ell))
            scale = float(_h2_scale(params, k, ell))
            if abs(val) <= margin * scale:
                witnesses.append((k, ell))
            elif abs(val) <= 1e3 * margin * scale:
                near.append((k, ell))
    return H2Result(not witnesses, witnesses, kb, near)


def scan_H2(params: Parameters, ell_max: int, safety_margin: float = 1e-9) -> list:
    """Exhaustive scan of all 1 <= k < ell <= ell_max."""
    k, ell = np.triu_indices(ell_max + 1, 1)
    keep = k >= 1
    k, ell = k[keep], ell[keep]
    val = h2_expression(params, k, ell)
    bad = np.abs(val) <= safety_margin * _h2_scale(params, k, ell)
    return list(zip(k[bad].tolist(), ell[bad].tolist()))


# -- merged spectrum ---------------------------------------------------------


class SpectrumError(ValueError):
    pass


@dataclass
class SpectrumTable:
    """Eigen data for k = 1..N and the merged increasing sequence Lambda."""

    params: Parameters
    N: int
    pairs: list
    Lambda: np.ndarray
    Lambda_k: np.ndarray
    Lambda_branch: np.ndarray
    k0: int
    k1: int
    j_star: int | None
    delta_branch: float
    delta_merged: float
    min_gap: float
    q: int
    p: float
    alpha: float
    k0_bound: int
    h1: H1Result

    @property
    def lam1(self) -> np.ndarray:
        return np.array([pr.lambda1 for pr in self.pairs])

    @property
    def lam2(self) -> np.ndarray:
        return np.array([pr.lambda2 for pr in self.pairs])

    def merged_index(self, k: int, branch: int) -> int:
        hit = np.flatnonzero((self.Lambda_k == k) & (self.Lambda_branch == branch))
        if hit.size != 1:
            raise KeyError((k, branch))
        return int(hit[0])

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "N": self.N,
            "pairs": [p.to_dict() for p in self.pairs],
            "Lambda": [
                {"value": float(v), "k": int(k), "branch": int(b)}
                for v, k, b in zip(self.Lambda, self.Lambda_k, self.Lambda_branch)
            ],
            "diagnostics": {
                "k0": self.k0,
                "k1": self.k1,
                "j_star": self.j_star,
                "delta": self.delta_merged,
                "delta_branch": self.delta_branch,
                "min_gap": self.min_gap,
                "q": self.q,
                "p": self.p,
                "alpha": self.alpha,
                "k0_bound": self.k0_bound,
            },
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _empirical_k0(lam1, lam2, j) -> int:
    """Smallest k0 such that interleaving holds for every k >= k0 in the table."""
    N = len(lam1)
    ok = []
    for k in range(1, N + 1):
        if k + 1 + j > N:
            break
        ok.append(lam1[k + j - 1] < lam2[k - 1] < lam1[k + j])
    k0 = len(ok) + 1
    for idx in range(len(ok) - 1, -1, -1):
        if not ok[idx]:
            break
        k0 = idx + 1
    return k0


def _empirical_k1(params, lam1, lam2) -> int:
    N = len(lam1)
    ks = np.arange(1, N + 1, dtype=float)
    K, L = np.meshgrid(ks, ks, indexing="ij")
    bound = 0.5 * params.xi * np.abs(K**2 - L**2)
    gaps = np.minimum.reduce(
        [
            np.abs(lam1[:, None] - lam1[None, :]),
            np.abs(lam2[:, None] - lam2[None, :]),
            np.abs(lam2[:, None] - lam1[None, :]),
        ]
    )
    bad = gaps < bound
    shift = np.abs(K - L).astype(int)
    if not bad.any():
        return 1
    return int(shift[bad].max()) + 1


def counting_constants(params: Parameters) -> tuple[float, float]:
    rho_e, tau_e = params.effective
    sx = math.sqrt(params.xi)
    p = 2.0 / sx
    alpha = max(
        (math.sqrt(rho_e / tau_e) + math.sqrt((3 * rho_e + 4) / tau_e)) / (2 * sx) + 2.0,
        math.sqrt(rho_e / (params.xi * tau_e)),
    )
    return p, alpha


def build_spectrum(params: Parameters, N: int = 64) -> SpectrumTable:
    """Eigen data for k <= N and the merged sequence with diagnostics."""
    if N < 1:
        raise ValueError("N must be >= 1")
    h2 = check_H2(params)
    if not h2.holds:
        raise SpectrumError(f"(H2) fails; resonant pairs {h2.witnesses}")
    pairs = [eigen_pair(params, k) for k in range(1, N + 1)]
    lam1 = np.array([p.lambda1 for p in pairs])
    lam2 = np.array([p.lambda2 for p in pairs])
    vals = np.concatenate([lam1, lam2])
    ks = np.concatenate([np.arange(1, N + 1), np.arange(1, N + 1)])
    br = np.concatenate([np.ones(N, int), 2 * np.ones(N, int)])
    order = np.lexsort((br, vals))
    vals, ks, br = vals[order], ks[order], br[order]
    gaps = np.diff(vals)
    if gaps.size and gaps.min() <= 0:
        raise SpectrumError("merged spectrum is not strictly increasing")
    h1 = check_H1(params)
    j = h1.j_star if h1.holds else h1.violating_j
    k0 = _empirical_k0(lam1, lam2, j)
    k1 = _empirical_k1(params, lam1, lam2)
    if h1.holds:
        _check_explicit_arrangement(vals, ks, br, k0, j)
    q = max(2 * k0 + j - 1, 2 * k1 + 2 * j + 1, 6 * j + 3)
    p, alpha = counting_constants(params)
    return SpectrumTable(
        params=params,
        N=N,
        pairs=pairs,
        Lambda=vals,
        Lambda_k=ks.astype(int),
        Lambda_branch=br.astype(int),
        k0=k0,
        k1=k1,
        j_star=h1.j_star,
        delta_branch=params.xi / 2,
        delta_merged=params.xi / 16,
        min_gap=float(gaps.min()) if gaps.size else math.inf,
        q=q,
        p=p,
        alpha=alpha,
        k0_bound=h2.k0_bound,
        h1=h1,
    )


def explicit_tail_label(n: int, k0: int, j: int) -> tuple[int, int]:
    """(k, branch) of the 1-based merged index n >= 2 k0 + j - 1."""
    m = n - (2 * k0 + j)
    if m % 2:  # n = 2k0 + j + 2k - 1
        return k0 + j + (m + 1) // 2, 1
    return k0 + m // 2, 2


def _check_explicit_arrangement(vals, ks, br, k0, j):
    N = len(vals) // 2
    # index 2k0+j-1 also depends on lambda^(2)_{k0-1}; the rule is exact from 2k0+j on
    for n in range(2 * k0 + j, len(vals) + 1):
        k, b = explicit_tail_label(n, k0, j)
        if k > N or (b == 2 and k + j > N):
            break
        if (ks[n - 1], br[n - 1]) != (k, b):
            raise SpectrumError(f"explicit arrangement mismatch at merged index {n}")


def counting_bounds(params: Parameters, r: float) -> dict:
    """Branch counts n_i = #{k : lambda_k^(i) <= r} with the analytic sandwich."""
    rho_e, tau_e = params.effective
    sx = math.sqrt(params.xi)
    sr = math.sqrt(r)
    kmax = int(sr / sx + math.sqrt(rho_e / (params.xi * tau_e))) + 3
    lam1, lam2 = eigenvalues(params, np.arange(1, kmax + 1))
    n1 = int(np.count_nonzero(lam1 <= r))
    n2 = int(np.count_nonzero(lam2 <= r))
    n1_lo = sr / sx - 1
    n1_hi = sr / sx + math.sqrt(rho_e / (params.xi * tau_e))
    n2_lo = sr / sx - (math.sqrt(rho_e / tau_e) + math.sqrt((3 * rho_e + 4) / tau_e)) / (2 * sx) - 1
    n2_hi = sr / sx
    if not (n1_lo < n1 <= n1_hi + 1e-12):
        raise AssertionError(f"n1={n1} outside ({n1_lo}, {n1_hi}]")
    if not (n2_lo - 1e-12 <= n2 <= n2_hi + 1e-12):
        raise AssertionError(f"n2={n2} outside [{n2_lo}, {n2_hi}]")
    return {
        "n1": n1,
        "n2": n2,
        "n1_bounds": (n1_lo, n1_hi),
        "n2_bounds": (n2_lo, n2_hi),
        "lower": n1_lo + n2_lo,
        "upper": n1_hi + n2_hi,
    }


def resonant_xi(rho: float, tau: float, k: int, ell: int, c: int = 1) -> float:
    """Positive xi at which the (H2) polynomial for (k, ell) vanishes.

    The polynomial is quadratic in xi tau_e (ell^2 - k^2); take the positive root.
    """
    p = Parameters(1.0, rho, tau, c)
    rho_e, tau_e = p.effective
    d = ell**2 - k**2
    s = ell**2 + k**2
    # a x^2 + b x + c = 0 with x = xi
    a = tau_e**2 * d**2
    b = -2 * rho_e * tau_e * s
    c0 = -(2 * rho_e + 1)
    return (-b + math.sqrt(b * b - 4 * a * c0)) / (2 * a)
