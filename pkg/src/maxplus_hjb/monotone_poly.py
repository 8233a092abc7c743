"""Degree-(4k+2) increment weight polynomial behind the monotone scheme.

P(w) = c_k sum_j ([S'w]_j)^(4k+2) ||S_j||^(-4k) - K for a d x l factor S,
with c_k = 1 / (E[N^(4k+4)] - E[N^(4k+2)]) and K = tr(SS') / (4k+2).
Weighting increments by 1 + P estimates the contracted second-derivative
term while keeping one-step weights nonnegative once 4k+2 exceeds tr(SS').
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, UsageError

__all__ = [
    "MonotonePolynomial",
    "normal_even_moment",
    "build",
    "eval_P",
    "min_k_for_monotonicity",
    "one_step_weight",
    "probe_monotone_step",
]

_MAX_MOMENT_ORDER = 15


def normal_even_moment(m: int) -> int:
    """E[N^(2m)] = (2m-1)!! for standard normal N; exact integer."""
    if m < 0:
        raise UsageError("moment order must be nonnegative")
    if m > _MAX_MOMENT_ORDER:
        raise UsageError(
            f"moment order {m} exceeds supported range m <= {_MAX_MOMENT_ORDER} "
            "(covers k <= 6)")
    out = 1
    for odd in range(1, 2 * m, 2):
        out *= odd
    return out


@dataclass(frozen=True)
class MonotonePolynomial:
    """Frozen data of P for a fixed factor and smoothing order k."""

    Sigma: np.ndarray  # d x l, no zero columns (l = 0 allowed: P == 0)
    k: int
    c_k: float
    K: float
    col_norms: np.ndarray

    @property
    def dim(self):
        return self.Sigma.shape[0]

    @property
    def degree(self):
        return 4 * self.k + 2

    @property
    def trace(self):
        """tr(Sigma Sigma') = sum of squared column norms."""
        return float(np.sum(self.col_norms ** 2))


def build(Sigma, k: int) -> MonotonePolynomial:
    """Construct the weight polynomial for factor `Sigma` and order `k`.

    Columns must be nonzero; drop them upstream (the factorization module
    already does).  An empty factor (l = 0) yields the identically-zero
    polynomial, used for modes with no second-order correction.
    """
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if k < 0:
        raise UsageError("k must be nonnegative")
    norms = np.linalg.norm(Sigma, axis=0)
    if Sigma.shape[1] > 0 and np.any(norms == 0.0):
        raise UsageError(
            "Sigma has a zero column; use the factorization module's "
            "column-dropping Cholesky to remove it")
    c_k = 1.0 / float(normal_even_moment(2 * k + 2) - normal_even_moment(2 * k + 1))
    K = float(np.sum(norms ** 2)) / (4 * k + 2)
    S = Sigma.copy()
    S.flags.writeable = False
    norms = norms.copy()
    norms.flags.writeable = False
    return MonotonePolynomial(Sigma=S, k=int(k), c_k=c_k, K=K, col_norms=norms)


def eval_P(p: MonotonePolynomial, w):
    """Evaluate P at normalized increments `w` ((d,) or (n, d))."""
    w = np.asarray(w, dtype=float)
    single = w.ndim == 1
    W = w[None, :] if single else w
    if W.shape[1] != p.dim:
        raise ConfigurationError(
            f"increment dimension {W.shape[1]} != factor dimension {p.dim}")
    if p.Sigma.shape[1] == 0:
        out = np.zeros(W.shape[0])
        return float(out[0]) if single else out
    # powers via the squared normalized projection to keep degree-(4k+2)
    # evaluation well scaled: s^(4k+2) ||S_j||^(-4k) = (s/||S_j||)^2)^(2k+1) ||S_j||^2
    proj = W @ p.Sigma  # (n, l)
    t = (proj / p.col_norms) ** 2
    out = p.c_k * (t ** (2 * p.k + 1)) @ (p.col_norms ** 2) - p.K
    return float(out[0]) if single else out


def min_k_for_monotonicity(abar: float) -> int:
    """Smallest k with abar < 4k + 2 (strict inequality)."""
    if abar < 0:
        raise UsageError("abar must be nonnegative")
    k = 0
    while not abar < 4 * k + 2:
        k += 1
    return k


def one_step_weight(p: MonotonePolynomial, drift_gap, sigbar_inv_T, delta, h, w):
    """Weight of phi(X(t+h)) in the one-step operator, at normalized increment w.

    Equals 1 + sqrt(h) drift_gap.(sigbar^-T w) - h delta + P(w); the operator
    applied to phi is monotone on a sample iff all its weights are >= 0.
    """
    w = np.asarray(w, dtype=float)
    drift_gap = np.asarray(drift_gap, dtype=float)
    rot = np.asarray(sigbar_inv_T) @ w.T if w.ndim > 1 else np.asarray(sigbar_inv_T) @ w
    lin = drift_gap @ rot
    return 1.0 + np.sqrt(h) * lin - h * delta + eval_P(p, w)


def probe_monotone_step(p: MonotonePolynomial, drift_gap, sigbar_inv_T, delta,
                        n_samples=100000, seed=0, h_hi=1.0, tol=1e-4):
    """Empirical threshold h0 below which all sampled weights are nonnegative.

    Bisects on h against the minimum of `one_step_weight` over a fixed batch
    of `n_samples` standard normal draws.  Returns (h0, min_weight_at_h0);
    h0 = h_hi when even the largest step is monotone on the sample, 0.0 when
    none is.
    """
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((n_samples, p.dim))

    def min_weight(h):
        return float(np.min(one_step_weight(p, drift_gap, sigbar_inv_T, delta, h, w)))

    if min_weight(h_hi) >= 0.0:
        return h_hi, min_weight(h_hi)
    lo, hi = 0.0, h_hi
    if min_weight(0.0 + tol * tol) < 0.0:
        return 0.0, min_weight(tol * tol)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if min_weight(mid) >= 0.0:
            lo = mid
        else:
            hi = mid
    return lo, min_weight(lo)
