"""Generator choice and residual-diffusion factorization.

The Hamiltonian of each mode splits into a linear generator (drift fbar,
volatility sigbar) plus a residual whose second-order coefficient must be
factored as sigbar S S' sigbar'.  S comes from a Cholesky factorization of
the congruence sigbar^-1 (sigma sigma' - a) sigbar^-T with zero columns
dropped, so S is d x l with l the numerical rank.

The uncertain-correlation specialization shares one generator across all
modes: sigbar(x) = sqrt(lam) diag(sigma_i x_i) with lam the smallest
eigenvalue over the correlation set, which makes sigbar(x)^-1 sigma_m(x)
constant and every residual factor state-independent.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, NumericalError

__all__ = [
    "GeneratorChoice",
    "ResidualFactor",
    "residual_matrix",
    "cholesky_drop_zero_columns",
    "build_uncertain_correlation_generator",
]

_COND_LIMIT = 1e12


@dataclass(frozen=True)
class ResidualFactor:
    """Rectangular factor S (d x l) with tr(SS') cached."""

    Sigma: np.ndarray
    abar_local: float

    @classmethod
    def from_matrix(cls, Sigma):
        Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
        S = Sigma.copy()
        S.flags.writeable = False
        return cls(Sigma=S, abar_local=float(np.sum(S * S)))

    @property
    def rank(self):
        return self.Sigma.shape[1]


@dataclass(frozen=True)
class GeneratorChoice:
    """Shared linear generators: one (fbar, sigbar) per retained mode.

    `projection[m]` names the retained representative of mode m.  `fbar` and
    `sigbar` take (retained_mode, x); `residual` takes (mode, x) and returns
    the ResidualFactor of that mode under its representative's generator.
    """

    retained: tuple
    projection: dict
    sigbar: Callable
    fbar: Optional[Callable] = None
    residual: Optional[Callable] = None
    constant_ratio: bool = False
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        for mbar in self.retained:
            if self.projection.get(mbar) != mbar:
                raise ConfigurationError(
                    "projection must fix each retained representative")

    def drift_at(self, mbar, x):
        if self.fbar is None:
            return np.zeros(len(np.asarray(x)))
        return np.asarray(self.fbar(mbar, x), dtype=float)

    def sigbar_at(self, mbar, x):
        """sigbar evaluated at x, with an invertibility guard."""
        sb = np.asarray(self.sigbar(mbar, x), dtype=float)
        cond = np.linalg.cond(sb)
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise NumericalError(
                f"sigbar is numerically singular at x={x} (cond {cond:.3e})")
        return sb

    def residual_at(self, m, x):
        if self.residual is None:
            raise ConfigurationError("generator has no residual factors attached")
        return self.residual(m, x)


def residual_matrix(spec, generator, m, x, u=None):
    """sigbar^-1 (sigma_m sigma_m' - a) sigbar^-T at x, symmetrized.

    Raises when the result has an eigenvalue below -1e-8 (1 + ||result||),
    which means the chosen generator is not dominated by mode m.
    """
    x = np.asarray(x, dtype=float)
    mbar = generator.projection[m]
    sb = generator.sigbar_at(mbar, x)
    sig = spec.vol(m, x, u)
    rhs = sig @ sig.T - sb @ sb.T
    half = np.linalg.solve(sb, rhs)
    out = np.linalg.solve(sb, half.T).T
    out = 0.5 * (out + out.T)
    lam_min = float(np.linalg.eigvalsh(out)[0])
    if lam_min < -1e-8 * (1.0 + np.linalg.norm(out)):
        raise NumericalError(
            f"domination violated for mode {m} at x={x}: "
            f"residual eigenvalue {lam_min:.3e} < 0 means a(x) is not <= sigma sigma'")
    return out


def cholesky_drop_zero_columns(S, tol=1e-10):
    """Cholesky factor of a PSD matrix with zero columns eliminated.

    Returns a lower-trapezoidal d x l factor with SS' reconstructed to
    1e-9 relative; pivots below tol*tr(S)/d are treated as zero rank and
    their columns dropped.  Raises NumericalError when a pivot is negative
    beyond the same threshold (matrix indefinite beyond tolerance).
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    d = S.shape[0]
    if S.shape[1] != d:
        raise ConfigurationError("matrix must be square")
    if np.linalg.norm(S - S.T) > 1e-9 * (1.0 + np.linalg.norm(S)):
        raise ConfigurationError("matrix must be symmetric")
    thr = tol * max(np.trace(S), 0.0) / d if np.trace(S) > 0 else tol
    A = 0.5 * (S + S.T)
    L = np.zeros((d, d))
    keep = []
    for j in range(d):
        pivot = A[j, j] - L[j, :j] @ L[j, :j]
        if pivot < -thr:
            raise NumericalError(
                f"matrix indefinite beyond tolerance: pivot {pivot:.3e} at column {j}")
        if pivot <= thr:
            continue  # dependent column, dropped
        L[j, j] = np.sqrt(pivot)
        keep.append(j)
        if j + 1 < d:
            L[j + 1:, j] = (A[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L[:, keep]


def build_uncertain_correlation_generator(sigmas, correlation_modes):
    """Shared-generator choice for multiplicative dynamics with uncertain correlation.

    `sigmas` are the per-coordinate volatilities; `correlation_modes` the
    finite set of admissible correlation matrices (unit diagonal, PSD).
    Uses sigbar(x) = sqrt(lam) diag(sigma_i x_i) with lam the smallest
    eigenvalue over the set, zero reference drift, a single retained mode,
    and the constant residual factor chol((m - lam I)/lam) per mode.
    """
    sigmas = np.asarray(sigmas, dtype=float)
    d = sigmas.shape[0]
    modes = [np.atleast_2d(np.asarray(m, dtype=float)) for m in correlation_modes]
    lam = np.inf
    for i, m in enumerate(modes):
        if m.shape != (d, d):
            raise ConfigurationError(f"correlation mode {i} has shape {m.shape}, want {(d, d)}")
        if not np.allclose(np.diag(m), 1.0, atol=1e-12):
            raise ConfigurationError(f"correlation mode {i} does not have unit diagonal")
        lam = min(lam, float(np.linalg.eigvalsh(m)[0]))
    if lam <= 0.0:
        raise ConfigurationError(
            f"smallest eigenvalue over the correlation set is {lam:.3e} <= 0; "
            "the scheme needs a positive definite reference diffusion")

    factors = {}
    for i, m in enumerate(modes):
        resid = (m - lam * np.eye(d)) / lam
        factors[i] = ResidualFactor.from_matrix(cholesky_drop_zero_columns(resid))

    sqrt_lam = np.sqrt(lam)

    def sigbar(mbar, x):
        return sqrt_lam * np.diag(sigmas * np.asarray(x, dtype=float))

    def residual(mode_index, x):
        return factors[mode_index]

    return GeneratorChoice(
        retained=(0,),
        projection={m: 0 for m in range(len(modes))},
        sigbar=sigbar,
        fbar=None,
        residual=residual,
        constant_ratio=True,
        info={"lam": lam, "sigmas": sigmas.copy()},
    )
