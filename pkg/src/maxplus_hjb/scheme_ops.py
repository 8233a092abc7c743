"""One-step operators of the probabilistic scheme.

Derivative estimators weight the value of the Euler successor by increment
polynomials: the constant 1 for the zeroth, (sigbar')^-1 w / h for the
first, and the monotone weight polynomial divided by h for the contracted
second-order term.  The mode operator adds the discounted running reward
and maximizes over the continuum control in closed form; the full one-step
operator maximizes over modes.

Finite-difference equivalences: replacing the normal increments by the
classical three-point law reproduces explicit stencils in 1D and the
9-point stencil in 2D, which is what the `check-fd` diagnostics print.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import monotone_poly
from .errors import ConfigurationError, NumericalError
from .factorization import residual_matrix, cholesky_drop_zero_columns

__all__ = [
    "DerivativeEstimates",
    "estimate_derivatives",
    "lq_maximize",
    "apply_G",
    "apply_T",
    "gauss_hermite_increments",
    "discrete_increment_operator_1d",
    "discrete_increment_weights_2d",
]


@dataclass(frozen=True)
class DerivativeEstimates:
    """Sample means of the weighted one-step evaluations.

    d2_by_mode maps each mode of the retained class to its contracted
    second-order estimate.  Standard errors are zero when the estimates
    come from a deterministic quadrature rule.
    """

    d0: float
    d1: np.ndarray
    d2_by_mode: dict
    n_samples: int
    se_d0: float = 0.0
    se_d1: Optional[np.ndarray] = None
    se_d2_by_mode: Optional[dict] = None


def _weighted_mean_and_se(samples, weights):
    if weights is None:
        m = float(np.mean(samples))
        n = samples.shape[0]
        se = float(np.std(samples) / np.sqrt(n)) if n > 1 else 0.0
        return m, se
    return float(weights @ samples), 0.0


def estimate_derivatives(phi_tilde, increments, sigbar_at_x, h, polys_by_mode,
                         weights=None):
    """Derivative estimates of phi_tilde from shared increments.

    phi_tilde maps a batch of raw increments (n, d) to values (n,); it is
    typically phi composed with the Euler step at a fixed state.  `weights`
    switches the arithmetic means to a quadrature rule (weights sum to 1).
    """
    increments = np.atleast_2d(np.asarray(increments, dtype=float))
    n, d = increments.shape
    vals = np.asarray(phi_tilde(increments), dtype=float).reshape(n)
    sigbar_at_x = np.asarray(sigbar_at_x, dtype=float)

    d0, se0 = _weighted_mean_and_se(vals, weights)

    rot = np.linalg.solve(sigbar_at_x.T, increments.T).T / h  # P1 per sample
    d1_samples = vals[:, None] * rot
    if weights is None:
        d1 = d1_samples.mean(axis=0)
        se1 = d1_samples.std(axis=0) / np.sqrt(n) if n > 1 else np.zeros(d)
    else:
        d1 = weights @ d1_samples
        se1 = np.zeros(d)

    w_norm = increments / np.sqrt(h)
    d2, se2 = {}, {}
    for m, p in polys_by_mode.items():
        pw = monotone_poly.eval_P(p, w_norm) if p is not None else np.zeros(n)
        s = vals * pw / h
        d2[m], se2[m] = _weighted_mean_and_se(s, weights)

    return DerivativeEstimates(d0=d0, d1=d1, d2_by_mode=d2, n_samples=n,
                               se_d0=se0, se_d1=se1, se_d2_by_mode=se2)


def lq_maximize(hessian, linear, constant=0.0):
    """Closed-form maximum of u -> 1/2 u'Hu + g.u + c over R^p.

    H must be negative definite.  Returns (u_star, value).
    """
    H = np.atleast_2d(np.asarray(hessian, dtype=float))
    g = np.atleast_1d(np.asarray(linear, dtype=float))
    try:
        L = np.linalg.cholesky(-H)
    except np.linalg.LinAlgError:
        raise NumericalError("continuum-control Hessian is not negative definite")
    y = np.linalg.solve(L, g)
    u_star = np.linalg.solve(L.T, y)  # solves -H u = g
    value = float(constant + 0.5 * g @ u_star)
    return u_star, value


def mode_response(spec, generator, m, x, est: DerivativeEstimates, h):
    """G applied at mode m: D0 + h max_u(G1 + D2_m)."""
    x = np.asarray(x, dtype=float)
    mbar = generator.projection[m]
    gap = spec.drift(m, x, None) - generator.drift_at(mbar, x)
    delta = spec.discount(m, x, None)
    ell = spec.reward(m, x, None)
    d2 = est.d2_by_mode[m]
    base = gap @ est.d1 - delta * est.d0 + ell + d2
    if spec.lq is None:
        return est.d0 + h * base
    B = np.asarray(spec.lq.B[m], dtype=float)
    H = np.asarray(spec.lq.H[m], dtype=float)
    g = B.T @ est.d1 + np.asarray(spec.lq.ell_ux[m]) @ x + np.asarray(spec.lq.ell_u0[m])
    _, extra = lq_maximize(H, g, 0.0)
    return est.d0 + h * (base + extra)


def apply_G(m, x, est: DerivativeEstimates, h, spec, generator):
    """Public alias of the per-mode operator."""
    return mode_response(spec, generator, m, x, est, h)


def build_polys(spec, generator, x, k, modes=None, tol=1e-10):
    """Monotone weight polynomials per mode at state x.

    k = "auto" selects the smallest k making every mode's one-step weights
    eventually nonnegative, from the residual traces at x.
    """
    modes = range(spec.n_modes) if modes is None else modes
    factors = {}
    for m in modes:
        if generator.residual is not None:
            factors[m] = generator.residual_at(m, x).Sigma
        else:
            factors[m] = cholesky_drop_zero_columns(
                residual_matrix(spec, generator, m, x), tol)
    if k == "auto":
        abar = max((float(np.sum(S * S)) for S in factors.values()), default=0.0)
        k = monotone_poly.min_k_for_monotonicity(abar)
    return {m: monotone_poly.build(S, k) for m, S in factors.items()}, k


def apply_T(t, h, phi, x, spec, generator, increments, k="auto", weights=None):
    """One-step operator: max over modes of the G-image of phi at x.

    `phi` is a callable on batches of states; `increments` the shared raw
    increment sample (optionally with quadrature `weights`).
    """
    x = np.asarray(x, dtype=float)
    increments = np.atleast_2d(np.asarray(increments, dtype=float))
    polys, _ = build_polys(spec, generator, x, k)
    best = -np.inf
    for mbar in generator.retained:
        class_modes = [m for m in range(spec.n_modes) if generator.projection[m] == mbar]
        sb = generator.sigbar_at(mbar, x)
        drift = generator.drift_at(mbar, x)

        def phi_tilde(w_batch, sb=sb, drift=drift):
            succ = x[None, :] + drift[None, :] * h + w_batch @ sb.T
            return np.asarray(phi(succ), dtype=float)

        est = estimate_derivatives(phi_tilde, increments, sb, h,
                                   {m: polys[m] for m in class_modes},
                                   weights=weights)
        for m in class_modes:
            best = max(best, mode_response(spec, generator, m, x, est, h))
    return best


def gauss_hermite_increments(d, h, nodes_per_dim):
    """Tensor Gauss-Hermite rule for N(0, h I_d): (increments, weights).

    Exact-expectation hook for tests and small d; weights sum to 1.
    """
    from scipy.special import roots_hermitenorm
    z, w = roots_hermitenorm(nodes_per_dim)
    w = w / w.sum()
    grids = np.meshgrid(*([z] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    wgrids = np.meshgrid(*([w] * d), indexing="ij")
    wts = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return np.sqrt(h) * pts, wts


# ---------------------------------------------------------------------------
# finite-difference equivalences (three-point increment law)


def discrete_increment_operator_1d(A11, k, nu):
    """Stencil of the 1D operator under the +-nu/0 three-point increment law.

    The law takes +-nu with probability 1/(2 nu^2) and 0 otherwise.  Returns
    a dict with the stencil weights, the effective diffusion coefficient
    b = 1 + (A11 - 1)(nu^2 - 1)/(4k + 2), a consistency flag (b equals A11
    exactly when nu^2 = 4k + 3) and a monotonicity flag (all weights >= 0).
    """
    if nu <= 1.0:
        raise ConfigurationError("nu must exceed 1")
    b = 1.0 + (A11 - 1.0) * (nu * nu - 1.0) / (4 * k + 2)
    w_side = b / (2.0 * nu * nu)
    w_center = 1.0 - b / (nu * nu)
    return {
        "b": b,
        "w_center": w_center,
        "w_plus": w_side,
        "w_minus": w_side,
        "consistent": bool(np.isclose(nu * nu, 4 * k + 3, rtol=0, atol=1e-12)),
        "monotone": bool(w_center >= 0.0 and w_side >= 0.0),
    }


def discrete_increment_weights_2d(A):
    """9-point stencil weights of the 2D k=0 operator at nu = sqrt(3).

    Returns (w_center, w_axis, w_corner): w_axis[i] weights x +- sqrt(3h) e_i
    (same weight for both signs), w_corner[(e1, e2)] the four diagonal
    neighbors.  Weights always sum to one; they are all nonnegative exactly
    under the trace constraint tr(A - I) <= 2.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape != (2, 2):
        raise ConfigurationError("A must be 2x2")
    tr = A[0, 0] + A[1, 1] - 2.0
    w_center = (2.0 / 9.0) * (2.0 - tr)
    w_axis = np.array([
        (3.0 * (A[0, 0] - 1.0) + 2.0 - tr) / 18.0,
        (3.0 * (A[1, 1] - 1.0) + 2.0 - tr) / 18.0,
    ])
    w_corner = {}
    for e1 in (1, -1):
        for e2 in (1, -1):
            quad = (A[0, 0] - 1.0) + (A[1, 1] - 1.0) + 2.0 * A[0, 1] * e1 * e2
            w_corner[(e1, e2)] = (3.0 * quad + 2.0 - tr) / 72.0
    return w_center, w_axis, w_corner
