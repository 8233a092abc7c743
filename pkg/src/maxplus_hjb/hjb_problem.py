"""Control-problem data model, quadratic forms, and max-plus value functions.

A value function is stored as a finite family of quadratic forms per time
step; evaluation takes the pointwise maximum.  The terminal payoff of the
benchmark problems, a capped call spread on the best-odd/worst-even
coordinate spread, is approximated from below by such a family.
"""

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, NumericalError, UsageError

__all__ = [
    "QuadraticForm",
    "ModeCoefficients",
    "LQControl",
    "ProblemSpec",
    "MaxPlusValueFunction",
    "eval_quad",
    "sup_eval",
    "approximate_scalar_payoff",
    "lift_payoff",
    "scalar_call_spread",
    "dump_value_function",
]

_SYM_TOL = 1e-12


@dataclass(frozen=True)
class QuadraticForm:
    """Parameters (Q, b, c) of q(x) = 1/2 x'Qx + b.x + c, with Q symmetric."""

    Q: np.ndarray
    b: np.ndarray
    c: float

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if Q.shape[0] != Q.shape[1] or Q.shape[0] != b.shape[0]:
            raise ConfigurationError(
                f"inconsistent quadratic form shapes Q{Q.shape}, b{b.shape}")
        asym = np.linalg.norm(Q - Q.T)
        if asym > _SYM_TOL * (1.0 + np.linalg.norm(Q)):
            raise ConfigurationError(
                f"Q is not symmetric (relative asymmetry {asym:.2e})")
        Q = 0.5 * (Q + Q.T) + 0.0  # + 0.0 normalizes negative zeros for key()
        Q.flags.writeable = False
        b = b + 0.0
        b.flags.writeable = False
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", float(self.c) + 0.0)

    @property
    def dim(self):
        return self.b.shape[0]

    def __call__(self, x):
        return eval_quad(self, x)

    def key(self):
        """Hashable exact-equality key (used for deduplication)."""
        return (self.Q.tobytes(), self.b.tobytes(), self.c)


def eval_quad(z: QuadraticForm, x) -> float:
    """Evaluate q(x) = 1/2 x'Qx + b.x + c.

    `x` may be a single point (d,) or a batch (n, d); returns a scalar or
    an (n,) array accordingly.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != z.dim:
        raise ConfigurationError(
            f"point dimension {x.shape[-1]} != form dimension {z.dim}")
    if x.ndim == 1:
        return float(0.5 * x @ z.Q @ x + z.b @ x + z.c)
    return 0.5 * np.einsum("nd,de,ne->n", x, z.Q, x) + x @ z.b + z.c


def sup_eval(forms: Sequence[QuadraticForm], x):
    """Pointwise maximum over a family of quadratic forms.

    Returns (value, argmax_index); ties resolve to the lowest index so runs
    are reproducible.
    """
    if len(forms) == 0:
        raise UsageError("sup_eval needs at least one quadratic form")
    x = np.asarray(x, dtype=float)
    vals = np.stack([eval_quad(z, x) for z in forms])
    idx = int(np.argmax(vals)) if x.ndim == 1 else np.argmax(vals, axis=0)
    if x.ndim == 1:
        return float(vals[idx]), idx
    return vals[idx, np.arange(x.shape[0])], idx


@dataclass(frozen=True)
class ModeCoefficients:
    """Coefficient functions of one discrete mode.

    `sigma(x, u)` returns the d x d volatility; drift/discount/reward default
    to zero when omitted.  Callables must accept `u=None` for problems
    without a continuum control.
    """

    sigma: Callable
    f: Optional[Callable] = None
    delta: Optional[Callable] = None
    ell: Optional[Callable] = None
    label: str = ""


@dataclass(frozen=True)
class LQControl:
    """Linear-quadratic continuum-control descriptor (control space R^p).

    Per mode m: f^m(x,u) = f^m(x,None) + B u and
    ell^m(x,u) = ell^m(x,None) + u.(ell_ux x + ell_u0) + 1/2 u'H u,
    with H strictly negative definite.  sigma and delta must not depend
    on u.
    """

    p: int
    B: dict  # mode index -> (d, p)
    H: dict  # mode index -> (p, p), negative definite
    ell_ux: dict  # mode index -> (p, d)
    ell_u0: dict  # mode index -> (p,)


@dataclass(frozen=True)
class ProblemSpec:
    """Finite-horizon controlled diffusion with switching modes."""

    dimension: int
    horizon: float
    modes: tuple
    psi: Callable
    lq: Optional[LQControl] = None

    def __post_init__(self):
        if self.dimension <= 0:
            raise ConfigurationError("dimension must be positive")
        if self.horizon <= 0:
            raise ConfigurationError("horizon must be positive")
        if len(self.modes) == 0:
            raise ConfigurationError("mode set must be nonempty")
        object.__setattr__(self, "modes", tuple(self.modes))
        if self.lq is not None:
            for m in range(len(self.modes)):
                H = np.asarray(self.lq.H[m], dtype=float)
                try:
                    np.linalg.cholesky(-H)
                except np.linalg.LinAlgError:
                    raise ConfigurationError(
                        f"LQ control Hessian of mode {m} is not negative definite")

    @property
    def n_modes(self):
        return len(self.modes)

    def drift(self, m, x, u=None):
        fm = self.modes[m].f
        base = np.zeros(self.dimension) if fm is None else np.asarray(fm(x, u), dtype=float)
        if u is not None and self.lq is not None:
            base = base + np.asarray(self.lq.B[m]) @ np.asarray(u)
        return base

    def discount(self, m, x, u=None):
        dm = self.modes[m].delta
        return 0.0 if dm is None else float(dm(x, u))

    def reward(self, m, x, u=None):
        lm = self.modes[m].ell
        base = 0.0 if lm is None else float(lm(x, u))
        if u is not None and self.lq is not None:
            u = np.asarray(u, dtype=float)
            x = np.asarray(x, dtype=float)
            lin = np.asarray(self.lq.ell_ux[m]) @ x + np.asarray(self.lq.ell_u0[m])
            base = base + u @ lin + 0.5 * u @ np.asarray(self.lq.H[m]) @ u
        return base

    def vol(self, m, x, u=None):
        return np.asarray(self.modes[m].sigma(x, u), dtype=float)


# ---------------------------------------------------------------------------
# terminal payoff machinery


def scalar_call_spread(K1, K2):
    """psi1(s) = (s - K1)^+ - (s - K2)^+ as a vectorized callable."""
    def psi1(s):
        s = np.asarray(s, dtype=float)
        return np.minimum(np.maximum(s - K1, 0.0), K2 - K1)
    return psi1


def _crossing_gap(g_lo, g_hi, delta):
    # max of min(g_lo/2 (s-t)^2, g_hi/2 (s-t')^2) over s between tangent
    # points t < t' = t + delta
    r = np.sqrt(g_lo) + np.sqrt(g_hi)
    return 0.5 * g_lo * g_hi * delta * delta / (r * r)


def approximate_scalar_payoff(K1, K2, R=1000.0, eps=0.05, max_forms=100000):
    """Under-approximate psi1(s) = (s-K1)^+ - (s-K2)^+ by quadratics on [-R, R].

    Returns a list of (a, b, c) coefficient triples for p(s) = a/2 s^2 + b s + c
    such that every p <= psi1 on [-R, R] (exactly, by construction) and
    max_p p >= psi1 - eps on [-R, R].

    The family is the zero form, downward parabolas tangent to the middle
    linear piece, and downward parabolas tangent to the upper plateau; each
    curvature is the least-negative one keeping the parabola below psi1
    globally, and tangent points are spaced so adjacent parabolas cross at
    most eps below psi1.
    """
    if not K1 < K2:
        raise ConfigurationError("need K1 < K2")
    if R <= max(abs(K1), abs(K2)):
        raise ConfigurationError("R must exceed |K1| and |K2|")
    if eps <= 0:
        raise ConfigurationError("eps must be positive")

    forms = [(0.0, 0.0, 0.0)]
    span = K2 - K1

    # least-negative curvature keeping a parabola tangent to the middle line
    # at t below psi1 on all of [-R, R]; binding constraint is on [K2, R]
    def middle_curvature(t):
        if 2.0 * K2 - t <= R:
            return 1.0 / (2.0 * (K2 - t))
        return 2.0 * (R - K2) / (R - t) ** 2

    t = min(K1 + eps, 0.5 * (K1 + K2))
    while True:
        g = middle_curvature(t)
        forms.append((-g, 1.0 + g * t, -K1 - 0.5 * g * t * t))
        if len(forms) > max_forms:
            raise NumericalError(
                f"scalar payoff budget exceeded ({max_forms} forms); "
                f"achieved gap > {eps}")
        if K2 - t <= 4.0 * eps:
            # remaining gap at K2 is (K2 - t)/4 <= eps
            break
        # step solves (g(t+Delta)/2)(Delta/2)^2 = eps:
        # Delta^2 + 16 eps Delta - 16 eps (K2 - t) = 0
        delta = -8.0 * eps + np.sqrt(64.0 * eps * eps + 16.0 * eps * (K2 - t))
        t = min(t + delta, K2 - 1e-12)

    # least-negative curvature for a parabola tangent to the plateau at t;
    # binding constraint moves from the middle line to the point s = K1
    def plateau_curvature(t):
        if t <= 2.0 * K2 - K1:
            return 1.0 / (2.0 * (t - K2))
        return 2.0 * span / (t - K1) ** 2

    t = min(K2 + 4.0 * eps, R)
    while True:
        g = plateau_curvature(t)
        forms.append((-g, g * t, span - 0.5 * g * t * t))
        if len(forms) > max_forms:
            raise NumericalError(
                f"scalar payoff budget exceeded ({max_forms} forms); "
                f"achieved gap > {eps}")
        if t >= R:
            break
        # curvature decreases rightward, so g at the left tangent bounds
        # the crossing gap
        delta = np.sqrt(8.0 * eps / g)
        t = min(t + delta, R)
    return forms


def lift_payoff(scalar_forms, odd_indices, even_indices, d):
    """Lift 1D quadratics p(s) to R^d via s = x_i - x_j.

    `odd_indices` / `even_indices` are 0-based coordinate index sets; one
    lifted form is produced per (scalar form, i, j) so the lifted family's
    maximum equals max_{i,j} (max_p p)(x_i - x_j).
    """
    I = list(odd_indices)
    J = list(even_indices)
    if not I or not J:
        raise ConfigurationError("index sets must be nonempty")
    if set(I) & set(J):
        raise ConfigurationError("index sets must be disjoint")
    for idx in I + J:
        if not 0 <= idx < d:
            raise ConfigurationError(f"coordinate index {idx} out of range for d={d}")
    lifted = []
    for a, b, c in scalar_forms:
        for i in I:
            for j in J:
                Q = np.zeros((d, d))
                Q[i, i] = a
                Q[j, j] = a
                Q[i, j] = -a
                Q[j, i] = -a
                vb = np.zeros(d)
                vb[i] = b
                vb[j] = -b
                lifted.append(QuadraticForm(Q, vb, c))
    return lifted


# ---------------------------------------------------------------------------
# max-plus value functions


@dataclass(frozen=True)
class MaxPlusValueFunction:
    """v(t, x) = max_z q(x, z) over a finite set Z_t per grid time.

    `times` is the uniform grid {0, h, ..., T}; `forms_per_step[k]` holds
    Z_{times[k]}.  `form_stderr[k]` carries a per-form regression noise
    proxy (zeros for terminal forms).
    """

    times: np.ndarray
    forms_per_step: tuple
    form_stderr: tuple = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if len(times) < 2:
            raise ConfigurationError("need at least terminal and one more step")
        steps = np.diff(times)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
            raise ConfigurationError("time grid must be uniform")
        if len(self.forms_per_step) != len(times):
            raise ConfigurationError("one form set required per grid time")
        for Z in self.forms_per_step:
            if len(Z) == 0:
                raise ConfigurationError("empty form set at a grid time")
        times.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "forms_per_step", tuple(tuple(Z) for Z in self.forms_per_step))
        if self.form_stderr is None:
            object.__setattr__(
                self, "form_stderr",
                tuple(tuple(0.0 for _ in Z) for Z in self.forms_per_step))

    @property
    def h(self):
        return float(self.times[1] - self.times[0])

    def step_index(self, t):
        k = int(round((t - self.times[0]) / self.h))
        if k < 0 or k >= len(self.times) or abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise UsageError(f"t={t} is not on the time grid (no interpolation)")
        return k


def value_eval(vf: MaxPlusValueFunction, t, x):
    """Evaluate v(t, x) = max over Z_t; t must sit on the grid."""
    k = vf.step_index(t)
    val, _ = sup_eval(vf.forms_per_step[k], x)
    return val


def dump_value_function(vf: MaxPlusValueFunction, path):
    """Write one JSON document with all (Q, b, c) at full double precision."""
    doc = {
        "h": vf.h,
        "times": [float(t) for t in vf.times],
        "steps": [
            {
                "t": float(t),
                "forms": [
                    {"Q": z.Q.tolist(), "b": z.b.tolist(), "c": z.c}
                    for z in Z
                ],
                "stderr_proxy": list(se),
            }
            for t, Z, se in zip(vf.times, vf.forms_per_step, vf.form_stderr)
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
