"""Backward driver: regression of one-step images onto quadratic forms.

Each backward step anchors one candidate form per (path, retained mode):
the next-step form family is evaluated at the anchor's successors to pin a
measurable selection, the per-mode operator image of that selection (an
exactly quadratic function of the state) is recovered by least squares on
a small design of simulated states, and the best mode's form at the anchor
joins the new family.  The family size therefore never exceeds
(retained modes) x (paths).
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from . import monotone_poly
from .errors import ConfigurationError, NumericalError, UsageError
from .hjb_problem import MaxPlusValueFunction, QuadraticForm, sup_eval, value_eval
from .scheme_ops import build_polys
from .simulation import simulate, uniform_subsample

__all__ = [
    "SolverConfig",
    "RegressionDesign",
    "SolveReport",
    "quad_basis_size",
    "quad_features",
    "form_coefficients",
    "coefficients_to_form",
    "select_optimal_forms",
    "regress_G_image",
    "backward_solve",
    "value_eval",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    """Run parameters of the backward solve.

    `k` is the smoothing order or "auto" (smallest order that makes every
    mode's weight polynomial eventually nonnegative).  `ridge_scale` scales
    the ridge penalty by tr(normal matrix)/basis size; zero disables it.
    """

    h: float
    n_inner: int
    n_states: int
    n_increments: int
    seed: int = 0
    k: object = "auto"
    ridge_scale: float = 1e-8
    dedup: bool = True

    def validate(self, dimension):
        if self.n_states > self.n_inner:
            raise ConfigurationError(
                f"n_states={self.n_states} must not exceed n_inner={self.n_inner}")
        basis = quad_basis_size(dimension)
        if self.n_states < basis:
            raise ConfigurationError(
                f"n_states={self.n_states} below quadratic basis size {basis}: "
                "regression unidentifiable")
        if self.n_increments < 1 or self.n_inner < 1:
            raise ConfigurationError("sample sizes must be positive")
        if self.k != "auto" and (not isinstance(self.k, (int, np.integer)) or self.k < 0):
            raise ConfigurationError("k must be 'auto' or a nonnegative integer")


@dataclass(frozen=True)
class RegressionDesign:
    """Product design of one backward step: states x shared increments."""

    states: np.ndarray      # (n_states, d)
    increments: np.ndarray  # (n_increments, d)

    @property
    def basis_size(self):
        return quad_basis_size(self.states.shape[1])


@dataclass
class SolveReport:
    """Per-run diagnostics gathered during the backward sweep."""

    k_used: int = 0
    abar: float = 0.0
    negative_weight_count: int = 0
    floored_events: int = 0
    steps: list = field(default_factory=list)
    select_seconds_total: float = 0.0

    @property
    def max_form_stderr(self):
        return max((s["max_form_stderr"] for s in self.steps), default=0.0)


# ---------------------------------------------------------------------------
# quadratic monomial basis: 1, x_1..x_d, x_a x_b (a <= b, lexicographic)


def quad_basis_size(d):
    return (d + 1) * (d + 2) // 2


def monomial_names(d):
    names = ["1"] + [f"x{a + 1}" for a in range(d)]
    names += [f"x{a + 1}*x{b + 1}" for a in range(d) for b in range(a, d)]
    return names


def quad_features(X):
    """Design rows for a batch of states: (n, basis_size)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    cols = [np.ones(n)] + [X[:, a] for a in range(d)]
    for a in range(d):
        for b in range(a, d):
            cols.append(X[:, a] * X[:, b])
    return np.stack(cols, axis=1)


def form_coefficients(z: QuadraticForm):
    """Coefficient vector beta with q(x, z) = quad_features(x) . beta."""
    d = z.dim
    beta = np.empty(quad_basis_size(d))
    beta[0] = z.c
    beta[1:1 + d] = z.b
    pos = 1 + d
    for a in range(d):
        for b in range(a, d):
            beta[pos] = 0.5 * z.Q[a, a] if a == b else z.Q[a, b]
            pos += 1
    return beta


def coefficients_to_form(beta, d):
    beta = np.asarray(beta, dtype=float)
    Q = np.zeros((d, d))
    pos = 1 + d
    for a in range(d):
        for b in range(a, d):
            if a == b:
                Q[a, a] = 2.0 * beta[pos]
            else:
                Q[a, b] = Q[b, a] = beta[pos]
            pos += 1
    return QuadraticForm(Q, beta[1:1 + d].copy(), float(beta[0]))


def _stack_coefficients(forms):
    return np.stack([form_coefficients(z) for z in forms])


# ---------------------------------------------------------------------------
# step (2a): optimal-form selection at anchor successors


def _successors(generator, mbar, states, increments, h):
    """S(x_i, dW_j) for a batch of states: (n_states, n_increments, d)."""
    states = np.atleast_2d(states)
    mats = np.stack([np.asarray(generator.sigbar(mbar, x), dtype=float)
                     for x in states])
    out = np.einsum("bde,ne->bnd", mats, increments)
    out += states[:, None, :]
    if generator.fbar is not None:
        out += h * np.stack([generator.drift_at(mbar, x) for x in states])[:, None, :]
    return out


def select_optimal_forms(Z_next, mbar, x_t, increments, generator, h,
                         coeffs=None, row_block=1024):
    """Index of the maximizing next-step form at each anchor successor.

    `x_t` may be one state (returns (n_increments,) indices) or a batch
    (returns (n_anchors, n_increments)).  Ties take the lowest index.
    `row_block` keeps each value block cache-resident; it only affects
    speed, never the selection.
    """
    if len(Z_next) == 0:
        raise UsageError("next-step form family is empty")
    C = _stack_coefficients(Z_next) if coeffs is None else coeffs
    CT = np.ascontiguousarray(C.T)
    x_t = np.asarray(x_t, dtype=float)
    single = x_t.ndim == 1
    anchors = x_t[None, :] if single else x_t
    n_w = increments.shape[0]
    out = np.empty((anchors.shape[0], n_w), dtype=np.int64)
    anchor_block = max(1, 32768 // n_w)
    flat = out.reshape(-1)
    for lo in range(0, anchors.shape[0], anchor_block):
        batch = anchors[lo:lo + anchor_block]
        succ = _successors(generator, mbar, batch, increments, h)
        feats = quad_features(succ.reshape(-1, succ.shape[2]))
        base = lo * n_w
        for rlo in range(0, feats.shape[0], row_block):
            vals = feats[rlo:rlo + row_block] @ CT
            flat[base + rlo:base + rlo + vals.shape[0]] = np.argmax(vals, axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# step (2b): per-mode regression of the operator image


class _StepContext:
    """Shared per-(step, retained mode) quantities for the regressions."""

    def __init__(self, spec, generator, mbar, design: RegressionDesign, h, polys,
                 ridge_scale):
        self.spec = spec
        self.generator = generator
        self.mbar = mbar
        self.h = h
        self.design = design
        self.class_modes = [m for m in range(spec.n_modes)
                            if generator.projection[m] == mbar]
        self.polys = polys
        self.succ_feats = np.stack([
            quad_features(s) for s in
            _successors(generator, mbar, design.states, design.increments, h)
        ])  # (n_states, n_w, basis)
        self.phi_x = quad_features(design.states)
        basis = self.phi_x.shape[1]
        # equilibrate columns so the trace-scaled ridge is scale invariant
        # (raw monomials at x ~ 50 differ by orders of magnitude)
        self.col_scale = np.linalg.norm(self.phi_x, axis=0)
        self.col_scale[self.col_scale == 0.0] = 1.0
        phi_s = self.phi_x / self.col_scale
        normal = phi_s.T @ phi_s
        lam = ridge_scale * np.trace(normal) / basis
        if lam == 0.0:
            rank = np.linalg.matrix_rank(self.phi_x)
            if rank < basis:
                raise NumericalError(
                    "regression design is rank deficient without ridge; "
                    f"dependent monomials: {self._deficient_monomials()}")
        self.phi_s = phi_s
        self.cho = scipy.linalg.cho_factor(normal + lam * np.eye(basis))
        self.w_norm = design.increments / np.sqrt(h)
        self.p_weights = {
            m: monotone_poly.eval_P(polys[m], self.w_norm) for m in self.class_modes
        }
        self._rho_cache = {}
        self._prep_mode_data()

    def _deficient_monomials(self):
        d = self.design.states.shape[1]
        _, r, piv = scipy.linalg.qr(self.phi_x, pivoting=True, mode="economic")
        diag = np.abs(np.diag(r))
        cut = diag[0] * 1e-12 if diag.size else 0.0
        names = monomial_names(d)
        return [names[piv[i]] for i in range(len(diag)) if diag[i] <= cut] or \
            [names[p] for p in piv[len(diag):]]

    def _prep_mode_data(self):
        spec, gen, states = self.spec, self.generator, self.design.states
        n_states = states.shape[0]
        self.delta = {}
        self.ell = {}
        self.drift_gap = {}
        self.needs_d1 = spec.lq is not None
        for m in self.class_modes:
            self.delta[m] = np.array([spec.discount(m, x, None) for x in states])
            self.ell[m] = np.array([spec.reward(m, x, None) for x in states])
            gaps = np.stack([
                spec.drift(m, x, None) - gen.drift_at(self.mbar, x) for x in states
            ])
            self.drift_gap[m] = gaps
            if np.any(gaps != 0.0):
                self.needs_d1 = True
        if self.needs_d1:
            self.sigbar_inv_T = np.stack([
                np.linalg.inv(np.asarray(gen.sigbar(self.mbar, x), dtype=float)).T
                for x in states
            ])

    def step_weights(self, m):
        """One-step weights rho_ij of mode m over (design state, increment)."""
        if m not in self._rho_cache:
            rho = 1.0 - self.h * self.delta[m][:, None] + self.p_weights[m][None, :]
            if self.needs_d1:
                lin = np.einsum("ide,je->ijd", self.sigbar_inv_T, self.w_norm)
                rho = rho + np.sqrt(self.h) * np.einsum(
                    "id,ijd->ij", self.drift_gap[m], lin)
            self._rho_cache[m] = rho
        return self._rho_cache[m]

    def responses(self, selection_coeffs, hat=None):
        """Fitted responses y_i^m for one anchor's selection (n_w, basis).

        Returns dict mode -> (y values (n_states,), noise estimate).  With
        `hat` (the fitted-value weights at the anchor) the noise is the
        empirical stderr of the hat-weighted per-increment samples, which
        accounts for the correlation induced by the shared increments;
        otherwise it is the per-state response stderr vector.
        """
        vals = np.einsum("ijb,jb->ij", self.succ_feats, selection_coeffs)
        n_w = vals.shape[1]
        d0 = vals.mean(axis=1)
        if self.needs_d1:
            m1 = vals @ self.design.increments / (self.h * n_w)  # (n_states, d)
            d1 = np.einsum("ide,ie->id", self.sigbar_inv_T, m1)
        out = {}
        for m in self.class_modes:
            pw = self.p_weights[m]
            d2 = vals @ pw / (n_w * self.h)
            base = -self.delta[m] * d0 + self.ell[m] + d2
            if self.needs_d1:
                base = base + np.einsum("id,id->i", self.drift_gap[m], d1)
                if self.spec.lq is not None:
                    base = base + self._lq_extra(m, d1)
            y = d0 + self.h * base
            if n_w <= 1:
                noise = 0.0 if hat is not None else np.zeros_like(d0)
            elif hat is not None:
                g = hat @ (vals * self.step_weights(m))  # (n_w,)
                noise = float(np.std(g) / np.sqrt(n_w))
            else:
                rho = self.step_weights(m)
                noise = np.std(vals * rho, axis=1) / np.sqrt(n_w)
            out[m] = (y, noise)
        return out, vals

    def _lq_extra(self, m, d1):
        lq = self.spec.lq
        B = np.asarray(lq.B[m], dtype=float)
        H = np.asarray(lq.H[m], dtype=float)
        Lux = np.asarray(lq.ell_ux[m], dtype=float)
        lu0 = np.asarray(lq.ell_u0[m], dtype=float)
        g = d1 @ B + self.design.states @ Lux.T + lu0[None, :]  # (n_states, p)
        sol = np.linalg.solve(-H, g.T).T
        return 0.5 * np.einsum("ip,ip->i", g, sol)

    def fit(self, y):
        gamma = scipy.linalg.cho_solve(self.cho, self.phi_s.T @ y)
        return gamma / self.col_scale

    def hat_vector(self, feat_row):
        """Weights of the fitted value at a point over the responses y_i."""
        u = scipy.linalg.cho_solve(self.cho, feat_row / self.col_scale)
        return self.phi_s @ u


def regress_G_image(spec, generator, mbar, design: RegressionDesign, selection,
                    Z_next, h, k="auto", ridge_scale=1e-8, context=None):
    """One anchor's regression: one fitted QuadraticForm per mode of the class.

    `selection` holds the optimal next-step form index per shared increment
    (from select_optimal_forms at the anchor).  Returns
    (forms_by_mode, diagnostics_by_mode) where diagnostics carry the rms fit
    residual and the mean response stderr.
    """
    if context is None:
        polys, _ = build_polys(spec, generator, design.states[0], k,
                               modes=[m for m in range(spec.n_modes)
                                      if generator.projection[m] == mbar])
        context = _StepContext(spec, generator, mbar, design, h, polys, ridge_scale)
    C = _stack_coefficients(Z_next)
    sel_coeffs = C[np.asarray(selection, dtype=int)]
    responses, _ = context.responses(sel_coeffs)
    d = design.states.shape[1]
    forms, diags = {}, {}
    for m, (y, se) in responses.items():
        beta = context.fit(y)
        resid = context.phi_x @ beta - y
        rms = float(np.sqrt(np.mean(resid ** 2)))
        forms[m] = coefficients_to_form(beta, d)
        diags[m] = {"rms_residual": rms, "mean_response_se": float(np.mean(se))}
    return forms, diags


# ---------------------------------------------------------------------------
# the backward sweep


def backward_solve(spec, generator, config: SolverConfig, terminal_forms,
                   initial_sampler, paths=None):
    """Run the full backward induction; returns (value function, report).

    `terminal_forms` is the finite family under-approximating the terminal
    payoff; its size must respect (retained modes) x n_inner.  `paths` can
    inject a pre-simulated SamplePaths (it must match the configuration).
    """
    config.validate(spec.dimension)
    n_retained = len(generator.retained)
    terminal_forms = list(terminal_forms)
    if len(terminal_forms) == 0:
        raise ConfigurationError("terminal form family is empty")
    if len(terminal_forms) > n_retained * config.n_inner:
        raise ConfigurationError(
            f"terminal family size {len(terminal_forms)} exceeds the "
            f"cardinality bound {n_retained} x {config.n_inner}")

    if paths is None:
        paths = simulate(spec, generator, config.n_inner, config.h, config.seed,
                         initial_sampler)
    n_steps = paths.n_steps
    d = spec.dimension

    # k selection from residual traces at a reference state (constant-ratio
    # generators make this state-independent; probe at the initial mean)
    x_ref = paths.states[generator.retained[0]][0].mean(axis=0)
    polys, k_used = build_polys(spec, generator, x_ref, config.k)
    abar = max(p.trace for p in polys.values())

    report = SolveReport(k_used=k_used, abar=abar,
                         floored_events=paths.floored_events)
    logger.info("backward solve: %d steps, k=%d, abar=%.4g, |Z_T|=%d",
                n_steps, k_used, abar, len(terminal_forms))

    all_forms = [None] * (n_steps + 1)
    all_se = [None] * (n_steps + 1)
    all_forms[n_steps] = list(terminal_forms)
    all_se[n_steps] = [0.0] * len(terminal_forms)

    Z_next = list(terminal_forms)
    for it in range(n_steps - 1, -1, -1):
        t0 = time.perf_counter()
        C = _stack_coefficients(Z_next)

        idx = uniform_subsample(config.seed, it, config.n_states + config.n_increments,
                                config.n_inner)
        idx_x, idx_w = idx[:config.n_states], idx[config.n_states:]
        dW = paths.increments[it][idx_w]

        new_entries = {}  # (path, mbar) -> (form, stderr)
        min_weight = np.inf
        max_resid = 0.0
        max_se = 0.0
        select_seconds = 0.0
        for mbar in generator.retained:
            design = RegressionDesign(states=paths.states[mbar][it][idx_x],
                                      increments=dW)
            ctx = _StepContext(spec, generator, mbar, design, config.h,
                               polys, config.ridge_scale)
            anchors = paths.states[mbar][it]

            ts = time.perf_counter()
            zsel = select_optimal_forms(Z_next, mbar, anchors, dW, generator,
                                        config.h, coeffs=C)
            select_seconds += time.perf_counter() - ts

            # one-step weight diagnostic on the design states
            for m in ctx.class_modes:
                rho = ctx.step_weights(m)
                min_weight = min(min_weight, float(rho.min()))
                report.negative_weight_count += int((rho < 0.0).sum())

            anchor_feats = quad_features(anchors)
            for omega in range(config.n_inner):
                hv = ctx.hat_vector(anchor_feats[omega])
                responses, _ = ctx.responses(C[zsel[omega]], hat=hv)
                best_val, best = -np.inf, None
                for m in ctx.class_modes:
                    y, anchor_se = responses[m]
                    beta = ctx.fit(y)
                    resid = ctx.phi_x @ beta - y
                    rms = float(np.sqrt(np.mean(resid ** 2)))
                    val = float(anchor_feats[omega] @ beta)
                    if val > best_val:
                        best_val = val
                        best = (beta, max(rms, anchor_se))
                    max_resid = max(max_resid, rms)
                new_entries[(omega, mbar)] = best

        Z_t, se_t = [], []
        seen = {}
        for omega in range(config.n_inner):
            for mbar in generator.retained:
                beta, proxy = new_entries[(omega, mbar)]
                z = coefficients_to_form(beta, d)
                if config.dedup:
                    key = z.key()
                    if key in seen:
                        continue
                    seen[key] = True
                Z_t.append(z)
                se_t.append(proxy)
                max_se = max(max_se, proxy)

        if len(Z_t) > n_retained * config.n_inner:
            raise NumericalError("cardinality bound violated (internal error)")
        all_forms[it] = Z_t
        all_se[it] = se_t
        Z_next = Z_t
        wall = time.perf_counter() - t0
        report.select_seconds_total += select_seconds
        report.steps.append({
            "t": it * config.h,
            "n_forms": len(Z_t),
            "min_weight": float(min_weight),
            "max_rms_residual": float(max_resid),
            "max_form_stderr": float(max_se),
            "select_seconds": select_seconds,
            "wall_seconds": wall,
        })
        logger.info("t=%.4f |Z_t|=%d min_weight=%.4g max_resid=%.3g wall=%.2fs",
                    it * config.h, len(Z_t), min_weight, max_resid, wall)

    times = np.arange(n_steps + 1) * config.h
    vf = MaxPlusValueFunction(times=times, forms_per_step=tuple(all_forms),
                              form_stderr=tuple(tuple(s) for s in all_se))
    return vf, report
