"""Uncertain-correlation option pricing benchmarks and reference oracles.

Builders for the d=2 and d=5 correlation mode sets, the shared-generator
problem construction, a quadrature oracle for the fixed-correlation
two-asset price, the dimension-5 lower bound assembled from dimension-2
solutions, and the experiment runner emitting CSV/JSON reports.
"""

import itertools
import json
import time
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import ndtr, roots_hermitenorm

from .errors import ConfigurationError, NumericalError
from .factorization import build_uncertain_correlation_generator
from .hjb_problem import (MaxPlusValueFunction, ModeCoefficients, ProblemSpec,
                          approximate_scalar_payoff, dump_value_function,
                          lift_payoff, scalar_call_spread, sup_eval)
from .maxplus_solver import SolverConfig, backward_solve, quad_features, \
    _stack_coefficients
from .simulation import initial_sampler_uniform, simulate

__all__ = [
    "ExperimentConfig",
    "build_correlation_modes",
    "build_block_correlation_modes",
    "make_uncertain_correlation_problem",
    "terminal_family",
    "oracle_singleton_price",
    "tensor_gh_spread_price",
    "oracle_slice",
    "lower_bound_dim5",
    "pair_configs_dim5",
    "run_experiment",
    "stability_scan",
]

_BLOCK_PAIRS = {2: [(0, 1)], 5: [(0, 1), (3, 4)]}


def build_block_correlation_modes(d, pairs, rho):
    """All sign choices of +-rho on the given index pairs, identity elsewhere."""
    if not 0.0 <= rho < 1.0:
        raise ConfigurationError(f"rho={rho} is not a valid correlation (need 0 <= rho < 1)")
    for i, j in pairs:
        if not (0 <= i < d and 0 <= j < d and i != j):
            raise ConfigurationError(f"invalid correlation pair ({i}, {j}) for d={d}")
    modes = []
    for signs in itertools.product((1.0, -1.0), repeat=len(pairs)):
        m = np.eye(d)
        for (i, j), s in zip(pairs, signs):
            m[i, j] = m[j, i] = s * rho + 0.0  # normalize -0.0 at rho = 0
        modes.append(m)
    return modes


def build_correlation_modes(d, rho):
    """The shipped mode sets: one +-rho pair for d=2, two pairs for d=5."""
    if d not in _BLOCK_PAIRS:
        raise ConfigurationError(
            f"no shipped correlation builder for d={d}; "
            "use build_block_correlation_modes")
    return build_block_correlation_modes(d, _BLOCK_PAIRS[d], rho)


def _psi_indices(d):
    odd = [i for i in range(d) if i % 2 == 0]   # 1-based odd coordinates
    even = [i for i in range(d) if i % 2 == 1]
    return odd, even


def make_uncertain_correlation_problem(sigmas, correlation_modes, K1, K2, horizon):
    """(ProblemSpec, GeneratorChoice) for multiplicative uncertain-correlation
    dynamics with the capped spread payoff; exact duplicate modes collapse."""
    sigmas = np.asarray(sigmas, dtype=float)
    d = sigmas.shape[0]
    unique, seen = [], set()
    for m in correlation_modes:
        m = np.atleast_2d(np.asarray(m, dtype=float))
        key = m.tobytes()
        if key not in seen:
            seen.add(key)
            unique.append(m)

    psi1 = scalar_call_spread(K1, K2)
    odd, even = _psi_indices(d)

    def psi(x):
        x = np.asarray(x, dtype=float)
        spread = x[..., odd].max(axis=-1) - x[..., even].min(axis=-1)
        return psi1(spread)

    modes = []
    for m in unique:
        chol = np.linalg.cholesky(m) if _is_pd(m) else _psd_factor(m)

        def sigma_fn(x, u=None, chol=chol):
            return np.diag(sigmas * np.asarray(x, dtype=float)) @ chol

        modes.append(ModeCoefficients(sigma=sigma_fn, label=_mode_label(m)))

    spec = ProblemSpec(dimension=d, horizon=horizon, modes=tuple(modes), psi=psi)
    generator = build_uncertain_correlation_generator(sigmas, unique)
    return spec, generator


def _is_pd(m):
    try:
        np.linalg.cholesky(m)
        return True
    except np.linalg.LinAlgError:
        return False


def _psd_factor(m):
    w, v = np.linalg.eigh(m)
    w = np.clip(w, 0.0, None)
    return v @ np.diag(np.sqrt(w))


def _mode_label(m):
    off = [f"{m[i, j]:+g}@({i + 1},{j + 1})"
           for i in range(m.shape[0]) for j in range(i + 1, m.shape[0])
           if m[i, j] != 0.0]
    return ",".join(off) if off else "identity"


def terminal_family(d, K1, K2, radius=1000.0, eps=0.05):
    """Lifted terminal forms for the capped spread payoff, deduplicated."""
    scalars = approximate_scalar_payoff(K1, K2, R=radius, eps=eps)
    odd, even = _psi_indices(d)
    lifted = lift_payoff(scalars, odd, even, d)
    out, seen = [], set()
    for z in lifted:
        key = z.key()
        if key not in seen:
            seen.add(key)
            out.append(z)
    return out


# ---------------------------------------------------------------------------
# reference oracles (fixed correlation, two assets)


def _lognormal_call(forward, strike, sd):
    """E[(X - strike)^+] for lognormal X; exact for nonpositive strikes."""
    strike = np.asarray(strike, dtype=float)
    forward = np.broadcast_to(np.asarray(forward, dtype=float), strike.shape)
    out = np.where(strike <= 0.0, forward - strike, 0.0)
    pos = strike > 0
    if np.any(pos):
        d1 = (np.log(forward[pos] / strike[pos]) + 0.5 * sd * sd) / sd
        out = np.array(out)
        out[pos] = forward[pos] * ndtr(d1) - strike[pos] * ndtr(d1 - sd)
    return out


def _lognormal_put(forward, strike, sd):
    strike = np.asarray(strike, dtype=float)
    forward = np.broadcast_to(np.asarray(forward, dtype=float), strike.shape)
    out = np.zeros(strike.shape)
    pos = strike > 0
    if np.any(pos):
        d1 = (np.log(forward[pos] / strike[pos]) + 0.5 * sd * sd) / sd
        out[pos] = strike[pos] * ndtr(sd - d1) - forward[pos] * ndtr(-d1)
    return out


def oracle_singleton_price(x, sigma, m12, t, T, K1, K2, tol=1e-6,
                           start_nodes=64, max_nodes=4096):
    """E[psi1(xi1_T - xi2_T)] under one fixed correlation, by quadrature.

    Gauss-Hermite nodes integrate one driving normal while the other
    asset's conditional lognormal expectation is taken exactly (a call or
    put spread in closed form), which keeps the integrand smooth.  The node
    count doubles until successive values differ by less than `tol`; no
    convergence within `max_nodes` nodes per axis raises NumericalError.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 2:
        raise ConfigurationError("the closed-oracle applies to two assets")
    tau = T - t
    if tau < 0:
        raise ConfigurationError("evaluation time is past the horizon")
    single = x.ndim == 1
    X = x[None, :] if single else x
    psi1 = scalar_call_spread(K1, K2)

    s1 = sigma[0] * np.sqrt(tau)
    s2 = sigma[1] * np.sqrt(tau)
    if s1 == 0.0 and s2 == 0.0:
        out = psi1(X[:, 0] - X[:, 1])
        return float(out[0]) if single else out
    if not -1.0 < m12 < 1.0:
        # |m12| = 1 collapses the conditional variance; the smoothing that
        # makes the quadrature converge is unavailable and no benchmark
        # needs the boundary (correlation sets use |rho| < 1)
        raise ConfigurationError(
            f"m12={m12} must satisfy |m12| < 1 for the quadrature oracle")
    s1_res = s1 * np.sqrt(1.0 - m12 * m12)
    s2_res = s2 * np.sqrt(1.0 - m12 * m12)

    if s1_res > 0.0:
        # outer: asset-2 normal; inner: conditional call spread on asset 1
        def values(n):
            z, w = roots_hermitenorm(n)
            w = w / w.sum()
            xi2 = X[:, 1, None] * np.exp(-0.5 * s2 * s2 + s2 * z[None, :])
            F1 = X[:, 0, None] * np.exp(-0.5 * s1 * s1 + s1 * m12 * z[None, :]
                                        + 0.5 * s1_res * s1_res)
            g = _lognormal_call(F1, xi2 + K1, s1_res) \
                - _lognormal_call(F1, xi2 + K2, s1_res)
            return g @ w
    else:
        # asset 1 deterministic given its normal; condition on it, put spread
        def values(n):
            z, w = roots_hermitenorm(n)
            w = w / w.sum()
            xi1 = X[:, 0, None] * np.exp(-0.5 * s1 * s1 + s1 * z[None, :])
            F2 = X[:, 1, None] * np.exp(-0.5 * s2 * s2 + s2 * m12 * z[None, :]
                                        + 0.5 * s2_res * s2_res)
            g = _lognormal_put(F2, xi1 - K1, s2_res) \
                - _lognormal_put(F2, xi1 - K2, s2_res)
            return g @ w

    prev = None
    n = start_nodes
    while n <= max_nodes:
        v = values(n)
        if prev is not None and np.max(np.abs(v - prev)) < tol:
            out = np.asarray(v, dtype=float)
            return float(out[0]) if single else out
        prev = v
        n *= 2
    raise NumericalError(
        f"oracle quadrature did not converge below {tol} within {max_nodes} nodes")


def tensor_gh_spread_price(x, sigma, m12, t, T, K1, K2, nodes=512):
    """Raw tensor Gauss-Hermite evaluation of the same expectation.

    Brute-force cross-check of `oracle_singleton_price`; the kinked payoff
    limits its practical accuracy to roughly 1e-4, so it backs sanity tests
    rather than the acceptance comparison.
    """
    x = np.asarray(x, dtype=float)
    tau = T - t
    psi1 = scalar_call_spread(K1, K2)
    s1 = sigma[0] * np.sqrt(tau)
    s2 = sigma[1] * np.sqrt(tau)
    if s1 == 0.0 and s2 == 0.0:
        return float(psi1(x[0] - x[1]))
    z, w = roots_hermitenorm(nodes)
    w = w / w.sum()
    rbar = np.sqrt(max(1.0 - m12 * m12, 0.0))
    total = 0.0
    for i in range(nodes):
        xi1 = x[0] * np.exp(-0.5 * s1 * s1 + s1 * z[i])
        xi2 = x[1] * np.exp(-0.5 * s2 * s2 + s2 * (m12 * z[i] + rbar * z))
        total += w[i] * float(w @ psi1(xi1 - xi2))
    return total


# ---------------------------------------------------------------------------
# experiment configuration and runner


@dataclass(frozen=True)
class ExperimentConfig:
    """Benchmark run description; JSON keys match the field names."""

    dimension: int = 2
    sigmas: tuple = (0.4, 0.3)
    rho: float = 0.0
    k1: float = -5.0
    k2: float = 5.0
    horizon: float = 0.25
    h: float = 0.01
    mode_set: str = "uncertain"  # or "singleton": one fixed m12 = rho
    n_inner: int = 2000
    n_states: int = 10
    n_increments: int = 1000
    seed: int = 20240
    k: object = "auto"
    ridge_scale: float = 1e-8
    payoff_eps: float = 0.05
    payoff_radius: float = 1000.0
    initial_center: float = 50.0
    initial_half_width_factor: float = 0.5
    initial_half_width: object = None  # per-coordinate override of the factor
    slice_fixed: float = 50.0
    slice_span: float = 50.0
    slice_points: int = 101
    report_times: tuple = (0.0,)

    @classmethod
    def dim5_defaults(cls, **overrides):
        base = dict(dimension=5, sigmas=(0.4, 0.3, 0.2, 0.3, 0.4), rho=0.8,
                    n_inner=3000, n_states=50, n_increments=1000)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        for key in ("sigmas", "report_times"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def to_dict(self):
        out = asdict(self)
        out["sigmas"] = list(out["sigmas"])
        out["report_times"] = list(out["report_times"])
        return out

    def correlation_modes(self):
        if self.mode_set == "uncertain":
            return build_correlation_modes(self.dimension, self.rho)
        if self.mode_set == "singleton":
            if self.dimension != 2:
                raise ConfigurationError("singleton mode set is for d=2 oracle runs")
            m = np.array([[1.0, self.rho], [self.rho, 1.0]])
            return [m]
        raise ConfigurationError(f"unknown mode_set {self.mode_set!r}")

    def build(self):
        spec, gen = make_uncertain_correlation_problem(
            self.sigmas, self.correlation_modes(), self.k1, self.k2, self.horizon)
        solver = SolverConfig(h=self.h, n_inner=self.n_inner,
                              n_states=self.n_states,
                              n_increments=self.n_increments, seed=self.seed,
                              k=self.k, ridge_scale=self.ridge_scale)
        x0 = np.full(self.dimension, self.initial_center)
        if self.initial_half_width is not None:
            hw = np.asarray(self.initial_half_width, dtype=float)
        else:
            hw = self.initial_half_width_factor * x0
        sampler = initial_sampler_uniform(x0, hw)
        return spec, gen, solver, sampler

    def slice_states(self):
        sweeps = np.linspace(-self.slice_span, self.slice_span, self.slice_points)
        X = np.full((self.slice_points, self.dimension), self.slice_fixed)
        X[:, 0] = self.slice_fixed + sweeps
        return sweeps, X


def stability_scan(vf: MaxPlusValueFunction, paths, lo, hi, tol):
    """Count simulated states where the value leaves [lo - tol, hi + tol]."""
    violations = 0
    coeffs = [_stack_coefficients(Z) for Z in vf.forms_per_step]
    for mbar, X in paths.states.items():
        for kk in range(X.shape[0]):
            vals = np.max(quad_features(X[kk]) @ coeffs[kk].T, axis=1)
            violations += int(np.sum((vals < lo - tol) | (vals > hi + tol)))
    return violations


def _slice_rows(config, vf):
    sweeps, X = config.slice_states()
    feats = quad_features(X)
    rows = []
    for t in config.report_times:
        kk = vf.step_index(t)
        C = _stack_coefficients(vf.forms_per_step[kk])
        vals = feats @ C.T
        best = np.argmax(vals, axis=1)
        se = np.asarray(vf.form_stderr[kk], dtype=float)
        for i, s in enumerate(sweeps):
            rows.append((t, float(s), float(vals[i, best[i]]), float(se[best[i]])))
    return rows


def run_experiment(config: ExperimentConfig, out_prefix):
    """Solve, evaluate the reporting slice, and write the report files.

    Writes `<prefix>.csv` (slice values), `<prefix>_summary.json`
    (parameters and diagnostics) and `<prefix>_value.json` (the full form
    family per time step).  Returns (vf, report, summary_dict).
    """
    spec, gen, solver, sampler = config.build()
    terminal = terminal_family(config.dimension, config.k1, config.k2,
                               config.payoff_radius, config.payoff_eps)
    t_start = time.perf_counter()
    paths = simulate(spec, gen, solver.n_inner, solver.h, solver.seed, sampler)
    vf, report = backward_solve(spec, gen, solver, terminal, sampler, paths=paths)
    wall = time.perf_counter() - t_start

    tol_stab = 10.0 * report.max_form_stderr
    violations = stability_scan(vf, paths, 0.0, config.k2 - config.k1, tol_stab)

    rows = _slice_rows(config, vf)
    csv_path = f"{out_prefix}.csv"
    with open(csv_path, "w") as fh:
        fh.write("t,x_sweep,value,stderr_proxy\n")
        for t, s, v, se in rows:
            fh.write(f"{t:.17g},{s:.17g},{v:.17g},{se:.17g}\n")

    summary = {
        "parameters": config.to_dict(),
        "k_used": report.k_used,
        "abar": report.abar,
        "lam": gen.info.get("lam"),
        "n_terminal_forms": len(terminal),
        "cardinality_bound": len(gen.retained) * config.n_inner,
        "forms_per_step": [len(Z) for Z in vf.forms_per_step],
        "negative_weight_count": report.negative_weight_count,
        "stability_violation_count": violations,
        "stability_tolerance": tol_stab,
        "max_form_stderr": report.max_form_stderr,
        "floored_events": report.floored_events,
        "wall_seconds": wall,
        "select_seconds_total": report.select_seconds_total,
        "steps": report.steps,
    }
    with open(f"{out_prefix}_summary.json", "w") as fh:
        json.dump(summary, fh, indent=1)
    dump_value_function(vf, f"{out_prefix}_value.json")
    return vf, report, summary


def oracle_slice(config: ExperimentConfig, tol=1e-6, max_nodes=4096):
    """Oracle values across the reporting slice for a singleton-mode config."""
    if config.dimension != 2:
        raise ConfigurationError("oracle slices require d=2")
    if config.mode_set != "singleton":
        raise ConfigurationError(
            "the analytic oracle needs a fixed correlation (mode_set='singleton')")
    sweeps, X = config.slice_states()
    out = []
    for t in config.report_times:
        vals = oracle_singleton_price(X, config.sigmas, config.rho, t,
                                      config.horizon, config.k1, config.k2,
                                      tol=tol, max_nodes=max_nodes)
        out.append((t, sweeps, np.asarray(vals)))
    return out


def write_oracle_file(config: ExperimentConfig, path, tol=1e-6, max_nodes=4096):
    data = oracle_slice(config, tol=tol, max_nodes=max_nodes)
    doc = {
        "parameters": config.to_dict(),
        "quadrature": {"rule": "gauss-hermite, conditional closed form",
                       "tolerance": tol, "max_nodes_per_axis": max_nodes},
        "slices": [
            {"t": float(t), "x_sweep": [float(s) for s in sweeps],
             "value": [float(v) for v in vals]}
            for t, sweeps, vals in data
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
    return doc


# ---------------------------------------------------------------------------
# dimension-5 lower bound from dimension-2 solutions


def pair_configs_dim5(config: ExperimentConfig, **solver_overrides):
    """d=2 configs for every (odd, even) coordinate pair of a d=5 problem.

    Coupled pairs keep the uncertain +-rho set; uncoupled pairs price under
    the fixed zero correlation their joint law actually has, so the pair
    values stay true lower bounds.
    """
    if config.dimension != 5:
        raise ConfigurationError("pair decomposition is defined for d=5")
    odd, even = _psi_indices(5)
    coupled = {frozenset(p) for p in _BLOCK_PAIRS[5]}
    out = {}
    for i in odd:
        for j in even:
            is_coupled = frozenset((i, j)) in coupled
            base = dict(
                dimension=2,
                sigmas=(config.sigmas[i], config.sigmas[j]),
                rho=config.rho if is_coupled else 0.0,
                mode_set="uncertain" if is_coupled else "singleton",
                k1=config.k1, k2=config.k2, horizon=config.horizon, h=config.h,
                n_inner=config.n_inner, n_states=10,
                n_increments=config.n_increments, seed=config.seed,
                payoff_eps=config.payoff_eps, payoff_radius=config.payoff_radius,
                initial_center=config.initial_center,
                initial_half_width_factor=config.initial_half_width_factor,
                slice_fixed=config.slice_fixed, slice_span=config.slice_span,
                slice_points=config.slice_points,
            )
            base.update(solver_overrides)
            out[(i, j)] = ExperimentConfig(**base)
    return out


def lower_bound_dim5(vf2_by_pair, t, x):
    """max over pairs (i, j) of the d=2 value at (x_i, x_j).

    `vf2_by_pair` maps 0-based (odd, even) index pairs to solved d=2 value
    functions.  Returns (bound, argmax_pair).
    """
    x = np.asarray(x, dtype=float)
    if not vf2_by_pair:
        raise ConfigurationError("no pair solutions supplied")
    best, best_pair = -np.inf, None
    for (i, j), vf2 in vf2_by_pair.items():
        val, _ = sup_eval(vf2.forms_per_step[vf2.step_index(t)],
                          np.array([x[i], x[j]]))
        if val > best:
            best, best_pair = val, (i, j)
    return best, best_pair
