import numpy as np
import pytest

from maxplus_hjb import monotone_poly as mp
from maxplus_hjb import scheme_ops as so
from maxplus_hjb.benchmarks import (build_correlation_modes,
                                    make_uncertain_correlation_problem)
from maxplus_hjb.errors import NumericalError
from maxplus_hjb.factorization import GeneratorChoice
from maxplus_hjb.hjb_problem import ModeCoefficients, ProblemSpec
from maxplus_hjb.simulation import brownian_increments


def heat_problem(d=1, a11=2.5):
    """Single mode, sigma = sqrt(a11) I, reference generator identity."""
    root = np.sqrt(a11)
    spec = ProblemSpec(
        dimension=d, horizon=1.0,
        modes=(ModeCoefficients(sigma=lambda x, u=None: root * np.eye(d)),),
        psi=lambda x: 0.0)
    gen = GeneratorChoice(retained=(0,), projection={0: 0},
                          sigbar=lambda m, x: np.eye(d))
    return spec, gen


class TestEstimateDerivatives:
    def test_constant_function(self):
        h = 0.01
        inc = brownian_increments(1, 0, 4000, 2, h)
        polys = {0: mp.build(np.array([[1.0], [0.5]]), 1)}
        est = so.estimate_derivatives(lambda w: np.full(w.shape[0], 3.0),
                                      inc, np.eye(2), h, polys)
        assert est.d0 == pytest.approx(3.0)
        np.testing.assert_allclose(est.d1, 3.0 * inc.mean(axis=0) / h)
        pw = mp.eval_P(polys[0], inc / np.sqrt(h))
        assert est.d2_by_mode[0] == pytest.approx(3.0 * pw.mean() / h)

    def test_single_zero_increment(self):
        h = 0.04
        polys = {0: mp.build(np.array([[2.0], [2.0]]), 2)}
        est = so.estimate_derivatives(lambda w: np.full(w.shape[0], 7.0),
                                      np.zeros((1, 2)), np.eye(2), h, polys)
        assert est.d0 == 7.0
        np.testing.assert_array_equal(est.d1, np.zeros(2))
        assert est.d2_by_mode[0] == pytest.approx(-polys[0].K * 7.0 / h)

    def test_quadratic_with_quadrature_hits_trace(self):
        h = 0.01
        d = 2
        sigbar = np.array([[1.0, 0.2], [0.0, 0.8]])
        S = np.array([[1.5, 0.0], [0.5, 0.7]])
        G = np.array([[0.9, 0.3], [0.3, 1.4]])
        inc, wts = so.gauss_hermite_increments(d, h, 12)
        x = np.array([0.3, -0.2])

        def phi_tilde(w):
            y = x[None, :] + w @ sigbar.T
            return 0.5 * np.einsum("nd,de,ne->n", y, G, y)

        for k in (0, 1, 2):
            polys = {0: mp.build(S, k)}
            est = so.estimate_derivatives(phi_tilde, inc, sigbar, h, polys,
                                          weights=wts)
            target = 0.5 * np.trace(sigbar @ S @ S.T @ sigbar.T @ G)
            assert est.d2_by_mode[0] == pytest.approx(target, abs=1e-9)
            assert est.se_d0 == 0.0


class TestLQMaximize:
    def test_stationarity(self):
        p = np.array([0.7, -1.2])
        u, val = so.lq_maximize(-np.eye(2), p)
        np.testing.assert_allclose(u, p)
        assert val == pytest.approx(0.5 * p @ p)

    def test_decoupled_vertex(self):
        H = -np.diag([2.0, 4.0])
        u0 = np.array([1.0, -3.0])
        g = -H @ u0
        u, _ = so.lq_maximize(H, g)
        np.testing.assert_allclose(u, u0)

    def test_indefinite_rejected(self):
        with pytest.raises(NumericalError):
            so.lq_maximize(np.eye(1), np.zeros(1))


class TestApplyG:
    def test_pure_heat_step_returns_d0(self):
        spec, gen = heat_problem(d=2, a11=1.0)  # sigma = sigbar: residual zero
        est = so.DerivativeEstimates(d0=4.2, d1=np.zeros(2),
                                     d2_by_mode={0: 0.0}, n_samples=10)
        assert so.apply_G(0, np.zeros(2), est, 0.01, spec, gen) == pytest.approx(4.2)

    def test_h_zero_returns_d0(self):
        spec, gen = heat_problem(d=2, a11=2.0)
        est = so.DerivativeEstimates(d0=1.5, d1=np.ones(2),
                                     d2_by_mode={0: 3.0}, n_samples=10)
        assert so.apply_G(0, np.zeros(2), est, 0.0, spec, gen) == pytest.approx(1.5)


class TestApplyT:
    def test_identical_modes_match_singleton(self):
        d = 2
        root = np.sqrt(1.7)
        base = ModeCoefficients(sigma=lambda x, u=None: root * np.eye(d))
        gen = GeneratorChoice(retained=(0,), projection={0: 0, 1: 0},
                              sigbar=lambda m, x: np.eye(d))
        gen1 = GeneratorChoice(retained=(0,), projection={0: 0},
                               sigbar=lambda m, x: np.eye(d))
        spec2 = ProblemSpec(dimension=d, horizon=1.0, modes=(base, base),
                            psi=lambda x: 0.0)
        spec1 = ProblemSpec(dimension=d, horizon=1.0, modes=(base,),
                            psi=lambda x: 0.0)
        inc = brownian_increments(3, 0, 500, d, 0.01)
        phi = lambda y: np.sin(y[:, 0]) + y[:, 1] ** 2
        x = np.array([0.2, -0.4])
        v2 = so.apply_T(0.0, 0.01, phi, x, spec2, gen, inc, k=0)
        v1 = so.apply_T(0.0, 0.01, phi, x, spec1, gen1, inc, k=0)
        assert v2 == pytest.approx(v1, rel=1e-12)

    def test_affine_function_second_order_free(self):
        # P has zero quadrature mean, so affine phi reproduces E[phi] + h G1
        spec, gen = heat_problem(d=2, a11=2.0)
        h = 0.01
        inc, wts = so.gauss_hermite_increments(2, h, 10)
        phi = lambda y: 3.0 * y[:, 0] - y[:, 1] + 2.0
        x = np.array([0.5, 0.5])
        val = so.apply_T(0.0, h, phi, x, spec, gen, inc, k=0, weights=wts)
        assert val == pytest.approx(float(wts @ phi(x[None, :] + inc)), abs=1e-12)

    def test_linear_hamiltonian_matches_ftw_form(self):
        # singleton mode, H = 1/2 tr(A Gamma): the k=0 operator equals
        # E[phi(x + sqrt(h) N)(1 + 1/2 tr((A - I)(NN' - I)))]
        a11 = 2.2
        spec, gen = heat_problem(d=2, a11=a11)
        h = 0.01
        inc = brownian_increments(5, 0, 2000, 2, h)
        phi = lambda y: np.cos(y[:, 0]) * (1.0 + y[:, 1] ** 2)
        x = np.array([0.3, 0.9])
        val = so.apply_T(0.0, h, phi, x, spec, gen, inc, k=0)
        w = inc / np.sqrt(h)
        A = a11 * np.eye(2)
        weights = 1.0 + 0.5 * (np.einsum("nd,de,ne->n", w, A - np.eye(2), w)
                               - np.trace(A - np.eye(2)))
        expect = float(np.mean(phi(x[None, :] + inc) * weights))
        assert val == pytest.approx(expect, rel=1e-12)

    def test_subhomogeneity_quadrature(self):
        spec, gen = make_uncertain_correlation_problem(
            [0.4, 0.3], build_correlation_modes(2, 0.8), -5, 5, 0.25)
        h = 0.01
        inc, wts = so.gauss_hermite_increments(2, h, 12)
        phi = lambda y: np.minimum(np.maximum(y[:, 0] - y[:, 1] + 5, 0.0), 10.0)
        x = np.array([52.0, 49.0])
        base = so.apply_T(0.0, h, phi, x, spec, gen, inc, weights=wts)
        for lam in (0.1, 1.0, 10.0):
            shifted = so.apply_T(0.0, h, lambda y: phi(y) + lam, x, spec, gen,
                                 inc, weights=wts)
            assert shifted <= base + lam + 1e-9  # delta = 0 so alpha_h = 1

    def test_monotonicity_sampled(self):
        spec, gen = make_uncertain_correlation_problem(
            [0.4, 0.3], build_correlation_modes(2, 0.8), -5, 5, 0.25)
        h = 0.01
        inc = brownian_increments(9, 0, 1500, 2, h)
        rng = np.random.default_rng(2)
        bumps = rng.uniform(0.0, 1.0, 1500)
        phi = lambda y: np.minimum(np.maximum(y[:, 0] - y[:, 1] + 5, 0.0), 10.0)
        x = np.array([50.0, 50.0])
        lo = so.apply_T(0.0, h, phi, x, spec, gen, inc)

        calls = {"n": 0}
        def phi_hi(y):
            # same phi plus nonnegative noise aligned with the sample order
            base = phi(y)
            return base + bumps[:y.shape[0]]
        hi = so.apply_T(0.0, h, phi_hi, x, spec, gen, inc)
        assert hi >= lo - 1e-12


class TestDiscreteIncrement1d:
    def test_k0_consistency_and_cfl(self):
        st = so.discrete_increment_operator_1d(2.5, 0, np.sqrt(3.0))
        assert st["b"] == pytest.approx(2.5)
        assert st["consistent"]
        assert st["monotone"]
        st = so.discrete_increment_operator_1d(3.01, 0, np.sqrt(3.0))
        assert not st["monotone"]  # CFL A11 <= 3 violated
        st = so.discrete_increment_operator_1d(3.0, 0, np.sqrt(3.0))
        assert st["monotone"]  # boundary

    def test_k2_strict_margin(self):
        st = so.discrete_increment_operator_1d(10.99, 2, np.sqrt(11.0))
        assert st["b"] == pytest.approx(10.99)
        assert st["consistent"]
        assert st["monotone"]
        st = so.discrete_increment_operator_1d(11.01, 2, np.sqrt(11.0))
        assert not st["monotone"]

    def test_unit_diffusion_heat_weights(self):
        nu = 2.0
        st = so.discrete_increment_operator_1d(1.0, 0, nu)
        assert st["b"] == pytest.approx(1.0)
        assert st["w_center"] == pytest.approx(1.0 - 1.0 / nu ** 2)
        assert st["w_plus"] == pytest.approx(1.0 / (2.0 * nu ** 2))

    def test_b_formula_general(self):
        for k in (0, 1, 2, 3):
            for nu in (1.5, 2.0, np.sqrt(4 * k + 3)):
                for a11 in (1.0, 2.0, 7.5):
                    st = so.discrete_increment_operator_1d(a11, k, nu)
                    expect = 1.0 + (a11 - 1.0) * (nu * nu - 1.0) / (4 * k + 2)
                    assert st["b"] == pytest.approx(expect, rel=1e-15)

    def test_operator_equivalence_three_point_law_k0(self):
        # at k = 0 the second and fourth discrete moments match the normal
        # ones, so apply_T under the +-nu/0 law equals the printed stencil
        for nu, a11 in ((np.sqrt(3.0), 2.5), (2.0, 2.0), (1.5, 1.3)):
            spec, gen = heat_problem(d=1, a11=a11)
            h = 0.01
            W = np.array([[nu * np.sqrt(h)], [0.0], [-nu * np.sqrt(h)]])
            wts = np.array([1.0 / (2 * nu * nu), 1.0 - 1.0 / (nu * nu),
                            1.0 / (2 * nu * nu)])
            phi = lambda y: np.exp(0.3 * y[:, 0]) + y[:, 0] ** 2
            x = np.array([0.7])
            val = so.apply_T(0.0, h, phi, x, spec, gen, W, k=0, weights=wts)
            st = so.discrete_increment_operator_1d(a11, 0, nu)
            pts = np.array([[0.7 + np.sqrt(h) * nu], [0.7], [0.7 - np.sqrt(h) * nu]])
            expect = (st["w_plus"] * phi(pts[:1]) + st["w_center"] * phi(pts[1:2])
                      + st["w_minus"] * phi(pts[2:]))[0]
            assert val == pytest.approx(expect, rel=1e-12)

    def test_renormalized_weights_match_stencil_higher_k(self):
        # for k >= 1 the substituted increment law renormalizes the weight
        # polynomial by its own moment: P(w) = (S^2/(4k+2))(w^(4k+2)/E[w^(4k+2)] - 1)
        for k, a11 in ((1, 4.0), (2, 9.0)):
            for nu in (np.sqrt(4 * k + 3), 2.5):
                S2 = a11 - 1.0
                moment = nu ** (4 * k)  # E[w^(4k+2)] under the +-nu/0 law
                st = so.discrete_increment_operator_1d(a11, k, nu)

                def P(w):
                    return (S2 / (4 * k + 2)) * (w ** (4 * k + 2) / moment - 1.0)

                w_side = (1.0 / (2 * nu * nu)) * (1.0 + P(nu))
                w_center = (1.0 - 1.0 / (nu * nu)) * (1.0 + P(0.0))
                assert w_side == pytest.approx(st["w_plus"], rel=1e-12)
                assert w_center == pytest.approx(st["w_center"], rel=1e-12)


class TestDiscreteIncrement2d:
    def test_identity_matrix(self):
        wc, wa, wcor = so.discrete_increment_weights_2d(np.eye(2))
        assert wc == pytest.approx(4.0 / 9.0)
        np.testing.assert_allclose(wa, 1.0 / 9.0)
        for v in wcor.values():
            assert v == pytest.approx(1.0 / 36.0)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            B = rng.standard_normal((2, 2))
            A = np.eye(2) + 0.5 * (B @ B.T)
            wc, wa, wcor = so.discrete_increment_weights_2d(A)
            total = wc + 2.0 * wa.sum() + sum(wcor.values())
            assert total == pytest.approx(1.0, abs=1e-12)

    def test_center_vanishes_at_critical_trace(self):
        A = np.array([[2.0, 0.3], [0.3, 2.0]])  # tr(A - I) = 2
        wc, _, _ = so.discrete_increment_weights_2d(A)
        assert wc == pytest.approx(0.0, abs=1e-15)

    def test_diagonal_symmetry(self):
        A = np.diag([1.6, 1.6])
        wc, wa, wcor = so.discrete_increment_weights_2d(A)
        assert wa[0] == pytest.approx(wa[1])
        vals = list(wcor.values())
        assert max(vals) == pytest.approx(min(vals))

    def test_matches_expectation_form(self):
        # weights reproduce E[phi(x + sqrt(3h) eps)(1 + P...)] under the
        # discrete product law with values {-sqrt(3), 0, sqrt(3)} per axis
        rng = np.random.default_rng(13)
        B = rng.standard_normal((2, 2))
        A = np.eye(2) + 0.3 * (B @ B.T)
        wc, wa, wcor = so.discrete_increment_weights_2d(A)
        nodes1d = np.array([np.sqrt(3.0), 0.0, -np.sqrt(3.0)])
        p1d = np.array([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0])
        total_w = {}
        for i, ni in enumerate(nodes1d):
            for j, nj in enumerate(nodes1d):
                n = np.array([ni, nj])
                weight = p1d[i] * p1d[j] * (
                    1.0 + 0.5 * (n @ (A - np.eye(2)) @ n
                                 - np.trace(A - np.eye(2))))
                total_w[(np.sign(ni), np.sign(nj))] = \
                    total_w.get((np.sign(ni), np.sign(nj)), 0.0) + weight
        assert total_w[(0.0, 0.0)] == pytest.approx(wc)
        assert total_w[(1.0, 0.0)] == pytest.approx(wa[0])
        assert total_w[(0.0, 1.0)] == pytest.approx(wa[1])
        for e1 in (1.0, -1.0):
            for e2 in (1.0, -1.0):
                assert total_w[(e1, e2)] == pytest.approx(wcor[(int(e1), int(e2))])


class TestConsistencyOrder:
    def test_one_step_residual_order(self):
        # smooth quadratic-in-space data with curved time dependence; the
        # one-step residual against d_t v + H must shrink linearly in h
        spec, gen = make_uncertain_correlation_problem(
            [0.4, 0.3], build_correlation_modes(2, 0.8), -5, 5, 0.25)
        Gamma0 = np.array([[0.8, 0.25], [0.25, 1.1]]) * 1e-3
        beta0 = np.array([0.01, -0.02])
        c0 = 0.5

        def v(t, y):
            y = np.atleast_2d(y)
            quad = 0.5 * np.einsum("nd,de,ne->n", y, Gamma0, y) + y @ beta0 + c0
            return np.exp(t) * quad

        def hamiltonian(t, y):
            best = -np.inf
            for m in range(spec.n_modes):
                sig = spec.vol(m, y)
                best = max(best, 0.5 * np.trace(sig @ sig.T @ Gamma0) * np.exp(t))
            return best

        x = np.array([52.0, 47.0])
        t = 0.1
        v_tx = float(v(t, x)[0])
        dt_v = v_tx  # d/dt of exp(t) * quad is itself
        resid = []
        hs = [1e-2, 5e-3, 2.5e-3]
        for h in hs:
            inc, wts = so.gauss_hermite_increments(2, h, 20)
            Tv = so.apply_T(t, h, lambda y: v(t + h, y), x, spec, gen, inc,
                            weights=wts)
            r = (Tv - v_tx) / h - (dt_v + hamiltonian(t, x))
            resid.append(abs(r))
        orders = [np.log2(resid[i] / resid[i + 1]) for i in range(len(hs) - 1)]
        assert min(orders) >= 0.9
