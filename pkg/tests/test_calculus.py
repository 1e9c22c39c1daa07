import math

import numpy as np
import pytest

from moelab import backend
from moelab.calculus import (
    IdentifiabilityReport,
    finite_diff_gradient,
    flatten_measure,
    grad_mse,
    homogeneity_residual,
    identifiability_check,
    mse_objective,
    pde_residual,
    score_gradient,
    score_hessian,
    unflatten_measure,
)
from moelab.errors import ConfigError, ContractError, EvaluationError
from moelab.experiments import generate_dataset
from moelab.model import (
    Dataset,
    constant_experts,
    cosine_router,
    ffn_experts,
    linear_experts,
    linear_router,
    measure_from_packed,
    perturbed_router,
    polynomial_experts,
)
from moelab.rng import Stream


def random_measure(stream, k, d1):
    return measure_from_packed(
        stream.normal(k, std=0.4),
        stream.normal(k * d1, std=0.8).reshape(k, d1),
        stream.normal(k * d1, std=0.8).reshape(k, d1),
        stream.normal(k),
    )


class TestFiniteDiff:
    def test_quadratic(self):
        grad = finite_diff_gradient(lambda t: float(t @ t), np.array([1.0, 2.0]))
        np.testing.assert_allclose(grad, [2.0, 4.0], atol=1e-8)

    def test_constant(self):
        grad = finite_diff_gradient(lambda t: 3.5, np.array([0.3, -0.7, 2.0]))
        np.testing.assert_array_equal(grad, 0.0)

    def test_nonfinite_objective(self):
        with pytest.raises(EvaluationError):
            finite_diff_gradient(lambda t: math.inf, np.array([1.0]))


class TestGradMse:
    def test_zero_residuals_give_exactly_zero_gradient(self):
        stream = Stream(7)
        G = random_measure(stream, 3, 4)
        spec = perturbed_router(0.1)
        fam = ffn_experts("relu")
        data = generate_dataset(spec, fam, G, 256, sigma2=0.0, seed=3)
        mse, rec = grad_mse(spec, fam, G, data)
        assert mse == 0.0
        assert np.all(rec.d_beta0 == 0.0)
        assert np.all(rec.d_beta1 == 0.0)
        assert np.all(rec.d_eta == 0.0)

    def test_beta0_gradient_sums_to_zero(self):
        stream = Stream(8)
        for spec in (linear_router(), cosine_router(), perturbed_router(0.2)):
            G = random_measure(stream, 4, 3)
            X = stream.uniform(-1, 1, 20 * 3).reshape(20, 3)
            Y = stream.normal(20)
            _, rec = grad_mse(spec, ffn_experts("tanh"), G, Dataset(X, Y))
            assert abs(rec.d_beta0.sum()) <= 1e-12

    def test_matches_finite_differences_on_ffn_relu_fixture(self):
        stream = Stream(9)
        k, d1 = 3, 4
        G = random_measure(stream, k, d1)
        spec = perturbed_router(0.1)
        fam = ffn_experts("relu")
        X = stream.uniform(-1, 1, 16 * d1).reshape(16, d1)
        Y = stream.normal(16)
        # keep clear of the relu kink where the subgradient convention bites
        _, B1, A, b = G.packed()
        assert np.all(np.abs(X @ A.T + b) > 1e-6)
        data = Dataset(X, Y)
        _, rec = grad_mse(spec, fam, G, data)
        fd = finite_diff_gradient(mse_objective(spec, fam, data, k, d1), flatten_measure(G))
        an = rec.flatten()
        err = np.abs(an - fd)
        rel = err / np.maximum(np.abs(fd), 1e-8)
        assert np.all((rel <= 1e-6) | (err <= 1e-8))

    def test_empty_batch_rejected(self):
        stream = Stream(10)
        G = random_measure(stream, 2, 2)
        with pytest.raises(ContractError):
            grad_mse(cosine_router(), linear_experts(), G, Dataset(np.empty((0, 2)), np.empty(0)))

    def test_flatten_roundtrip(self):
        stream = Stream(11)
        G = random_measure(stream, 3, 5)
        G2 = unflatten_measure(flatten_measure(G), 3, 5)
        for a, b in zip(G.atoms, G2.atoms):
            assert a.beta0 == b.beta0
            np.testing.assert_array_equal(a.beta1, b.beta1)
            np.testing.assert_array_equal(a.eta, b.eta)


class TestScoreDerivatives:
    def test_score_gradient_matches_fd(self):
        stream = Stream(12)
        for spec in (linear_router(), cosine_router(), perturbed_router(0.15)):
            for _ in range(20):
                b = stream.normal(4)
                x = stream.uniform(-1, 1, 4)
                from moelab.model import router_score

                fd = finite_diff_gradient(lambda t: router_score(spec, t, x), b, h_rel=1e-6)
                np.testing.assert_allclose(score_gradient(spec, b, x), fd, atol=1e-7)

    def test_score_hessian_matches_fd(self):
        stream = Stream(13)
        spec = perturbed_router(0.1)
        for _ in range(10):
            b = stream.normal(3)
            x = stream.uniform(-1, 1, 3)
            H = score_hessian(spec, b, x)
            for u in range(3):
                fd_row = finite_diff_gradient(
                    lambda t: score_gradient(spec, t, x)[u], b, h_rel=1e-5
                )
                np.testing.assert_allclose(H[u], fd_row, atol=1e-6)
        with pytest.raises(ContractError):
            score_hessian(cosine_router(), np.ones(2), np.ones(2))


class TestScaleIdentities:
    def test_cosine_contraction_vanishes(self):
        stream = Stream(14)
        fam = ffn_experts("tanh")
        for _ in range(200):
            d1 = 2 + int(stream.uniform01(1)[0] * 10)
            b = stream.normal(d1)
            eta = stream.normal(d1 + 1)
            x = stream.uniform(-1, 1, d1)
            H = math.exp(float(b @ x) / (np.linalg.norm(b) * np.linalg.norm(x)))
            assert abs(pde_residual(cosine_router(), b, eta, fam, x)) <= 1e-10 * abs(H)

    def test_perturbed_contraction_value(self):
        # oracle A: closed form tau1*(b.x)/((|b|+tau1)^2 (|x|+tau2)) * H
        # oracle B: finite difference of c -> exp(score(c*b, x)) at c = 1
        b = np.array([1.0, 0.0])
        x = np.array([1.0, 0.0])
        eta = np.array([0.0, 0.0, 1.0])
        spec = perturbed_router(0.1)
        got = pde_residual(spec, b, eta, constant_experts(), x)
        closed = math.exp(1.0 / 1.21) * 0.1 / 1.331
        assert got == pytest.approx(closed, rel=1e-12)

        from moelab.model import router_score

        h = 1e-6
        fd = (
            math.exp(router_score(spec, (1 + h) * b, x))
            - math.exp(router_score(spec, (1 - h) * b, x))
        ) / (2 * h)
        assert got == pytest.approx(fd, rel=1e-8)

    def test_linear_contraction_value(self):
        b = np.array([1.0, 0.0])
        x = np.array([1.0, 0.0])
        got = pde_residual(linear_router(), b, np.array([0.0, 0.0, 1.0]), constant_experts(), x)
        assert got == pytest.approx(math.e, rel=1e-12)

    def test_degenerate_inputs_rejected(self):
        with pytest.raises(ContractError):
            pde_residual(cosine_router(), np.zeros(2), np.ones(3), linear_experts(), np.ones(2))
        with pytest.raises(ContractError):
            homogeneity_residual(cosine_router(), np.ones(2), np.zeros(2), 1)
        with pytest.raises(ContractError):
            homogeneity_residual(cosine_router(), np.ones(2), np.ones(2), 3)


class TestHomogeneity:
    def test_cosine_orders_vanish(self):
        stream = Stream(15)
        for _ in range(200):
            d1 = 2 + int(stream.uniform01(1)[0] * 10)
            b = stream.normal(d1)
            x = stream.uniform(-1, 1, d1)
            assert abs(homogeneity_residual(cosine_router(), b, x, 1)) <= 1e-10
            assert abs(homogeneity_residual(cosine_router(), b, x, 2)) <= 1e-4

    def test_perturbed_first_order_nonzero(self):
        b = np.array([1.0, 0.0])
        x = np.array([1.0, 0.0])
        got = homogeneity_residual(perturbed_router(0.1), b, x, 1)
        assert got == pytest.approx(math.exp(1.0 / 1.21) * 0.1 / 1.331, rel=1e-12)


class TestIdentifiability:
    SPEC = perturbed_router(0.1)

    def test_requires_perturbed_router(self):
        with pytest.raises(ContractError):
            identifiability_check(cosine_router(), linear_experts(), 2, 1, 0)

    def test_strongly_identifiable_families(self):
        for fam in (ffn_experts("relu"), ffn_experts("tanh"), polynomial_experts(2)):
            rep = identifiability_check(self.SPEC, fam, k=3, order=2, seed=0)
            assert not rep.deficient, fam.name

    def test_linear_fails_order_two_but_passes_order_one(self):
        assert identifiability_check(self.SPEC, linear_experts(), 3, 2, 0).deficient
        assert not identifiability_check(self.SPEC, linear_experts(), 3, 1, 0).deficient

    def test_constant_fails_order_one(self):
        assert identifiability_check(self.SPEC, constant_experts(), 3, 1, 0).deficient

    def test_deterministic_given_seed(self):
        a = identifiability_check(self.SPEC, ffn_experts("tanh"), 2, 2, 123)
        b = identifiability_check(self.SPEC, ffn_experts("tanh"), 2, 2, 123)
        assert a == b

    def test_report_consistency(self):
        rep = identifiability_check(self.SPEC, ffn_experts("sigmoid"), 2, 1, 5)
        assert isinstance(rep, IdentifiabilityReport)
        assert rep.matrix_rows == 512
        assert rep.matrix_cols == 2 * (1 + 2 + 1)
        assert rep.deficient == (rep.min_singular_value < 1e-8 * rep.max_singular_value)

    def test_too_many_columns_rejected(self):
        with pytest.raises(ConfigError):
            identifiability_check(self.SPEC, ffn_experts("tanh"), k=90, order=2, seed=0, d1=4)
