import math

import numpy as np
import pytest

from moelab.errors import ContractError
from moelab.metrics import (
    LossKind,
    adversarial_sequence,
    l2mu_distance,
    ratio_diagnostic,
    voronoi_assign,
    voronoi_loss,
)
from moelab.model import (
    Atom,
    MixingMeasure,
    cosine_router,
    ffn_experts,
    linear_experts,
    measure_from_packed,
    perturbed_router,
)
from moelab.rng import Stream


def random_measure(stream, k, d1):
    return measure_from_packed(
        stream.normal(k, std=0.4),
        stream.normal(k * d1).reshape(k, d1),
        stream.normal(k * d1).reshape(k, d1),
        stream.normal(k),
    )


class TestVoronoiAssign:
    def test_identity_assignment(self):
        G = random_measure(Stream(1), 4, 3)
        a = voronoi_assign(G, G)
        assert a.cells == ((0,), (1,), (2,), (3,))
        np.testing.assert_array_equal(a.distances, 0.0)

    def test_single_atom_nearest_cell(self):
        G_star = random_measure(Stream(2), 3, 2)
        target = G_star.atoms[1]
        fitted = MixingMeasure((Atom(0.0, target.beta1 + 0.01, target.eta),))
        a = voronoi_assign(fitted, G_star)
        assert a.cells == ((), (0,), ())

    def test_tie_breaks_to_smallest_index(self):
        # generating atoms symmetric about the fitted atom
        G_star = measure_from_packed(
            [0.0, 0.0], [[1.0, 0.0], [-1.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]], [0.0, 0.0]
        )
        fitted = measure_from_packed([0.0], [[0.0, 0.0]], [[0.0, 0.0]], [0.0])
        a = voronoi_assign(fitted, G_star)
        assert a.cells == ((0,), ())


class TestVoronoiLoss:
    def test_zero_iff_equal_up_to_permutation(self):
        stream = Stream(3)
        G = random_measure(stream, 4, 3)
        perm = (2, 0, 3, 1)
        Gp = MixingMeasure(tuple(G.atoms[i] for i in perm))
        for kind in (LossKind("L1", 1.0), LossKind("L1", 2.0), LossKind("L2"), LossKind("L3")):
            assert voronoi_loss(G, G, kind) == 0.0
            assert voronoi_loss(Gp, G, kind) == 0.0
            beta0, B1, A, b = G.packed()
            Gq = measure_from_packed(beta0, B1 + 0.01, A, b)
            assert voronoi_loss(Gq, G, kind) > 0.0

    def test_l1r_closed_form_single_perturbation(self):
        stream = Stream(4)
        G = random_measure(stream, 3, 2)
        beta0, B1, A, b = G.packed()
        B1p = B1.copy()
        B1p[1] += np.array([0.003, -0.004])  # displacement norm 0.005
        Gp = measure_from_packed(beta0, B1p, A, b)
        for r in (1.0, 1.5, 2.0):
            expected = math.exp(beta0[1]) * 0.005**r
            assert voronoi_loss(Gp, G, LossKind("L1", r)) == pytest.approx(expected, rel=1e-12)

    def test_l3_single_eta_shift(self):
        stream = Stream(5)
        G = random_measure(stream, 3, 2)
        beta0, B1, A, b = G.packed()
        bp = b.copy()
        bp[2] += 1e-3
        Gp = measure_from_packed(beta0, B1, A, bp)
        expected = math.exp(beta0[2]) * 1e-3
        assert voronoi_loss(Gp, G, LossKind("L3")) == pytest.approx(expected, rel=1e-10)

    def test_l2_equals_l3_on_singleton_cells(self):
        stream = Stream(6)
        G = random_measure(stream, 4, 3)
        beta0, B1, A, b = G.packed()
        Gp = measure_from_packed(beta0 + 0.01, B1 + 0.005, A - 0.003, b)
        # all cells singletons here
        assert voronoi_loss(Gp, G, LossKind("L2")) == voronoi_loss(Gp, G, LossKind("L3"))

    def test_l2_uses_squares_on_crowded_cells(self):
        G_star = measure_from_packed([0.0, 0.5], [[1.0, 0.0], [0.0, 4.0]], [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
        eps = 1e-2
        fitted = measure_from_packed(
            [0.0 - math.log(2.0)] * 2 + [0.5],
            [[1.0 + eps, 0.0], [1.0 - eps, 0.0], [0.0, 4.0]],
            [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            [0.0, 0.0, 0.0],
        )
        # crowded cell 0: squared displacements, each atom carries exp(beta0)=1/2
        expected = 2 * 0.5 * eps**2
        assert voronoi_loss(fitted, G_star, LossKind("L2")) == pytest.approx(expected, rel=1e-9)
        expected_l3 = 2 * 0.5 * eps
        assert voronoi_loss(fitted, G_star, LossKind("L3")) == pytest.approx(expected_l3, rel=1e-9)

    def test_coordinate_permutation_invariance(self):
        stream = Stream(7)
        G = random_measure(stream, 3, 4)
        H = random_measure(stream, 3, 4)
        perm = [2, 0, 3, 1]

        def permute(M):
            beta0, B1, A, b = M.packed()
            return measure_from_packed(beta0, B1[:, perm], A[:, perm], b)

        for kind in (LossKind("L1", 1.0), LossKind("L2"), LossKind("L3")):
            assert voronoi_loss(H, G, kind) == pytest.approx(
                voronoi_loss(permute(H), permute(G), kind), rel=1e-12
            )

    def test_loss_kind_validation(self):
        with pytest.raises(ContractError):
            LossKind("L1", 0.5)
        with pytest.raises(ContractError):
            LossKind("L4")


class TestL2MuDistance:
    def test_identical_measures(self):
        G = random_measure(Stream(8), 3, 2)
        assert l2mu_distance(cosine_router(), linear_experts(), G, G, 500, seed=1) == 0.0

    def test_constant_experts_exact_gap(self):
        c1, c2 = 0.75, -0.5
        Ga = measure_from_packed([0.0], [[1.0, 0.0]], [[0.0, 0.0]], [c1])
        Gb = measure_from_packed([0.0], [[1.0, 0.0]], [[0.0, 0.0]], [c2])
        d = l2mu_distance(cosine_router(), linear_experts(), Ga, Gb, 2000, seed=2)
        assert d == pytest.approx(abs(c1 - c2), rel=1e-12)

    def test_matches_quadrature_in_one_dimension(self):
        # oracle: trapezoid quadrature of (f_a - f_b)^2 over [-1, 1] / 2
        stream = Stream(9)
        Ga = random_measure(stream, 2, 1)
        Gb = random_measure(stream, 2, 1)
        spec = perturbed_router(0.1)
        fam = ffn_experts("tanh")
        from moelab.model import predict

        grid = np.linspace(-1.0, 1.0, 100_001)
        vals = np.array([(predict(spec, fam, Ga, np.array([t])) - predict(spec, fam, Gb, np.array([t]))) ** 2 for t in grid])
        quad = math.sqrt(np.trapezoid(vals, grid) / 2.0)

        n_mc = 20_000
        mc = l2mu_distance(spec, fam, Ga, Gb, n_mc, seed=3)
        # crude bound on the MC standard error of the mean of squares
        se = np.std(vals) / math.sqrt(n_mc)
        assert abs(mc**2 - quad**2) <= 3.0 * se

    def test_triangle_inequality_on_shared_samples(self):
        stream = Stream(10)
        Ga = random_measure(stream, 2, 3)
        Gb = random_measure(stream, 2, 3)
        Gc = random_measure(stream, 2, 3)
        spec = cosine_router()
        fam = linear_experts()
        dab = l2mu_distance(spec, fam, Ga, Gb, 4000, seed=77)
        dbc = l2mu_distance(spec, fam, Gb, Gc, 4000, seed=77)
        dac = l2mu_distance(spec, fam, Ga, Gc, 4000, seed=77)
        assert dac <= dab + dbc + 1e-12


class TestAdversarialSequence:
    def test_exact_construction(self):
        G = random_measure(Stream(11), 3, 2)
        Gn = adversarial_sequence(G, 50, "exact")
        assert Gn.k == 3
        np.testing.assert_allclose(Gn.atoms[0].beta1, 1.02 * G.atoms[0].beta1)
        for i in (1, 2):
            np.testing.assert_array_equal(Gn.atoms[i].beta1, G.atoms[i].beta1)
        kind = LossKind("L1", 2.0)
        expected = math.exp(G.atoms[0].beta0) * (np.linalg.norm(G.atoms[0].beta1) / 50) ** 2
        assert voronoi_loss(Gn, G, kind) == pytest.approx(expected, rel=1e-12)

    def test_over_construction_splits_weight(self):
        G = random_measure(Stream(12), 3, 2)
        Gn = adversarial_sequence(G, 10, "over")
        assert Gn.k == 4
        w = math.exp(Gn.atoms[0].beta0) + math.exp(Gn.atoms[1].beta0)
        assert w == pytest.approx(math.exp(G.atoms[0].beta0), rel=1e-14)
        np.testing.assert_array_equal(Gn.atoms[0].eta, G.atoms[0].eta)
        np.testing.assert_array_equal(Gn.atoms[1].eta, G.atoms[0].eta)

    def test_parameters_approach_generator(self):
        G = random_measure(Stream(13), 2, 2)
        Gn = adversarial_sequence(G, 10**9, "exact")
        np.testing.assert_allclose(Gn.atoms[0].beta1, G.atoms[0].beta1, rtol=1e-8)

    def test_zero_router_vector_rejected(self):
        G = measure_from_packed([0.0], [[0.0, 0.0]], [[1.0, 0.0]], [0.0])
        with pytest.raises(ContractError):
            adversarial_sequence(G, 10, "exact")


class TestRatioDiagnostic:
    def test_cosine_ratio_is_floored_to_zero_and_loss_matches_closed_form(self):
        from moelab.experiments import sample_true_measure

        G = sample_true_measure(8, 3, seed=0)
        fam = ffn_experts("relu")
        rows = ratio_diagnostic(cosine_router(), fam, G, [10, 100, 1000], r=1.0, n_mc=4000, seed=5)
        w = math.exp(G.atoms[0].beta0)
        nb = np.linalg.norm(G.atoms[0].beta1)
        for n, loss, dist, ratio in rows:
            assert loss == pytest.approx(w * nb / n, rel=1e-12)
            assert dist == 0.0
            assert ratio == 0.0

    def test_perturbed_ratio_persists(self):
        from moelab.experiments import sample_true_measure

        G = sample_true_measure(8, 3, seed=0)
        fam = ffn_experts("relu")
        rows = ratio_diagnostic(perturbed_router(0.1), fam, G, [10, 100, 1000], r=1.0, n_mc=4000, seed=5)
        ratios = [r for _, _, _, r in rows]
        assert all(r > 0 for r in ratios)
        assert ratios[-1] >= 0.1 * ratios[0]

    def test_requires_increasing_ns(self):
        G = random_measure(Stream(14), 2, 2)
        with pytest.raises(ContractError):
            ratio_diagnostic(cosine_router(), linear_experts(), G, [100, 10])
