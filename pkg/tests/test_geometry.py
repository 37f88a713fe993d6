import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from ifsem.errors import DimensionError
from ifsem.geometry import (
    Similitude,
    SphericalGaussian,
    apply,
    compose,
    invert,
    is_rotation,
    log_density,
    optimal_rotation,
    random_rotation,
    rotation_2d,
    transform_gaussian,
)
from oracles import grid_rotation_2d


def random_similitude(rng, H):
    return Similitude(rng.uniform(0.1, 3.0), random_rotation(H, rng), rng.normal(0, 2, H))


class TestApply:
    def test_identity(self):
        f = Similitude.identity(2)
        np.testing.assert_array_equal(apply(f, [3.0, 4.0]), [3.0, 4.0])

    def test_scale_and_shift(self):
        f = Similitude(2.0, np.eye(2), [1.0, 0.0])
        np.testing.assert_array_equal(apply(f, [1.0, 1.0]), [3.0, 2.0])

    def test_quarter_turn(self):
        f = Similitude(1.0, rotation_2d(math.pi / 2), [0.0, 0.0])
        np.testing.assert_allclose(apply(f, [1.0, 0.0]), [0.0, 1.0], atol=1e-15)

    def test_rows(self, rng):
        f = random_similitude(rng, 3)
        X = rng.normal(size=(5, 3))
        out = apply(f, X)
        for x, y in zip(X, out):
            np.testing.assert_allclose(y, f.s * f.R @ x + f.t, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            apply(Similitude.identity(2), [1.0, 2.0, 3.0])


class TestInvariants:
    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            Similitude(0.0, np.eye(2), np.zeros(2))

    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            Similitude(1.0, np.diag([1.0, -1.0]), np.zeros(2))

    def test_rejects_non_orthogonal(self):
        with pytest.raises(ValueError):
            Similitude(1.0, [[1.0, 0.1], [0.0, 1.0]], np.zeros(2))

    def test_rejects_bad_sigma(self):
        with pytest.raises(ValueError):
            SphericalGaussian(np.zeros(2), 0.0)


class TestCompose:
    def test_formula(self):
        outer = Similitude(0.5, np.eye(2), [0.0, 0.0])
        inner = Similitude(0.5, np.eye(2), [1.0, 0.0])
        g = compose(outer, inner)
        assert g.s == 0.25
        np.testing.assert_array_equal(g.R, np.eye(2))
        np.testing.assert_array_equal(g.t, [0.5, 0.0])

    def test_identity_law(self, rng):
        f = random_similitude(rng, 3)
        assert compose(f, Similitude.identity(3)).allclose(f, atol=1e-15)
        assert compose(Similitude.identity(3), f).allclose(f, atol=1e-15)

    def test_matches_two_step_application(self, rng):
        for _ in range(100):
            H = int(rng.integers(1, 4))
            a, b = random_similitude(rng, H), random_similitude(rng, H)
            x = rng.normal(size=H)
            np.testing.assert_allclose(apply(compose(a, b), x), apply(a, apply(b, x)),
                                       rtol=0, atol=1e-12)

    def test_associativity(self, rng):
        for _ in range(50):
            a, b, c = (random_similitude(rng, 3) for _ in range(3))
            x = rng.normal(size=3)
            np.testing.assert_allclose(apply(compose(compose(a, b), c), x),
                                       apply(a, apply(b, apply(c, x))), rtol=0, atol=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            compose(Similitude.identity(2), Similitude.identity(3))


class TestInvert:
    def test_one_dimensional(self):
        g = invert(Similitude(2.0, [[1.0]], [1.0]))
        assert g.s == 0.5
        np.testing.assert_array_equal(g.t, [-0.5])

    def test_identity(self):
        assert invert(Similitude.identity(2)).allclose(Similitude.identity(2))

    def test_round_trip(self, rng):
        for _ in range(100):
            H = int(rng.integers(1, 4))
            f = Similitude(rng.uniform(0.2, 3.0), random_rotation(H, rng), rng.normal(0, 2, H))
            x = rng.normal(size=H)
            np.testing.assert_allclose(apply(invert(f), apply(f, x)), x, rtol=0, atol=1e-12)
            assert compose(f, invert(f)).allclose(Similitude.identity(H), atol=1e-12)


class TestTransformGaussian:
    def test_forced_example(self):
        g = transform_gaussian(Similitude(2.0, np.eye(2), [1.0, 0.0]), SphericalGaussian.standard(2))
        np.testing.assert_array_equal(g.mu, [1.0, 0.0])
        assert g.sigma == 2.0

    def test_identity(self, rng):
        g = SphericalGaussian(rng.normal(size=3), 0.7)
        h = transform_gaussian(Similitude.identity(3), g)
        np.testing.assert_array_equal(h.mu, g.mu)
        assert h.sigma == g.sigma

    def test_monte_carlo(self):
        rng = np.random.default_rng(2024)
        f = Similitude(1.7, rotation_2d(0.4), [0.3, -1.2])
        g = SphericalGaussian([0.5, 0.25], 0.8)
        n = 100_000
        z = g.mu + g.sigma * rng.standard_normal((n, 2))
        y = apply(f, z)
        h = transform_gaussian(f, g)
        se_mean = h.sigma / math.sqrt(n)
        assert np.all(np.abs(y.mean(axis=0) - h.mu) < 3 * se_mean)
        # std of the pooled coordinates; standard error of a sample std is sigma / sqrt(2m)
        std = np.sqrt(np.mean((y - h.mu) ** 2))
        assert abs(std - h.sigma) < 3 * h.sigma / math.sqrt(2 * 2 * n)

    def test_homomorphism(self, rng):
        for _ in range(50):
            a, b = random_similitude(rng, 3), random_similitude(rng, 3)
            g = SphericalGaussian(rng.normal(size=3), rng.uniform(0.1, 2))
            lhs = transform_gaussian(compose(a, b), g)
            rhs = transform_gaussian(a, transform_gaussian(b, g))
            np.testing.assert_allclose(lhs.mu, rhs.mu, rtol=0, atol=1e-10)
            assert abs(lhs.sigma - rhs.sigma) < 1e-10


class TestLogDensity:
    def test_mode_2d(self):
        assert log_density(SphericalGaussian.standard(2), [0.0, 0.0]) == pytest.approx(
            -1.8378770664093453, abs=1e-15)

    def test_mode_1d(self):
        assert log_density(SphericalGaussian.standard(1), [0.0]) == pytest.approx(
            -0.9189385332046727, abs=1e-15)

    def test_matches_generic_normal(self, rng):
        for _ in range(100):
            H = int(rng.integers(1, 5))
            g = SphericalGaussian(rng.normal(size=H), rng.uniform(0.2, 3))
            x = rng.normal(size=H) * 2
            ref = multivariate_normal(g.mu, g.sigma ** 2 * np.eye(H)).logpdf(x)
            assert log_density(g, x) == pytest.approx(ref, rel=1e-10)

    def test_matches_similitude_density_formula(self, rng):
        # density of f(N(t0, s0^2 I)) written out with s, R, t, s0, t0 separately
        H = 3
        f = random_similitude(rng, H)
        t0, s0 = rng.normal(size=H), 0.6
        x = rng.normal(size=H)
        g = transform_gaussian(f, SphericalGaussian(t0, s0))
        direct = ((2 * math.pi) ** (-H / 2) * (f.s * s0) ** (-H)
                  * math.exp(-np.sum((x - (f.s * f.R @ t0 + f.t)) ** 2) / (2 * s0 ** 2 * f.s ** 2)))
        assert math.exp(log_density(g, x)) == pytest.approx(direct, rel=1e-12)

    def test_normalization_grid(self):
        g = SphericalGaussian([0.3, -0.2], 0.5)
        lo = g.mu - 8 * g.sigma
        hi = g.mu + 8 * g.sigma
        n = 801
        xs = np.linspace(lo[0], hi[0], n)
        ys = np.linspace(lo[1], hi[1], n)
        XX, YY = np.meshgrid(xs, ys)
        dens = np.exp(log_density(g, np.column_stack([XX.ravel(), YY.ravel()])))
        integral = dens.sum() * (xs[1] - xs[0]) * (ys[1] - ys[0])
        assert integral == pytest.approx(1.0, rel=0.01)


class TestRandomRotation:
    def test_one_dimensional(self, rng):
        np.testing.assert_array_equal(random_rotation(1, rng), [[1.0]])

    @pytest.mark.parametrize("H", [2, 3, 4])
    def test_proper_rotations(self, rng, H):
        for _ in range(1000 if H < 4 else 200):
            assert is_rotation(random_rotation(H, rng))

    def test_uniform_angle_in_2d(self, rng):
        n = 100_000
        traces = np.array([np.trace(random_rotation(2, rng)) for _ in range(n)])
        # trace = 2 cos(theta) has mean 0 and variance 2 for uniform theta
        assert abs(traces.mean()) < 3 * math.sqrt(2.0 / n)


class TestOptimalRotation:
    def test_identity(self):
        np.testing.assert_allclose(optimal_rotation(np.eye(3)), np.eye(3), atol=1e-15)

    def test_diag_example(self):
        A = np.diag([2.0, -3.0])
        R = optimal_rotation(A)
        np.testing.assert_allclose(R, -np.eye(2), atol=1e-12)
        assert np.trace(A.T @ R) == pytest.approx(1.0, abs=1e-12)
        theta, best = grid_rotation_2d(A)
        assert theta == pytest.approx(math.pi, abs=1e-5)
        assert best == pytest.approx(1.0, abs=1e-9)

    def test_recovers_rotation(self, rng):
        for H in (2, 3, 4):
            G = random_rotation(H, rng)
            np.testing.assert_allclose(optimal_rotation(G), G, atol=1e-12)

    def test_matches_grid_search(self, rng):
        for _ in range(20):
            A = rng.normal(size=(2, 2))
            R = optimal_rotation(A)
            _, best = grid_rotation_2d(A)
            assert np.trace(A.T @ R) - best > -1e-6
            assert np.trace(A.T @ R) - best < 1e-6

    def test_dominance(self, rng):
        for H in (2, 3):
            others = np.stack([random_rotation(H, rng) for _ in range(200)])
            for _ in range(200):
                A = rng.normal(size=(H, H))
                opt = np.trace(A.T @ optimal_rotation(A))
                assert np.all(opt >= np.einsum("ab,nab->n", A, others) - 1e-9)

    def test_rank_deficient_is_a_maximizer(self, rng):
        u, v = rng.normal(size=3), rng.normal(size=3)
        A = np.outer(u, v)
        R = optimal_rotation(A)
        assert is_rotation(R)
        # maximum of tr(A^T R) for rank one A is |u||v|
        assert np.trace(A.T @ R) == pytest.approx(np.linalg.norm(u) * np.linalg.norm(v))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=9, max_size=9))
    def test_always_proper(self, entries):
        R = optimal_rotation(np.array(entries).reshape(3, 3))
        assert is_rotation(R, tol=1e-9)
