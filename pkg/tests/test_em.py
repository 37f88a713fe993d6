import math

import numpy as np
import pytest

from ifsem import em
from ifsem.data import generate, sierpinski_model
from ifsem.em import (
    TrainConfig,
    TrainHistory,
    e_step,
    em_iteration,
    fit,
    has_converged,
    init_random,
    pre_select,
    solve_scale,
    update_component,
    update_component_weights,
    update_depth_weights,
    update_post,
)
from ifsem.errors import DimensionError
from ifsem.geometry import Similitude, apply, is_rotation, rotation_2d
from ifsem.model import IfsModel, build_code_table, mean_depth, model_to_dict, sample, log_density
from oracles import brute_force_responsibilities, post_objective, tail_gaussians
from optimality import check_instance, similitude_report

from conftest import random_model


def line_model(v, K=1, s=0.5):
    comps = [Similitude(s, [[1.0]], [0.0]) for _ in range(K)]
    return IfsModel(comps, np.full(K, 1.0 / K), v, Similitude.identity(1))


class TestEStep:
    def test_depth_zero_model(self, rng):
        model = random_model(rng, 2, 2, 2).with_depth(2)
        model = IfsModel(model.components, model.w, [1.0, 0.0, 0.0], model.post)
        P = e_step(model, rng.normal(size=(20, 2))).values
        np.testing.assert_array_equal(P[:, 0], 1.0)
        assert np.all(P[:, 1:] == 0)

    def test_one_third_two_thirds(self):
        P = e_step(line_model([0.5, 0.5]), np.zeros((1, 1))).values
        np.testing.assert_allclose(P, [[1 / 3, 2 / 3]], rtol=1e-14)

    def test_far_point(self, rng):
        model = random_model(rng, 3, 2, 2)
        r = e_step(model, np.array([[1e4, -1e4]]))
        assert np.all(np.isfinite(r.values)) and np.isfinite(r.log_density[0])
        assert r.values.sum() == pytest.approx(1.0, abs=1e-12)

    def test_rows_stochastic(self, rng):
        for _ in range(20):
            model = random_model(rng, 3, 3, 2)
            P = e_step(model, rng.normal(0, 2, (50, 2))).values
            assert np.all(P >= 0)
            np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)

    def test_matches_brute_force(self, rng):
        for K in (1, 2, 3):
            for D in (0, 1, 2):
                for H in (1, 2):
                    model = random_model(rng, K, D, H)
                    X = sample(model, 15, rng)
                    np.testing.assert_allclose(e_step(model, X).values,
                                               brute_force_responsibilities(model, X),
                                               rtol=0, atol=1e-9)

    def test_log_density_matches_model(self, rng):
        model = random_model(rng, 2, 3, 2)
        X = sample(model, 30, rng)
        np.testing.assert_allclose(e_step(model, X).log_density, log_density(model, X),
                                   rtol=1e-13)

    def test_threads_match_single(self, rng):
        model = random_model(rng, 3, 3, 2)
        X = sample(model, 401, rng)
        a, b = e_step(model, X), e_step(model, X, workers=4)
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.log_density, b.log_density)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            e_step(random_model(rng, 2, 1, 2), np.zeros((3, 3)))

    def test_empty_batch(self, rng):
        with pytest.raises(ValueError):
            e_step(random_model(rng, 2, 1, 2), np.zeros((0, 2)))


class TestWeightUpdates:
    def test_all_mass_on_empty_code(self):
        table = build_code_table(line_model([1 / 3] * 3, K=2))
        P = np.zeros((4, table.M))
        P[:, 0] = 1
        np.testing.assert_array_equal(update_depth_weights(P, table), [1, 0, 0])

    def test_single_row(self):
        table = build_code_table(line_model([0.5, 0.5]))
        np.testing.assert_allclose(update_depth_weights(np.array([[0.25, 0.75]]), table),
                                   [0.25, 0.75])

    def test_depth_weights_duplicate_invariance(self, rng):
        model = random_model(rng, 3, 2, 2)
        table = build_code_table(model)
        P = e_step(model, rng.normal(size=(30, 2)), table).values
        v = update_depth_weights(P, table)
        assert v.sum() == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(update_depth_weights(np.vstack([P, P]), table), v,
                                   rtol=1e-14)

    def test_component_masses(self):
        # K=2, D=1: codes (), (0,), (1,)
        table = build_code_table(line_model([0.5, 0.5], K=2))
        P = np.array([[0.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(update_component_weights(P, table), [0.75, 0.25])

    def test_symmetric_gives_uniform(self):
        table = build_code_table(line_model([1 / 3] * 3, K=3, s=0.4))
        P = np.zeros((1, table.M))
        P[0, 1:] = 1.0 / (table.M - 1)
        np.testing.assert_allclose(update_component_weights(P, table), [1 / 3] * 3,
                                   rtol=1e-14)

    def test_ignores_empty_code(self, rng):
        model = random_model(rng, 3, 2, 2)
        table = build_code_table(model)
        P = e_step(model, rng.normal(size=(30, 2)), table).values
        Q = P.copy()
        Q[:, 0] *= 17.0
        np.testing.assert_allclose(update_component_weights(Q, table),
                                   update_component_weights(P, table), rtol=1e-14)

    def test_no_deep_mass(self):
        table = build_code_table(line_model([0.5, 0.5], K=2))
        assert update_component_weights(np.array([[1.0, 0.0, 0.0]]), table) is None


class TestSolveScale:
    def test_unit(self):
        assert solve_scale(2, 0, 2, 1) == 1.0

    def test_factored(self):
        assert solve_scale(6, -1, 1, 1) == pytest.approx(3.0, rel=1e-15)

    def test_degenerate(self):
        assert solve_scale(0, 0, 1, 2, floor=1e-6) == 1e-6

    def test_is_root(self, rng):
        for _ in range(200):
            a, b, p, H = rng.uniform(0, 10), rng.normal(0, 5), rng.uniform(0.1, 10), 3
            s = solve_scale(a, b, p, H, floor=1e-300)
            assert s > 0
            assert p * H * s * s + b * s - a == pytest.approx(0.0, abs=1e-9 * (a + abs(b) + 1))

    def test_large_b_is_stable(self):
        # the naive form cancels catastrophically here
        s = solve_scale(1.0, 1e9, 1.0, 1, floor=1e-300)
        assert s == pytest.approx(1e-9, rel=1e-12)


class TestUpdateComponent:
    def test_plus_minus_one(self):
        model = line_model([0.5, 0.5])
        table = build_code_table(model)
        X = np.array([[-1.0], [1.0]])
        P = np.array([[0.0, 1.0], [0.0, 1.0]])
        new, starved = update_component(0, P, X, table, model.components[0])
        assert not starved
        assert new.s == pytest.approx(1.0, rel=1e-15)
        np.testing.assert_array_equal(new.R, [[1.0]])
        np.testing.assert_allclose(new.t, [0.0], atol=1e-15)

    def test_single_point(self, rng):
        model = random_model(rng, 2, 1, 2, post=False)
        table = build_code_table(model)
        X = rng.normal(size=(5, 2))
        P = np.zeros((5, table.M))
        P[:, 0] = 1.0
        P[2] = 0.0
        P[2, 1] = 1.0  # code (0,) with empty tail owns point 2 only
        new, _ = update_component(0, P, X, table, model.components[0])
        np.testing.assert_allclose(new.t, X[2], atol=1e-12)
        assert new.s == 1e-6

    def test_starved_keeps_old(self, rng):
        model = random_model(rng, 2, 1, 2)
        table = build_code_table(model)
        P = np.zeros((3, table.M))
        P[:, 0] = 1.0
        old = model.components[1]
        new, starved = update_component(1, P, np.zeros((3, 2)), table, old)
        assert starved and new is old

    def test_scale_floor(self, rng):
        model = random_model(rng, 2, 2, 2)
        table = build_code_table(model)
        X = np.zeros((10, 2))
        P = e_step(model, X, table).values
        new, _ = update_component(0, P, X, table, model.components[0], scale_floor=1e-3)
        assert new.s >= 1e-3

    def test_optimality(self, rng):
        for K, D, H in [(2, 2, 2), (3, 2, 3), (1, 3, 2)]:
            for name, (gain, grad) in check_instance(rng, K, D, H, n_perturb=100).items():
                assert gain <= 1e-9, name
                assert grad < 1e-3, name

    def test_checker_rejects_wrong_update(self, rng):
        # a 5% error in the scale must be caught by both criteria
        model = random_model(rng, 2, 2, 2)
        batch = sample(random_model(rng, 2, 2, 2), 60, rng)
        table = build_code_table(model)
        P = e_step(model, batch, table).values
        tails = tail_gaussians(model)
        good, _ = update_post(P, batch, table, model.post)
        bad = Similitude(good.s * 1.05, good.R, good.t)
        gain, grad = similitude_report(lambda f: post_objective(model, P, batch, f, tails),
                                       bad, rng, 200)
        assert gain > 0 and grad > 1e-3


class TestUpdatePost:
    def test_gaussian_fit(self, rng):
        H = 2
        X = rng.normal(size=(2000, H)) * 1.5 + [0.3, -0.2]
        model = IfsModel([Similitude(0.5, np.eye(H), np.zeros(H))], [1.0], [1.0],
                         Similitude.identity(H))
        table = build_code_table(model)
        new, _ = update_post(e_step(model, X, table).values, X, table, model.post)
        mean = X.mean(axis=0)
        rms = math.sqrt(np.sum((X - mean) ** 2) / X.size)
        assert new.s == pytest.approx(rms, rel=1e-12)
        np.testing.assert_allclose(new.t, mean, atol=1e-12)

    def test_symmetric(self, rng):
        comps = [Similitude(0.5, [[1.0]], [0.5]), Similitude(0.5, [[1.0]], [-0.5])]
        model = IfsModel(comps, [0.5, 0.5], [0.2, 0.3, 0.5], Similitude(1.3, [[1.0]], [0.0]))
        half = rng.normal(0, 1, (50, 1))
        X = np.vstack([half, -half])
        table = build_code_table(model)
        new, _ = update_post(e_step(model, X, table).values, X, table, model.post)
        assert abs(new.t[0]) < 1e-12

    def test_moves_toward_true_frame(self, rng):
        model = random_model(rng, 3, 2, 2, post=False)
        g = Similitude(2.0, rotation_2d(0.7), [3.0, -1.0])
        X = apply(g, sample(model, 3000, rng))
        table = build_code_table(model)
        P = e_step(model, X, table).values
        new, _ = update_post(P, X, table, model.post)
        tails = tail_gaussians(model)
        q = lambda f: post_objective(model, P, X, f, tails)  # noqa: E731
        assert q(new) > q(model.post)
        assert np.linalg.norm(new.t - g.t) < np.linalg.norm(model.post.t - g.t)
        assert abs(math.log(new.s / g.s)) < abs(math.log(model.post.s / g.s))


class TestEmIteration:
    def test_invariants(self, rng):
        for _ in range(100):
            K, D, H = int(rng.integers(1, 4)), int(rng.integers(0, 4)), int(rng.integers(1, 4))
            model = random_model(rng, K, D, H)
            new = em_iteration(model, rng.normal(0, 1.5, (40, H)))
            assert new.K == K and new.D == D and new.H == H
            assert abs(new.w.sum() - 1) < 1e-12 and np.all(new.w >= 0)
            assert abs(new.v.sum() - 1) < 1e-12 and np.all(new.v >= 0)
            for f in (*new.components, new.post):
                assert f.s >= 1e-6 and is_rotation(f.R)

    def test_gaussian_data_leaves_identity_post(self):
        rng = np.random.default_rng(77)
        model = init_random(3, 2, rng, D=2)
        model = IfsModel(model.components, model.w, [1.0, 0.0, 0.0], model.post)
        flags = []
        new = em_iteration(model, rng.normal(size=(100_000, 2)), flags=flags)
        assert abs(new.post.s - 1) < 1e-2
        assert np.abs(new.post.t).max() < 1e-2
        np.testing.assert_array_equal(new.v, [1, 0, 0])
        # components get no responsibility and are left alone
        assert {"starved:0", "starved:1", "starved:2", "w_kept"} <= set(flags)
        assert new.components == model.components

    def test_fit_stability_at_true_parameters(self):
        rng = np.random.default_rng(3)
        X = generate("sierpinski", 20_000, rng).points
        model = sierpinski_model()
        model = IfsModel(model.components, model.w, [0.0] * 6 + [1.0], model.post)
        before = log_density(model, X[5000:]).mean()
        after = log_density(em_iteration(model, X[:5000]), X[5000:]).mean()
        assert abs(after - before) < 0.05

    def test_does_not_mutate_input(self, rng):
        model = random_model(rng, 2, 2, 2)
        snapshot = model_to_dict(model)
        em_iteration(model, rng.normal(size=(30, 2)))
        assert model_to_dict(model) == snapshot


class TestInit:
    def test_fixed_points_and_scale(self, rng):
        for H in (1, 2, 3):
            model = init_random(4, H, rng, D=3)
            for f in model.components:
                assert f.s == 0.5
                p = np.linalg.solve(np.eye(H) - f.s * f.R, f.t)
                assert np.linalg.norm(f(p) - p) < 1e-12
            np.testing.assert_array_equal(model.v, np.full(4, 0.25))
            np.testing.assert_array_equal(model.w, np.full(4, 0.25))
            assert model.post.allclose(Similitude.identity(H), atol=0)

    @pytest.mark.parametrize("H", [2, 3])
    def test_fixed_points_uniform_in_ball(self, H):
        rng = np.random.default_rng(99)
        pts = []
        for _ in range(10_000 // 4):
            for f in init_random(4, H, rng).components:
                pts.append(np.linalg.solve(np.eye(H) - f.s * f.R, f.t))
        norms = np.linalg.norm(pts, axis=1)
        assert norms.max() <= 1.0 + 1e-12
        # the radius of a uniform point in the unit H-ball has mean H/(H+1)
        # and variance H/(H+2) - (H/(H+1))^2
        sd = math.sqrt(H / (H + 2) - (H / (H + 1)) ** 2)
        assert abs(norms.mean() - H / (H + 1)) < 3 * sd / math.sqrt(norms.size)


class TestConvergence:
    def test_deep_mass(self):
        assert has_converged(line_model([0, 0, 0, 0.04, 0.96]), 0.95)

    def test_uniform(self):
        assert not has_converged(line_model([1 / 7] * 7), 0.95)

    def test_boundary(self):
        assert has_converged(line_model([0.5, 0.5]), 0.5)


def _sierpinski_points(rng):
    return generate("sierpinski", 2000, rng).points


class TestPreSelect:
    def test_single_candidate(self):
        X = _sierpinski_points(np.random.default_rng(0))
        cfg = TrainConfig(K=3, D=3, pool_size=1, pre_iterations=5, pre_minibatch=100)
        got = pre_select(X, cfg, np.random.default_rng(5))
        rng = np.random.default_rng(5)
        expected = em.train(init_random(3, 2, rng, 3), X, 5, 100, rng)
        assert model_to_dict(got) == model_to_dict(expected)

    def test_tie_goes_to_first(self, monkeypatch):
        X = _sierpinski_points(np.random.default_rng(0))
        base = init_random(3, 2, np.random.default_rng(1), 3)
        made = []

        def same(K, H, rng, D=0):
            made.append(IfsModel(base.components, base.w, base.v, base.post))
            return made[-1]

        monkeypatch.setattr(em, "init_random", same)
        cfg = TrainConfig(K=3, D=3, pool_size=4, pre_iterations=0)
        assert pre_select(X, cfg, np.random.default_rng(0)) is made[0]

    def test_returns_deepest(self, monkeypatch):
        X = _sierpinski_points(np.random.default_rng(0))
        trained = []
        original = em.train

        def recording(*args, **kwargs):
            trained.append(original(*args, **kwargs))
            return trained[-1]

        monkeypatch.setattr(em, "train", recording)
        cfg = TrainConfig(K=3, D=3, pool_size=5, pre_iterations=5, pre_minibatch=200)
        best = pre_select(X, cfg, np.random.default_rng(8))
        depths = [mean_depth(m) for m in trained]
        assert len(trained) == 5
        assert mean_depth(best) == max(depths)
        assert best is trained[depths.index(max(depths))]


class TestFit:
    def test_zero_iterations(self):
        X = _sierpinski_points(np.random.default_rng(0))
        init = init_random(3, 2, np.random.default_rng(1), 4)
        cfg = TrainConfig(iterations=0)
        model, history = fit(X, cfg, np.random.default_rng(2), initial=init)
        assert model is init and len(history) == 0

    def test_deterministic(self):
        X = _sierpinski_points(np.random.default_rng(0))
        cfg = TrainConfig(K=3, D=3, iterations=5, minibatch=200, pool_size=2,
                          pre_iterations=3, pre_minibatch=100)
        runs = [fit(X, cfg, np.random.default_rng(11), test_data=X[:100]) for _ in range(2)]
        assert model_to_dict(runs[0][0]) == model_to_dict(runs[1][0])
        assert runs[0][1].to_jsonl(False) == runs[1][1].to_jsonl(False)

    def test_history(self):
        X = _sierpinski_points(np.random.default_rng(0))
        cfg = TrainConfig(K=3, D=2, iterations=4, minibatch=5000, pool_size=1,
                          pre_iterations=0)
        model, history = fit(X, cfg, np.random.default_rng(4), test_data=X[:50])
        assert len(history) == 4
        last = history.records[-1]
        assert last["iter"] == 3
        assert last["mean_ll_test"] == pytest.approx(log_density(model, X[:50]).mean())
        assert last["v"] == model.v.tolist()
        assert last["mean_depth"] == mean_depth(model)
        back = TrainHistory.from_jsonl(history.to_jsonl(include_time=False))
        assert back.records[0]["seconds"] is None
        assert back.records[-1]["v"] == last["v"]

    def test_minibatch_clamped(self):
        # a minibatch larger than the data uses every point once
        X = _sierpinski_points(np.random.default_rng(0))[:30]
        cfg = TrainConfig(K=2, D=1, iterations=1, minibatch=500, pool_size=1, pre_iterations=0)
        fit(X, cfg, np.random.default_rng(0))

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            fit(np.zeros((10, 3)), TrainConfig(iterations=1), rng,
                initial=init_random(2, 2, rng))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(minibatch=0)
        with pytest.raises(ValueError):
            TrainConfig(convergence_threshold=0)

    def test_restarts_keep_best(self):
        X = _sierpinski_points(np.random.default_rng(0))
        cfg = TrainConfig(K=3, D=2, iterations=3, minibatch=300, pool_size=1,
                          pre_iterations=0, restarts=3)
        model, _, score = em.fit_restarts(X, cfg, test_data=X[:200])
        seeds = np.random.SeedSequence(0).spawn(3)
        scores = []
        for s in seeds:
            m, _ = fit(X, cfg, np.random.default_rng(s))
            scores.append(log_density(m, X[:200]).mean())
        assert score == pytest.approx(max(scores), rel=1e-12)
