import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from somn import _kernel
from somn.errors import AllWhiteImage, MalformedCheckpoint, VersionMismatch
from somn.evaluation import em_fit
from somn.imaging import GrayImage, darkness_mass
from somn.lattice import distances_from
from somn.mixture import MixtureModel, posterior, validate_model
from somn.trainer import (
    ConfigError,
    SomnState,
    TrainConfig,
    find_winner_posterior,
    fit,
    initialize,
    learning_rate,
    load_checkpoint,
    radius,
    save_checkpoint,
    somn_step,
    train,
    weight_rate,
)

from conftest import radial_gradient, two_squares


def reference_step(means, covs, weights, lat, x, t, cfg):
    """Plain numpy SOMN iteration, written straight from the update rules."""
    p = posterior(x, MixtureModel(means, covs, weights))
    win = int(np.argmax(p))
    a, alpha, delta = learning_rate(t, cfg), weight_rate(t, cfg), radius(t, cfg)
    m2, c2, w2 = means.copy(), covs.copy(), weights.copy()
    for j in np.nonzero(distances_from(lat, win) <= delta)[0]:
        v = x - means[j]
        m2[j] = means[j] + a * p[j] * v
        if cfg.sequential:
            v = x - m2[j]
        c = covs[j] + a * p[j] * (np.outer(v, v) - covs[j])
        lam = np.linalg.eigvalsh(c)[0]
        if lam < cfg.covariance_floor:
            c = c + (cfg.covariance_floor - lam) * np.eye(2)
        c2[j] = c
        w2[j] = weights[j] + alpha * (p[j] - weights[j])
    return m2, c2, w2 / w2.sum()


def _state(means, covs, weights, cfg):
    return SomnState(cfg.lattice(), np.array(means, float), np.array(covs, float),
                     np.array(weights, float), 0, cfg)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learn, cfg.weight, cfg.cooling_floor, cfg.covariance_floor) == (0.15, 0.00005, 0.01, 0.25)
        assert cfg.radius0 == 5.0

    @pytest.mark.parametrize("field,value", [
        ("learn", 1.5), ("learn", 0.009), ("weight", 0.0011), ("weight", 0.000009),
        ("iterations", 0), ("initial_radius", -1.0), ("covariance_floor", 0.0),
        ("seed", -1), ("metric", "euclid"), ("cooling_floor", 1.5),
    ])
    def test_rejects(self, field, value):
        with pytest.raises(ConfigError) as err:
            TrainConfig(**{field: value})
        assert err.value.field == field
        assert field in str(err.value)

    def test_learn_message_names_range(self):
        with pytest.raises(ConfigError, match=r"learn.*\[0\.01, 1\.00\]"):
            TrainConfig(learn=1.5)

    @pytest.mark.parametrize("learn,weight", [(0.01, 0.00001), (1.0, 0.001), (0.15, 0.00005)])
    def test_range_endpoints_accepted(self, learn, weight):
        TrainConfig(learn=learn, weight=weight)

    def test_grid_rejected(self):
        with pytest.raises(ConfigError) as err:
            TrainConfig(grid_width=0)
        assert err.value.field == "grid"

    def test_dict_roundtrip(self):
        cfg = TrainConfig(grid_width=3, grid_height=7, iterations=55, seed=2**63, metric="manhattan",
                          sequential=True)
        back = TrainConfig.from_dict(cfg.to_dict())
        assert back.to_dict() == cfg.to_dict()
        assert cfg.to_dict()["initial_radius"] == 3.5


class TestSchedules:
    def test_learning_rate_start(self):
        assert learning_rate(1, TrainConfig(learn=0.37)) == 0.37

    def test_learning_rate_long_run(self):
        assert learning_rate(1, TrainConfig(learn=0.15, iterations=5_000_000)) == 0.15

    def test_learning_rate_floor(self):
        cfg = TrainConfig(learn=0.5, iterations=1000, cooling_floor=0.01)
        assert learning_rate(1000, cfg) == pytest.approx(0.005, rel=1e-15)

    def test_weight_rate_start(self):
        assert weight_rate(1, TrainConfig(learn=0.15, weight=0.00005)) == pytest.approx(7.5e-6, rel=1e-15)

    def test_weight_rate_max(self):
        assert weight_rate(1, TrainConfig(learn=1.0, weight=0.001)) == 0.001

    def test_undamped(self):
        cfg = TrainConfig(undamped_weights=True, iterations=10)
        assert weight_rate(4, cfg) == learning_rate(4, cfg)

    def test_weight_rate_is_product(self):
        cfg = TrainConfig(iterations=100_000)
        for t in range(1, cfg.iterations + 1, 37):
            assert weight_rate(t, cfg) == learning_rate(t, cfg) * cfg.weight

    def test_radius_end(self):
        assert radius(777, TrainConfig(iterations=777, initial_radius=12.3)) == 0.0

    def test_radius_start(self):
        assert radius(1, TrainConfig(iterations=10, initial_radius=50)) == 50

    def test_radius_midpoint(self):
        assert radius(2, TrainConfig(iterations=3, initial_radius=4)) == 2

    def test_single_iteration(self):
        assert radius(1, TrainConfig(iterations=1)) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 10**6), st.floats(0.01, 1.0), st.floats(0, 1), st.floats(0, 100), st.data())
    def test_non_increasing(self, T, learn, floor, r0, data):
        cfg = TrainConfig(iterations=T, learn=learn, cooling_floor=floor, initial_radius=r0)
        t = data.draw(st.integers(1, T))
        u = data.draw(st.integers(t, T))
        assert learning_rate(u, cfg) <= learning_rate(t, cfg)
        assert radius(u, cfg) <= radius(t, cfg)
        assert learning_rate(t, cfg) >= learn * floor * (1 - 1e-15)


class TestInitialize:
    def test_single_node(self):
        st_ = initialize(TrainConfig(grid_width=1, grid_height=1), (0, 0, 100, 100))
        np.testing.assert_array_equal(st_.means, [[50, 50]])
        np.testing.assert_array_equal(st_.covs, [10000 * np.eye(2)])
        np.testing.assert_array_equal(st_.weights, [1.0])

    def test_two_by_two(self):
        st_ = initialize(TrainConfig(grid_width=2, grid_height=2), (0, 0, 100, 100))
        np.testing.assert_array_equal(st_.means, [[25, 25], [75, 25], [25, 75], [75, 75]])
        np.testing.assert_array_equal(st_.weights, [0.25] * 4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 200), st.integers(1, 200))
    def test_valid_at_birth(self, gw, gh, w, h):
        cfg = TrainConfig(grid_width=gw, grid_height=gh)
        st_ = initialize(cfg, (0, 0, w, h))
        assert validate_model(st_.model) == []
        assert np.linalg.eigvalsh(st_.covs).min() >= cfg.covariance_floor


class TestFindWinnerPosterior:
    def test_single(self):
        cfg = TrainConfig(grid_width=1, grid_height=1)
        assert find_winner_posterior([9.0, 9.0], initialize(cfg, (0, 0, 4, 4))) == 0

    def test_matches_voronoi_for_equal_isotropic(self, rng):
        cfg = TrainConfig(grid_width=5, grid_height=4)
        st_ = _state(rng.uniform(0, 50, size=(20, 2)), [2.0 * np.eye(2)] * 20, [0.05] * 20, cfg)
        for x in rng.uniform(0, 50, size=(200, 2)):
            d = np.sum((st_.means - x) ** 2, axis=1)
            assert find_winner_posterior(x, st_) == int(np.argmin(d))

    def test_weight_dominates(self):
        cfg = TrainConfig(grid_width=2, grid_height=1)
        st_ = _state([[0.0, 0.0], [2.0, 0.0]], [np.eye(2)] * 2, [0.99, 0.01], cfg)
        assert find_winner_posterior([1.0, 0.0], st_) == 0

    def test_degenerate_falls_back_to_nearest_mean(self):
        cfg = TrainConfig(grid_width=2, grid_height=1)
        st_ = _state([[0.0, 0.0], [1e4, 0.0]], [0.25 * np.eye(2)] * 2, [0.5, 0.5], cfg)
        assert find_winner_posterior([9000.0, 0.0], st_) == 1


class TestSomnStep:
    def test_single_node_hand_example(self):
        cfg = TrainConfig(grid_width=1, grid_height=1, learn=0.5, iterations=10)
        st_ = _state([[0.0, 0.0]], [4.0 * np.eye(2)], [1.0], cfg)
        somn_step(st_, [2.0, 0.0], 1, cfg)
        np.testing.assert_array_equal(st_.means, [[1.0, 0.0]])
        np.testing.assert_array_equal(st_.covs[0], [[4.0, 0.0], [0.0, 2.0]])
        assert st_.t == 1

    def test_single_node_floored(self):
        cfg = TrainConfig(grid_width=1, grid_height=1, learn=0.5, iterations=10)
        st_ = _state([[0.0, 0.0]], [0.3 * np.eye(2)], [1.0], cfg)
        somn_step(st_, [2.0, 0.0], 1, cfg)
        np.testing.assert_allclose(st_.covs[0], [[2.25, 0.0], [0.0, 0.25]], rtol=1e-8)
        assert np.linalg.eigvalsh(st_.covs[0]).min() >= 0.25

    def test_single_node_weight_stays_one(self, rng):
        cfg = TrainConfig(grid_width=1, grid_height=1, iterations=50)
        st_ = initialize(cfg, (0, 0, 10, 10))
        for t in range(1, 51):
            somn_step(st_, rng.uniform(0, 10, 2), t, cfg)
            assert st_.weights[0] == 1.0

    def test_zero_rate_only_renormalizes(self):
        # learn = 0 is outside the configurable range, so drive the kernel directly.
        cfg = TrainConfig(grid_width=3, grid_height=2, iterations=10)
        st_ = initialize(cfg, (0, 0, 30, 20))
        before = st_.model
        args = list(st_._kernel_args(cfg))
        args[19] = 0.0  # learn
        _kernel.step(12.0, 7.0, 3, cfg.iterations, *args)
        assert st_.model == before

    def test_iteration_out_of_range(self):
        cfg = TrainConfig(grid_width=1, grid_height=1, iterations=5)
        with pytest.raises(ValueError):
            somn_step(initialize(cfg, (0, 0, 1, 1)), [0.5, 0.5], 6, cfg)

    @pytest.mark.parametrize("metric", ["chebyshev", "manhattan"])
    @pytest.mark.parametrize("sequential", [False, True])
    @pytest.mark.parametrize("undamped", [False, True])
    def test_matches_reference(self, metric, sequential, undamped):
        rng = np.random.default_rng(hash((metric, sequential, undamped)) % 2**32)
        cfg = TrainConfig(grid_width=6, grid_height=5, iterations=300, learn=0.5, metric=metric,
                          sequential=sequential, undamped_weights=undamped)
        st_ = initialize(cfg, (0, 0, 20, 16))
        M, C, W = st_.means.copy(), st_.covs.copy(), st_.weights.copy()
        for t in range(1, cfg.iterations + 1):
            x = rng.uniform(0, 1, 2) * [20, 16]
            M, C, W = reference_step(M, C, W, st_.lattice, x, t, cfg)
            somn_step(st_, x, t, cfg)
        np.testing.assert_allclose(st_.means, M, rtol=0, atol=1e-8)
        np.testing.assert_allclose(st_.covs, C, rtol=0, atol=1e-8)
        np.testing.assert_allclose(st_.weights, W, rtol=0, atol=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_invariants_after_each_step(self, seed):
        rng = np.random.default_rng(seed)
        cfg = TrainConfig(grid_width=int(rng.integers(1, 6)), grid_height=int(rng.integers(1, 6)),
                          iterations=60, learn=float(rng.uniform(0.01, 1.0)),
                          weight=float(rng.uniform(1e-5, 1e-3)),
                          covariance_floor=float(rng.uniform(0.05, 2.0)),
                          undamped_weights=bool(rng.integers(2)))
        st_ = initialize(cfg, (0, 0, 30, 30))
        for t in range(1, cfg.iterations + 1):
            somn_step(st_, rng.uniform(-5, 35, 2), t, cfg)
            w = st_.weights
            assert abs(w.sum() - 1.0) <= 1e-9 and np.all(w >= 0)
            assert np.linalg.eigvalsh(st_.covs).min() >= cfg.covariance_floor
            assert validate_model(st_.model) == []


class TestTrain:
    def test_single_iteration_consumes_one_sample(self):
        dist = darkness_mass(radial_gradient(16))
        cfg = TrainConfig(grid_width=2, grid_height=2, iterations=1, seed=21)
        state = fit(cfg, dist)
        rng = np.random.default_rng(21)
        x = dist.draw(rng)
        assert state.rng_state == rng.bit_generator.state
        ref = initialize(cfg, dist.domain)
        somn_step(ref, x, 1, cfg)
        assert ref.model == state.model

    def test_deterministic(self):
        dist = darkness_mass(radial_gradient(32))
        cfg = TrainConfig(grid_width=4, grid_height=4, iterations=5000, seed=8)
        assert train(cfg, dist) == train(cfg, dist)

    def test_seed_matters(self):
        dist = darkness_mass(radial_gradient(32))
        a = train(TrainConfig(grid_width=4, grid_height=4, iterations=500, seed=1), dist)
        b = train(TrainConfig(grid_width=4, grid_height=4, iterations=500, seed=2), dist)
        assert a != b

    def test_chunking_and_callbacks_do_not_change_result(self):
        dist = darkness_mass(radial_gradient(32))
        cfg = TrainConfig(grid_width=5, grid_height=3, iterations=3000, seed=3)
        seen = []
        a = fit(cfg, dist).model
        b = fit(cfg, dist, chunk=77, progress=lambda t, p: seen.append(t), progress_every=250).model
        assert a == b
        assert seen == list(range(250, 3001, 250))

    def test_default_progress_cadence(self):
        dist = darkness_mass(radial_gradient(16))
        seen = []
        fit(TrainConfig(grid_width=2, grid_height=2, iterations=250), dist,
            progress=lambda t, p: seen.append(t))
        assert seen == list(range(2, 251, 2))

    def test_matches_reference_on_image(self):
        dist = darkness_mass(radial_gradient(16))
        cfg = TrainConfig(grid_width=3, grid_height=3, iterations=400, seed=5, learn=0.3)
        got = fit(cfg, dist)
        pts = dist.draw_many(np.random.default_rng(5), cfg.iterations)
        ref = initialize(cfg, dist.domain)
        M, C, W = ref.means, ref.covs, ref.weights
        for t in range(1, cfg.iterations + 1):
            M, C, W = reference_step(M, C, W, ref.lattice, pts[t - 1], t, cfg)
        np.testing.assert_allclose(got.means, M, atol=1e-8)
        np.testing.assert_allclose(got.covs, C, atol=1e-8)
        np.testing.assert_allclose(got.weights, W, atol=1e-10)

    def test_all_white(self):
        with pytest.raises(AllWhiteImage):
            train(TrainConfig(iterations=10), darkness_mass(GrayImage(np.full((4, 4), 255))))

    def test_two_squares(self):
        dist = darkness_mass(two_squares())
        cfg = TrainConfig(grid_width=2, grid_height=1, iterations=100_000, seed=0)
        model = train(cfg, dist)
        assert validate_model(model) == []
        # Oracle: EM on samples from the same image.
        samples = dist.draw_many(np.random.default_rng(1), 4000)
        oracle = em_fit(samples, 2, 100, seed=0)
        for centre in ([8.0, 8.0], [24.0, 24.0]):
            assert np.min(np.linalg.norm(model.means - centre, axis=1)) <= 2.0
            assert np.min(np.linalg.norm(model.means - oracle.means[np.argmin(
                np.linalg.norm(oracle.means - centre, axis=1))], axis=1)) <= 2.0


class TestCheckpoint:
    def _trained(self, T=2000):
        dist = darkness_mass(radial_gradient(24))
        cfg = TrainConfig(grid_width=4, grid_height=3, iterations=T, seed=4, metric="manhattan")
        return cfg, dist

    def test_roundtrip_bit_exact(self):
        cfg, dist = self._trained()
        state = fit(cfg, dist)
        back = load_checkpoint(save_checkpoint(state))
        assert back.model == state.model
        np.testing.assert_array_equal(back.raw_weights, state.raw_weights)
        assert back.t == state.t and back.lattice == state.lattice
        assert back.config.to_dict() == cfg.to_dict()
        assert back.weight_total == state.weight_total
        assert save_checkpoint(back) == save_checkpoint(state)

    def test_resume_is_bitwise(self):
        cfg, dist = self._trained(5000)
        full = fit(cfg, dist)
        saved = []
        fit(cfg, dist, checkpoint=lambda s: saved.append(save_checkpoint(s)), checkpoint_every=1200)
        assert [load_checkpoint(b).t for b in saved] == [1200, 2400, 3600, 4800]
        resumed = fit(cfg, dist, state=load_checkpoint(saved[1]))
        assert resumed.model == full.model
        np.testing.assert_array_equal(resumed.raw_weights, full.raw_weights)

    def test_version_mismatch(self):
        cfg, dist = self._trained(10)
        data = save_checkpoint(fit(cfg, dist)).replace(b"SOMN-CHECKPOINT v1", b"SOMN-CHECKPOINT v9")
        with pytest.raises(VersionMismatch):
            load_checkpoint(data)

    @pytest.mark.parametrize("mangle", [
        lambda b: b[: len(b) // 2],
        lambda b: b.replace(b"iteration", b"iter"),
        lambda b: b"not a checkpoint",
        lambda b: b"\xff\xfe",
        lambda b: b.replace(b"weight_total ", b"weight_total x"),
    ])
    def test_malformed(self, mangle):
        cfg, dist = self._trained(10)
        with pytest.raises(MalformedCheckpoint):
            load_checkpoint(mangle(save_checkpoint(fit(cfg, dist))))


class TestStateCopy:
    def test_copy_is_independent(self):
        cfg = TrainConfig(grid_width=2, grid_height=2, iterations=10)
        a = initialize(cfg, (0, 0, 8, 8))
        b = a.copy()
        somn_step(b, [1.0, 1.0], 1, cfg)
        assert a.model != b.model
        assert dataclasses.asdict(a.config) == dataclasses.asdict(b.config)
