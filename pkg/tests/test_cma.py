import math

import numpy as np
import pytest

from percepta.cma import (
    DivergenceError,
    Population,
    Selection,
    StrategyState,
    default_weights,
    effective_kappa,
    expected_step_norm,
    init_strategy,
    minimize,
    sample_population,
    update_strategy,
)

from oracles import chi_norm_oracle, strategy_update_oracle

# Oracle output for the pinned 2-d update below, frozen from the
# high-precision straight-line transcription in oracles.py.
PINNED_EXPECTED = {
    "mean": [1.1701663074947866, 0.05259179443285913],
    "covariance": [
        [1.3130345393076854, 0.40899347945865594],
        [0.40899347945865594, 0.775081446188717],
    ],
    "step_size": 0.6596739337064357,
    "path_cov": [1.1926555891211923, 0.3369591333382326],
    "path_step": [0.9692085332521931, 0.25700453858411776],
}


def pinned_update_case():
    config, _ = init_strategy(2, {"population_size": 4, "parent_count": 2})
    state = StrategyState(
        mean=np.array([0.5, -0.2]),
        covariance=np.array([[1.3, 0.4], [0.4, 0.9]]),
        step_size=0.7,
        path_cov=np.array([0.1, -0.3]),
        path_step=np.array([0.2, 0.05]),
        generation=3,
        chi_n=expected_step_norm(2),
    )
    steps = np.array([[0.3, -1.1], [-0.8, 0.5], [1.2, 0.9], [-0.1, -0.4]])
    population = Population(
        candidates=state.mean + state.step_size * steps,
        raw_steps=steps,
        generation=4,
    )
    return config, state, population, Selection([2, 0], ordered=True)


class TestInit:
    def test_fresh_state(self):
        config, state = init_strategy(2, initial_mean=np.zeros(2), initial_step=1.0)
        assert np.array_equal(state.covariance, np.eye(2))
        assert np.array_equal(state.path_cov, np.zeros(2))
        assert np.array_equal(state.path_step, np.zeros(2))
        assert state.generation == 0
        assert state.step_size == 1.0

    def test_chi_constant_n1(self):
        _, state = init_strategy(1)
        assert state.chi_n == pytest.approx(math.sqrt(2 / math.pi), rel=1e-12)
        assert state.chi_n == pytest.approx(0.79788, abs=5e-6)

    @pytest.mark.parametrize("n", [1, 2, 5, 20])
    def test_chi_constant_matches_gamma_recurrence(self, n):
        assert expected_step_norm(n) == pytest.approx(chi_norm_oracle(n), rel=1e-6)

    def test_parent_count_must_be_below_population(self):
        with pytest.raises(ValueError):
            init_strategy(2, {"population_size": 4, "parent_count": 4})

    @pytest.mark.parametrize("bad", [{"dimension": 0}, {"step": -1.0}, {"step": 0.0}])
    def test_rejects_nonpositive_dimension_or_step(self, bad):
        if "dimension" in bad:
            with pytest.raises(ValueError):
                init_strategy(bad["dimension"])
        else:
            with pytest.raises(ValueError):
                init_strategy(3, initial_step=bad["step"])

    def test_config_invariants(self):
        config, _ = init_strategy(7)
        w = config.weights
        K = config.parent_count
        assert abs(w[:K].sum() - 1.0) < 1e-12
        assert np.all(np.diff(w[:K]) <= 0) and w[K - 1] > 0
        assert np.all(w[K:] == 0)
        assert config.learn_rank_one + config.learn_rank_k * w.sum() <= 1.0
        assert 1.0 <= effective_kappa(config) <= K


class TestSampling:
    def test_zero_step_size_collapses_to_mean(self):
        config, state = init_strategy(3, initial_mean=np.array([1.0, -2.0, 0.5]))
        state.step_size = 0.0
        pop = sample_population(state, config, 7)
        assert np.array_equal(pop.candidates, np.tile(state.mean, (config.population_size, 1)))

    def test_fixed_seed_is_deterministic(self):
        config, state = init_strategy(4)
        a = sample_population(state, config, 123)
        b = sample_population(state, config, 123)
        assert np.array_equal(a.candidates, b.candidates)
        assert not np.array_equal(a.candidates, sample_population(state, config, 124).candidates)

    def test_sample_mean_approaches_distribution_mean(self):
        mean = np.array([0.3, -0.7, 1.5, 0.0])
        config, state = init_strategy(
            4, {"population_size": 10000, "parent_count": 2}, mean, 0.8
        )
        pop = sample_population(state, config, 99)
        err = np.abs(pop.candidates.mean(axis=0) - mean)
        assert np.all(err < 0.05 * state.step_size)

    def test_empirical_variance_tracks_covariance(self):
        config, state = init_strategy(2, {"population_size": 10000, "parent_count": 2})
        state.covariance = np.diag([4.0, 1.0])
        state.eig_values, state.eig_vectors = np.array([4.0, 1.0]), np.eye(2)
        pop = sample_population(state, config, 5)
        ratio = pop.candidates[:, 0].var() / pop.candidates[:, 1].var()
        assert ratio == pytest.approx(4.0, rel=0.15)

    def test_consistency_invariant(self):
        config, state = init_strategy(5, initial_mean=np.arange(5.0), initial_step=0.7)
        pop = sample_population(state, config, 11)
        assert np.array_equal(pop.candidates, state.mean + state.step_size * pop.raw_steps)

    def test_nonfinite_covariance_rejected(self):
        config, state = init_strategy(2)
        state.covariance = np.array([[np.nan, 0.0], [0.0, 1.0]])
        with pytest.raises(DivergenceError):
            sample_population(state, config, 0)


class TestUpdate:
    def test_single_parent_unit_weight_moves_mean_to_candidate(self):
        config, state = init_strategy(
            3, {"population_size": 4, "parent_count": 1, "learn_mean": 1.0}
        )
        pop = sample_population(state, config, 21)
        new = update_strategy(state, config, pop, Selection([2]))
        assert np.allclose(new.mean, pop.candidates[2], rtol=0, atol=1e-15)

    def test_neutral_conjugate_path_keeps_step_size(self):
        # One selected candidate whose raw step has exactly the norm that
        # makes the new conjugate path land on the expected step norm.
        config, state = init_strategy(2, {"population_size": 4, "parent_count": 1})
        kappa = effective_kappa(config)
        c = config.learn_step
        scale = math.sqrt(c * (2.0 - c) * kappa)
        z = np.array([state.chi_n / scale, 0.0])
        steps = np.vstack([z, np.ones((3, 2))])
        pop = Population(state.mean + state.step_size * steps, steps, 1)
        new = update_strategy(state, config, pop, Selection([0]))
        assert np.linalg.norm(new.path_step) == pytest.approx(state.chi_n, rel=1e-12)
        assert new.step_size == pytest.approx(state.step_size, rel=1e-12)

    def test_full_update_matches_straight_line_oracle(self):
        config, state, pop, sel = pinned_update_case()
        new = update_strategy(state, config, pop, sel)
        got = {
            "mean": new.mean,
            "covariance": new.covariance,
            "step_size": new.step_size,
            "path_cov": new.path_cov,
            "path_step": new.path_step,
        }
        for key, expected in PINNED_EXPECTED.items():
            np.testing.assert_allclose(got[key], expected, rtol=1e-10, err_msg=key)
        assert new.generation == state.generation + 1

    def test_frozen_values_still_match_live_oracle(self):
        config, state, pop, sel = pinned_update_case()
        live = strategy_update_oracle(
            state.mean,
            state.covariance,
            state.step_size,
            state.path_cov,
            state.path_step,
            list(config.weights[:2]),
            pop.candidates,
            pop.raw_steps,
            [2, 0],
            config.learn_mean,
            config.learn_rank_one,
            config.learn_rank_k,
            config.learn_path,
            config.learn_step,
            config.damping_step,
        )
        for key, expected in PINNED_EXPECTED.items():
            np.testing.assert_allclose(live[key], expected, rtol=1e-12, err_msg=key)

    def test_empty_selection_rejected(self):
        config, state = init_strategy(2, {"population_size": 4, "parent_count": 2})
        pop = sample_population(state, config, 3)
        with pytest.raises(ValueError):
            update_strategy(state, config, pop, Selection([]))

    def test_out_of_range_index_rejected(self):
        config, state = init_strategy(2, {"population_size": 4, "parent_count": 2})
        pop = sample_population(state, config, 3)
        with pytest.raises(ValueError):
            update_strategy(state, config, pop, Selection([4]))

    def test_short_selection_renormalizes_weights(self):
        config, state = init_strategy(
            3, {"population_size": 6, "parent_count": 3, "weight_mode": "uniform_top_k"}
        )
        pop = sample_population(state, config, 17)
        new = update_strategy(state, config, pop, Selection([4], ordered=False))
        # single index with weight 1 behaves like the K=1 collapse
        assert np.allclose(new.mean, pop.candidates[4], atol=1e-15)

    def test_stale_population_rejected(self):
        config, state = init_strategy(2, {"population_size": 4, "parent_count": 2})
        pop = sample_population(state, config, 3)
        pop.generation = 5
        with pytest.raises(ValueError):
            update_strategy(state, config, pop, Selection([0]))


class TestKappa:
    def test_uniform_two_weights(self):
        config, _ = init_strategy(
            2, {"population_size": 4, "parent_count": 2, "weight_mode": "uniform_top_k"}
        )
        assert effective_kappa(config) == pytest.approx(2.0, rel=1e-12)

    def test_single_weight(self):
        config, _ = init_strategy(2, {"population_size": 4, "parent_count": 1})
        assert effective_kappa(config) == pytest.approx(1.0, rel=1e-12)

    def test_log_decreasing_default_matches_weight_formula(self):
        # independent evaluation of the weight recipe for L=4, K=2
        raw = [math.log(3) - math.log(1), math.log(3) - math.log(2)]
        w = [v / sum(raw) for v in raw]
        expected = 1.0 / sum(v * v for v in w)
        config, _ = init_strategy(2, {"population_size": 4, "parent_count": 2})
        assert effective_kappa(config) == pytest.approx(expected, rel=1e-12)
        assert np.allclose(config.weights[:2], w, rtol=1e-12)
        assert default_weights(4, 2, "log_decreasing")[2:].tolist() == [0.0, 0.0]


class TestProperties:
    def test_permutation_invariance_with_uniform_weights(self):
        rng = np.random.default_rng(0)
        for trial in range(50):
            n = int(rng.integers(2, 6))
            L = int(rng.integers(4, 9))
            K = int(rng.integers(2, L))
            config, state = init_strategy(
                n,
                {"population_size": L, "parent_count": K, "weight_mode": "uniform_top_k"},
                rng.standard_normal(n),
                float(rng.uniform(0.2, 2.0)),
            )
            pop = sample_population(state, config, trial)
            chosen = rng.choice(L, size=K, replace=False)
            a = update_strategy(state, config, pop, Selection(list(chosen), ordered=False))
            b = update_strategy(
                state, config, pop, Selection(list(chosen[::-1]), ordered=False)
            )
            assert np.array_equal(a.mean, b.mean)
            assert np.array_equal(a.covariance, b.covariance)
            assert a.step_size == b.step_size

    def test_translation_equivariance(self):
        rng = np.random.default_rng(3)
        config, state = init_strategy(
            3, {"population_size": 5, "parent_count": 2}, rng.standard_normal(3), 0.9
        )
        state.path_cov = rng.standard_normal(3)
        state.path_step = rng.standard_normal(3)
        pop = sample_population(state, config, 8)
        shift = np.array([10.0, -4.0, 2.5])

        shifted_state = StrategyState(
            mean=state.mean + shift,
            covariance=state.covariance.copy(),
            step_size=state.step_size,
            path_cov=state.path_cov.copy(),
            path_step=state.path_step.copy(),
            generation=state.generation,
            chi_n=state.chi_n,
            eig_values=state.eig_values.copy(),
            eig_vectors=state.eig_vectors.copy(),
        )
        shifted_pop = Population(pop.candidates + shift, pop.raw_steps.copy(), pop.generation)

        a = update_strategy(state, config, pop, Selection([1, 3]))
        b = update_strategy(shifted_state, config, shifted_pop, Selection([1, 3]))
        np.testing.assert_allclose(b.mean, a.mean + shift, atol=1e-10)
        np.testing.assert_allclose(b.covariance, a.covariance, atol=1e-10)
        np.testing.assert_allclose(b.path_cov, a.path_cov, atol=1e-10)
        np.testing.assert_allclose(b.path_step, a.path_step, atol=1e-10)
        assert b.step_size == pytest.approx(a.step_size, rel=1e-12)

    def test_sphere_progress(self):
        sphere = lambda x: float(x @ x)
        early, late = [], []
        for seed in range(20):
            _, f15, _ = minimize(sphere, np.full(10, 3.0), 1.0, 15, seed=seed)
            _, f150, _ = minimize(sphere, np.full(10, 3.0), 1.0, 150, seed=seed)
            early.append(f15)
            late.append(f150)
        assert np.median(late) < np.median(early)

    def test_covariance_stays_positive_definite_over_long_run(self):
        config, state = init_strategy(6, initial_mean=np.full(6, 2.0), initial_step=0.5)
        rng = np.random.default_rng(42)
        seeds = rng.integers(0, 2**63, size=1000)
        for g in range(1000):
            pop = sample_population(state, config, int(seeds[g]))
            values = np.array([float(x @ x) for x in pop.candidates])
            order = np.argsort(values, kind="stable")[: config.parent_count]
            state = update_strategy(state, config, pop, Selection(list(order)))
            assert state.eig_values.min() > 0
            np.testing.assert_allclose(
                state.covariance, state.covariance.T, rtol=1e-9, atol=1e-300
            )
        assert state.generation == 1000


class TestDiagonalMode:
    def test_covariance_stays_diagonal_and_samples_match_it(self):
        config, state = init_strategy(
            5,
            {"population_size": 8, "parent_count": 4, "diagonal_covariance": True},
            np.full(5, 1.5),
            0.6,
        )
        rng = np.random.default_rng(9)
        for g in range(50):
            pop = sample_population(state, config, int(rng.integers(0, 2**62)))
            order = np.argsort([float(x @ x) for x in pop.candidates], kind="stable")
            state = update_strategy(
                state, config, pop, Selection(list(order[:4]), ordered=True)
            )
            off_diagonal = state.covariance - np.diag(np.diag(state.covariance))
            assert np.all(off_diagonal == 0.0)
            assert np.array_equal(state.eig_vectors, np.eye(5))
            assert state.eig_values.min() > 0
        # a long diagonal-mode run still makes progress on the sphere
        assert float(state.mean @ state.mean) < 1.5**2 * 5
