"""SDE engine: grids, delay laws, coefficients, simulation, costs."""
import math

import numpy as np
import pytest
from scipy import stats

from stackmf._rng import SharedNoise
from stackmf.dynamics import (
    CoefficientSet,
    DelayLaw,
    ModelSpec,
    Policy,
    PolicySet,
    TimeGrid,
    coefficient_function,
    draw_follower_initial,
    evaluate_costs_nplayer,
    lipschitz_probe,
    sample_delays,
    sample_initial_leader_path,
    simulate_nplayer,
    snap_delays_to_grid,
)
from stackmf.errors import (
    ParameterError,
    SimulationDivergedError,
    ValidationError,
)
from stackmf.measures import DiscreteMeasure


def make_model(grid=None, family="linear_quadratic", params=None, feats=(),
               L=5.0, **kw):
    grid = grid or TimeGrid(-0.125, 1.0, 1.0 / 32)
    coeffs = CoefficientSet(family, params or {}, L, feats)
    return ModelSpec(coefficients=coeffs, grid=grid, **kw)


ZERO_POLICIES = PolicySet(Policy("zero"), Policy("zero"))


class TestTimeGrid:
    def test_basic(self):
        g = TimeGrid(-0.125, 1.0, 1.0 / 64)
        assert g.b == 0.125
        assert g.T == 1.0
        assert g.n_steps == 72
        assert g.zero_index == 8
        assert g.forward_steps == 64
        assert g.times.shape == (73,)
        assert g.forward_times[0] == pytest.approx(0.0, abs=1e-15)
        assert g.times[-1] == pytest.approx(1.0, abs=1e-12)

    def test_zero_history(self):
        g = TimeGrid(0.0, 1.0, 0.25)
        assert g.zero_index == 0
        assert g.forward_steps == 4

    def test_step_must_divide_b(self):
        with pytest.raises(ValidationError):
            TimeGrid(-0.1, 1.0, 0.03)

    def test_step_must_divide_T(self):
        with pytest.raises(ValidationError):
            TimeGrid(-0.1, 1.0, 0.3)

    def test_rejects_bad_endpoints(self):
        with pytest.raises(ValidationError):
            TimeGrid(0.5, 1.0, 0.1)
        with pytest.raises(ValidationError):
            TimeGrid(-0.1, -1.0, 0.1)
        with pytest.raises(ValidationError):
            TimeGrid(-0.1, 1.0, -0.1)


class TestDelayLaw:
    def test_degenerate(self):
        law = DelayLaw.degenerate(0.25)
        assert law.a == law.b == 0.25
        assert law.cdf(0.2) == 0.0
        assert law.cdf(0.25) == 1.0

    def test_discrete_cdf(self):
        law = DelayLaw.discrete([0.1, 0.3], [0.5, 0.5])
        assert law.cdf(0.05) == 0.0
        assert law.cdf(0.1) == pytest.approx(0.5)
        assert law.cdf(0.2) == pytest.approx(0.5)
        assert law.cdf(0.3) == pytest.approx(1.0)

    def test_uniform_cdf(self):
        law = DelayLaw.uniform(0.0, 0.5)
        assert law.cdf(0.25) == pytest.approx(0.5, abs=1e-15)
        assert law.cdf(-1.0) == 0.0
        assert law.cdf(1.0) == 1.0

    def test_quantile_inverts_cdf(self):
        law = DelayLaw.uniform(0.1, 0.5)
        for u in (0.0, 0.25, 0.5, 0.99):
            assert law.cdf(law.quantile(u)) == pytest.approx(u, abs=1e-12)

    def test_validation(self):
        with pytest.raises(ValidationError):
            DelayLaw.discrete([0.3, 0.1], [0.5, 0.5])
        with pytest.raises(ValidationError):
            DelayLaw.discrete([0.1, 0.3], [0.5, 0.6])
        with pytest.raises(ValidationError):
            DelayLaw("degenerate", 0.2, 0.3)
        with pytest.raises(ValidationError):
            DelayLaw.uniform(-0.1, 0.5)


class TestSampleDelays:
    def test_degenerate_all_equal(self):
        d = sample_delays(DelayLaw.degenerate(0.2), 100, 0)
        assert np.all(d == 0.2)

    def test_discrete_frequency(self):
        # binomial concentration at 10^4 draws
        law = DelayLaw.discrete([0.1, 0.3], [0.5, 0.5])
        d = sample_delays(law, 10_000, 1)
        freq = np.mean(d == 0.1)
        assert abs(freq - 0.5) < 0.02

    def test_uniform_mean_clt(self):
        law = DelayLaw.uniform(0.1, 0.5)
        d = sample_delays(law, 10_000, 2)
        bound = 3 * (0.5 - 0.1) / math.sqrt(12 * 10_000)
        assert abs(d.mean() - 0.3) < bound

    def test_uniform_ks_smoke(self):
        law = DelayLaw.uniform(0.0, 1.0)
        d = sample_delays(law, 10_000, 3)
        stat = stats.kstest(d, law.cdf).statistic
        assert stat < 1.63 / math.sqrt(10_000)

    def test_values_within_support(self):
        for law in (DelayLaw.uniform(0.1, 0.4),
                    DelayLaw.discrete([0.1, 0.2, 0.4], [0.2, 0.3, 0.5])):
            d = sample_delays(law, 1000, 4)
            assert np.all(d >= law.a - 1e-15) and np.all(d <= law.b + 1e-15)

    def test_shared_noise_permutation_equivariant(self):
        law = DelayLaw.uniform(0.0, 0.5)
        base = sample_delays(law, 6, SharedNoise(9))
        perm = [3, 1, 5, 0, 2, 4]
        permuted = sample_delays(law, 6, SharedNoise(9).permuted(perm))
        assert np.array_equal(permuted, base[perm])


class TestSnapDelays:
    def test_grid_multiple_unchanged(self):
        g = TimeGrid(-0.5, 1.0, 0.1)
        assert snap_delays_to_grid([0.3], g)[0] == pytest.approx(0.3, abs=1e-15)

    def test_rounding(self):
        g = TimeGrid(-0.5, 1.0, 0.1)
        assert snap_delays_to_grid([0.149], g)[0] == pytest.approx(0.1, abs=1e-12)
        assert snap_delays_to_grid([0.151], g)[0] == pytest.approx(0.2, abs=1e-12)

    def test_max_error_half_step(self):
        g = TimeGrid(-0.5, 1.0, 1.0 / 16)
        rng = np.random.default_rng(6)
        d = rng.uniform(0.0, 0.5, 500)
        snapped = snap_delays_to_grid(d, g)
        assert np.abs(snapped - d).max() <= g.h / 2 + 1e-15

    def test_idempotent(self):
        g = TimeGrid(-0.5, 1.0, 1.0 / 16)
        d = snap_delays_to_grid(np.random.default_rng(7).uniform(0, 0.5, 50), g)
        assert np.array_equal(snap_delays_to_grid(d, g), d)


class TestInitialLeaderPath:
    def test_constant_flat(self):
        g = TimeGrid(-0.5, 1.0, 0.125)
        path = sample_initial_leader_path(g, "constant", {"value": 2.5}, 0)
        assert path.shape == (5, 1)
        assert np.all(path == 2.5)

    def test_ou_zero_vol_exponential_decay(self):
        g = TimeGrid(-1.0, 1.0, 0.125)
        path = sample_initial_leader_path(
            g, "ou_path", {"theta": 2.0, "vol": 0.0, "start": 5.0}, 0)
        ts = np.arange(9) * 0.125
        assert np.abs(path[:, 0] - 5.0 * np.exp(-2.0 * ts)).max() <= 1e-12

    def test_scaled_brownian_increment_variance(self):
        # E|xi(t) - xi(s)|^2 = sigma^2 |t - s| over 10^4 samples within 5%
        g = TimeGrid(-0.5, 1.0, 1.0 / 32)
        rng = np.random.default_rng(10)
        lag = g.zero_index // 4
        sigma = 0.7
        incs = np.empty(10_000)
        for k in range(10_000):
            p = sample_initial_leader_path(g, "scaled_brownian", {"sigma": sigma}, rng)
            incs[k] = p[-1, 0] - p[-1 - lag, 0]
        target = sigma ** 2 * lag * g.h
        assert abs(np.mean(incs ** 2) - target) < 0.05 * target

    def test_invalid_params(self):
        g = TimeGrid(-0.5, 1.0, 0.125)
        with pytest.raises(ValidationError):
            sample_initial_leader_path(g, "ou_path", {"theta": -1.0}, 0)
        with pytest.raises(ValidationError):
            sample_initial_leader_path(g, "nope", {}, 0)
        with pytest.raises(ValidationError):
            sample_initial_leader_path(g, "constant", {"value": 0.0, "bogus": 1}, 0)


class TestFollowerInitials:
    def test_constant(self):
        x = draw_follower_initial({"family": "constant", "params": {"value": 1.5}},
                                  np.random.default_rng(0), 1)
        assert np.all(x == 1.5)

    def test_normal_moments(self):
        rng = np.random.default_rng(1)
        x = draw_follower_initial(
            {"family": "normal", "params": {"loc": 2.0, "scale": 0.5}},
            rng, 1, size=20_000)
        assert abs(x.mean() - 2.0) < 0.02
        assert abs(x.std() - 0.5) < 0.02

    def test_student_t_needs_df(self):
        with pytest.raises(ParameterError):
            draw_follower_initial({"family": "student_t", "params": {"df": 2.0}},
                                  np.random.default_rng(2), 1)


class TestCoefficientSet:
    def test_unknown_family(self):
        with pytest.raises(ParameterError):
            CoefficientSet("bogus", {}, 1.0)

    def test_unknown_param(self):
        with pytest.raises(ParameterError):
            CoefficientSet("linear_quadratic", {"zz": 1.0}, 1.0)

    def test_measure_gain_requires_feature(self):
        with pytest.raises(ParameterError):
            CoefficientSet("linear_quadratic", {"k1": 0.5}, 1.0, ())
        CoefficientSet("linear_quadratic", {"k1": 0.5}, 1.0, ("mean",))

    def test_linear_in_measure_kernel_declared(self):
        with pytest.raises(ParameterError):
            CoefficientSet("linear_in_measure",
                           {"k1": 0.5, "kernel": "tanh_mean"}, 1.0, ("mean",))
        CoefficientSet("linear_in_measure",
                       {"k1": 0.5, "kernel": "tanh_mean"}, 1.0, ("tanh_mean",))

    def test_nonpositive_L(self):
        with pytest.raises(ParameterError):
            CoefficientSet("linear_quadratic", {}, 0.0)


class TestLipschitzProbe:
    def test_constant_coefficient_zero(self):
        fn = lambda x, mu, v: np.array([3.0])
        assert lipschitz_probe(fn, 25, 1.0, 0) == 0.0

    def test_linear_slope_exact(self):
        fn = lambda x, mu, v: 3.0 * np.asarray(x)
        assert lipschitz_probe(fn, 25, 1.0, 1) == pytest.approx(3.0, abs=1e-9)

    def test_declared_L_bounds_probe(self):
        coeffs = CoefficientSet(
            "linear_quadratic",
            {"a1": 0.5, "b1": 0.25, "k1": 0.2, "s1": 0.1},
            1.0, ("mean",))
        ratio = lipschitz_probe(coefficient_function(coeffs, "g1"), 50, 2.0, 2)
        assert ratio <= 1.0 * 1.01

    def test_measure_kernel_ratio_on_diracs(self):
        # 1-Lipschitz mean kernel: measure increments bounded by W2 on Diracs
        coeffs = CoefficientSet("linear_in_measure", {"k1": 1.0}, 2.0, ("mean",))
        g1 = coefficient_function(coeffs, "g1")
        rng = np.random.default_rng(13)
        x = np.zeros(1)
        v = np.zeros(1)
        for _ in range(50):
            ya, yb = rng.normal(size=2)
            za = DiscreteMeasure(np.array([[ya]]), np.ones(1))
            zb = DiscreteMeasure(np.array([[yb]]), np.ones(1))
            num = abs(float(g1(x, za, v)[0] - g1(x, zb, v)[0]))
            assert num <= abs(ya - yb) + 1e-12


class TestSimulateNPlayer:
    def test_all_zero_coefficients_frozen(self):
        model = make_model(
            leader_init={"family": "constant", "params": {"value": 1.0}},
            follower_init={"family": "constant", "params": {"value": 2.0}})
        b = simulate_nplayer(model, ZERO_POLICIES, 3, DelayLaw.degenerate(0.125), 0)
        assert np.all(b.leader_path == 1.0)
        assert np.all(b.follower_paths == 2.0)

    def test_pure_drift_path_equals_time(self):
        # g1 = b1 * v with v constant 1 gives dX = dt exactly on the grid
        model = make_model(params={"b1": 1.0})
        policies = PolicySet(Policy("zero"), Policy("constant", {"value": 1.0}))
        b = simulate_nplayer(model, policies, 2, DelayLaw.degenerate(0.125), 0)
        ts = b.grid.forward_times
        assert np.abs(b.follower_paths[0, :, 0] - ts).max() <= 1e-12

    def test_brownian_variance(self):
        # no interaction, sigma = 1: terminal sample variance across 10^4
        # i.i.d. followers is T within 5%
        grid = TimeGrid(0.0, 0.25, 1.0 / 16)
        model = make_model(grid=grid, params={"s1": 1.0})
        b = simulate_nplayer(model, ZERO_POLICIES, 10_000, DelayLaw.degenerate(0.0), 5)
        var = b.follower_paths[:, -1, 0].var()
        assert abs(var - 0.25) < 0.05 * 0.25

    def test_needs_two_followers(self):
        model = make_model()
        with pytest.raises(ValidationError):
            simulate_nplayer(model, ZERO_POLICIES, 1, DelayLaw.degenerate(0.0), 0)

    def test_delay_exceeding_history_rejected(self):
        model = make_model()
        with pytest.raises(ValidationError):
            simulate_nplayer(model, ZERO_POLICIES, 2, DelayLaw.degenerate(0.5), 0)

    def test_explosion_names_step(self):
        model = make_model(params={"a1": 1e200},
                           follower_init={"family": "constant", "params": {"value": 1.0}})
        with pytest.raises(SimulationDivergedError) as err:
            simulate_nplayer(model, ZERO_POLICIES, 2, DelayLaw.degenerate(0.0), 0)
        assert err.value.step >= 0
        assert "step" in str(err.value)

    def test_determinism_bit_identical(self):
        model = make_model(params={"a1": -0.5, "k1": 0.3, "s1": 0.2},
                           feats=("mean",))
        law = DelayLaw.discrete([0.0625, 0.125], [0.5, 0.5])
        b1 = simulate_nplayer(model, ZERO_POLICIES, 6, law, 42)
        b2 = simulate_nplayer(model, ZERO_POLICIES, 6, law, 42)
        assert np.array_equal(b1.leader_path, b2.leader_path)
        assert np.array_equal(b1.follower_paths, b2.follower_paths)
        assert np.array_equal(b1.delays, b2.delays)

    def test_permutation_symmetry_exact(self):
        # relabeling followers permutes paths bit-for-bit, leader unchanged
        model = make_model(
            params={"a0": -0.2, "k0": 0.4, "s0": 0.1,
                    "a1": -0.5, "k1": 0.3, "s1": 0.2},
            feats=("mean", "tanh_mean"),
            leader_init={"family": "scaled_brownian", "params": {"sigma": 0.5}},
            follower_init={"family": "normal", "params": {"scale": 1.0}})
        policies = PolicySet(Policy("affine", {"gain": 0.1}),
                             Policy("affine", {"gain": -0.2, "gain_lead": 0.5}))
        law = DelayLaw.uniform(0.0, 0.125)
        N = 8
        perm = [5, 3, 7, 1, 0, 6, 2, 4]
        base = simulate_nplayer(model, policies, N, law, SharedNoise(77))
        relab = simulate_nplayer(model, policies, N, law,
                                 SharedNoise(77).permuted(perm))
        assert np.array_equal(relab.leader_path, base.leader_path)
        assert np.array_equal(relab.delays, base.delays[perm])
        assert np.array_equal(relab.follower_paths, base.follower_paths[perm])

    def test_moment_stability_under_refinement(self):
        # E[sup_t |y|^2] stable within 10% when h is halved
        law = DelayLaw.degenerate(0.125)
        policies = PolicySet(Policy("zero"),
                             Policy("affine", {"gain_lead": 0.3}))
        vals = []
        for h in (1.0 / 16, 1.0 / 32):
            grid = TimeGrid(-0.125, 0.5, h)
            model = make_model(
                grid=grid,
                params={"a1": -1.0, "k1": 0.3, "b1": 0.5, "s1": 0.3},
                feats=("mean",),
                leader_init={"family": "scaled_brownian", "params": {"sigma": 0.4}},
                follower_init={"family": "normal", "params": {"scale": 0.7}})
            sups = []
            for rep in range(1000):
                b = simulate_nplayer(model, policies, 4, law, 1000 + rep)
                sups.append(np.max(np.sum(b.follower_paths ** 2, axis=2)))
            vals.append(np.mean(sups))
        assert abs(vals[0] - vals[1]) <= 0.1 * max(vals)

    def test_grid_refinement_strong_order(self):
        # coupled Brownian ladder: halving h changes the path by O(h) in
        # mean-square sup norm for state-dependent control-free sigma;
        # slope of E[sup |y_h - y_{h/2}|^2] vs h within 1 +- 0.3
        T = 1.0
        fine_steps = 128
        h_fine = T / fine_steps
        law = DelayLaw.degenerate(0.0)
        params = {"a1": -1.0, "s1": 0.2, "s1_x": 0.4}
        pairs = [(16, 32), (32, 64), (64, 128)]
        diffs = {p: [] for p in pairs}
        rng = np.random.default_rng(31)
        N = 2
        for rep in range(150):
            zf = rng.standard_normal((N, fine_steps, 1))
            dwf = math.sqrt(h_fine) * zf
            x_init = rng.normal(size=(N, 1))
            paths = {}
            for steps in (16, 32, 64, 128):
                s = fine_steps // steps
                h = T / steps
                zeta = dwf.reshape(N, steps, s, 1).sum(axis=2) / math.sqrt(h)
                model = make_model(grid=TimeGrid(0.0, T, h), params=params)
                b = simulate_nplayer(
                    model, ZERO_POLICIES, N, law, 0,
                    _noise_overrides={
                        "follower_noise": zeta,
                        "leader_noise": np.zeros((steps, 1)),
                        "follower_init": x_init,
                        "delays": np.zeros(N),
                    })
                paths[steps] = b.follower_paths
            for coarse, fine in pairs:
                s = fine // coarse
                gap = paths[coarse][:, :, 0] - paths[fine][:, ::s, 0]
                diffs[(coarse, fine)].append(np.max(gap ** 2, axis=1).mean())
        hs = np.array([T / coarse for coarse, _ in pairs])
        means = np.array([np.mean(diffs[p]) for p in pairs])
        slope = np.polyfit(np.log(hs), np.log(means), 1)[0]
        assert abs(slope - 1.0) <= 0.3, (slope, means)


class TestCosts:
    def test_zero_cost_zero_states(self):
        model = make_model(params={"cost0_terminal": 1.0})
        b = simulate_nplayer(model, ZERO_POLICIES, 2, DelayLaw.degenerate(0.0), 0)
        J0, Ji = evaluate_costs_nplayer(b, model)
        assert J0 == 0.0
        assert Ji == [0.0, 0.0]

    def test_constant_running_cost_exact(self):
        # f0 = 1, h = 0: rectangle rule on a constant is exactly T
        grid = TimeGrid(-0.125, 1.0, 1.0 / 64)
        model = make_model(grid=grid, params={"cost0_const": 1.0})
        b = simulate_nplayer(model, ZERO_POLICIES, 2, DelayLaw.degenerate(0.0), 0)
        J0, _ = evaluate_costs_nplayer(b, model)
        assert J0 == 1.0

    def test_quadratic_cost_on_drift_path(self):
        # path = t, running cost x^2: integral T^3/3 within h * T^2
        grid = TimeGrid(0.0, 1.0, 1.0 / 64)
        model = make_model(grid=grid, params={"b1": 1.0, "cost1_state": 1.0})
        policies = PolicySet(Policy("zero"), Policy("constant", {"value": 1.0}))
        b = simulate_nplayer(model, policies, 2, DelayLaw.degenerate(0.0), 0)
        _, Ji = evaluate_costs_nplayer(b, model)
        assert abs(Ji[0] - 1.0 / 3.0) <= (1.0 / 64)

    def test_terminal_cost(self):
        grid = TimeGrid(0.0, 0.5, 1.0 / 32)
        model = make_model(grid=grid, params={"b1": 1.0, "cost1_terminal": 1.0})
        policies = PolicySet(Policy("zero"), Policy("constant", {"value": 1.0}))
        b = simulate_nplayer(model, policies, 2, DelayLaw.degenerate(0.0), 0)
        _, Ji = evaluate_costs_nplayer(b, model)
        assert Ji[0] == pytest.approx(0.25, abs=1e-12)

    def test_control_cost_exact(self):
        # f1 = |v|^2 with constant control c: J = c^2 T exactly
        grid = TimeGrid(0.0, 1.0, 1.0 / 32)
        model = make_model(grid=grid, params={"cost1_control": 1.0})
        policies = PolicySet(Policy("zero"), Policy("constant", {"value": 0.7}))
        b = simulate_nplayer(model, policies, 2, DelayLaw.degenerate(0.0), 0)
        _, Ji = evaluate_costs_nplayer(b, model)
        assert Ji[0] == pytest.approx(0.49, abs=1e-12)

    def test_costs_deterministic_given_bundle(self):
        model = make_model(params={"a1": -0.5, "s1": 0.3, "cost1_state": 1.0,
                                   "cost0_track": 0.5},
                           feats=("mean",),
                           follower_init={"family": "normal", "params": {}})
        b = simulate_nplayer(model, ZERO_POLICIES, 5, DelayLaw.degenerate(0.0), 3)
        assert evaluate_costs_nplayer(b, model) == evaluate_costs_nplayer(b, model)
