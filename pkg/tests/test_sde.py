"""Path bundles, Euler stepping and moment estimators."""

import csv
import math

import numpy as np
import pytest

from ergolq.coefficients import (
    PeriodicCoefficientSet,
    builtin_scenarios,
    constant_coeff,
    constant_feedback,
    zero_feedback,
)
from ergolq.sde_engine import (
    PathBundle,
    SimulationError,
    contraction_check,
    derive_seed,
    estimate_gram_lower_bound,
    estimate_second_moment_decay,
    export_moments_csv,
    export_trajectory_csv,
    mean_se,
    poly_design,
    simulate_brownian,
    simulate_closed_loop,
    simulate_fundamental,
)


# ---------------------------------------------------------------------------
# bundles


def test_bundle_shapes_and_grid():
    bundle = PathBundle.generate(11, 6, 8, 3)
    assert bundle.increments.shape == (6, 24)
    assert bundle.dt == pytest.approx(1.0 / 8)
    assert bundle.duration == pytest.approx(3.0)
    assert bundle.token() == (11, 6, 8, 3, False)


def test_bundle_is_deterministic_and_seed_sensitive():
    a = PathBundle.generate(5, 4, 16, 2)
    b = PathBundle.generate(5, 4, 16, 2)
    c = PathBundle.generate(6, 4, 16, 2)
    np.testing.assert_array_equal(a.increments, b.increments)
    assert np.abs(a.increments - c.increments).max() > 0.0


def test_bundle_paths_are_counter_indexed():
    # growing the ensemble must not change existing paths
    small = PathBundle.generate(9, 2, 8, 2)
    big = PathBundle.generate(9, 6, 8, 2)
    np.testing.assert_array_equal(big.increments[:2], small.increments)


def test_antithetic_pairs_negate():
    bundle = PathBundle.generate(3, 8, 16, 2, antithetic=True)
    np.testing.assert_array_equal(bundle.increments[0::2], -bundle.increments[1::2])
    with pytest.raises(SimulationError):
        PathBundle.generate(3, 7, 16, 2, antithetic=True)


def test_increment_scale_matches_grid():
    bundle = PathBundle.generate(0, 2000, 64, 1)
    var = bundle.increments.var()
    assert abs(var - 1.0 / 64) < 3e-4


def test_phase_wraps_and_prefix_resets_at_boundaries():
    bundle = PathBundle.generate(1, 3, 8, 2)
    assert bundle.phase(0) == 0.0
    assert bundle.phase(3) == pytest.approx(3 / 8)
    assert bundle.phase(8) == 0.0
    assert bundle.phase(11) == pytest.approx(3 / 8)
    # period boundary: the prefix restarts empty
    for node in (0, 8, 16):
        pre = bundle.prefix(node)
        assert pre.increments.shape == (3, 0)
        np.testing.assert_array_equal(pre.partial_sum, np.zeros(3))
    pre = bundle.prefix(11)
    np.testing.assert_array_equal(pre.increments, bundle.increments[:, 8:11])
    np.testing.assert_allclose(pre.partial_sum, bundle.increments[:, 8:11].sum(axis=1))
    with pytest.raises(SimulationError):
        bundle.prefix(17)


def test_restrict_shares_increments():
    bundle = PathBundle.generate(2, 4, 8, 5)
    head = bundle.restrict(2)
    assert head.n_steps == 16
    assert head.increments.base is bundle.increments
    with pytest.raises(SimulationError):
        bundle.restrict(6)


def test_derive_seed_is_stable_and_tag_sensitive():
    assert derive_seed(7, "solve") == derive_seed(7, "solve")
    assert derive_seed(7, "solve") != derive_seed(7, "scan")
    assert derive_seed(7, "solve") != derive_seed(8, "solve")


def test_mean_se_plain_and_antithetic():
    vals = np.array([1.0, 3.0, 2.0, 4.0])
    m, se = mean_se(vals)
    assert m == pytest.approx(2.5)
    assert se == pytest.approx(vals.std(ddof=1) / 2.0)
    m2, se2 = mean_se(vals, antithetic=True)
    pair_means = np.array([2.0, 3.0])
    assert m2 == pytest.approx(2.5)
    assert se2 == pytest.approx(pair_means.std(ddof=1) / math.sqrt(2.0))


# ---------------------------------------------------------------------------
# Euler stepping


def test_closed_loop_step_matches_hand_recursion():
    scen = builtin_scenarios()["scalar-constant"]
    law = constant_feedback(scen, [[-0.4]], v=[0.1])
    bundle = PathBundle.generate(21, 5, 16, 2)
    traj = simulate_closed_loop(scen, law, np.array([0.7]), bundle)
    dt = bundle.dt
    x = np.full(5, 0.7)
    for k in range(bundle.n_steps):
        # dX = (a x + u + b) dt + sigma dW with u = -0.4 x + 0.1
        x = x + dt * (-x + (-0.4 * x + 0.1) + 1.0) + 1.0 * bundle.increments[:, k]
        np.testing.assert_allclose(traj.values[:, k + 1, 0], x, rtol=0, atol=1e-14)
    assert not traj.overflow.any()


def test_multiplicative_noise_step_is_exact():
    scen = builtin_scenarios()["scalar-moment-decay"]
    bundle = PathBundle.generate(4, 3, 32, 1)
    traj = simulate_closed_loop(scen, zero_feedback(scen), np.array([1.0]), bundle)
    factors = 1.0 + (-1.0) * bundle.dt + 0.5 * bundle.increments
    want = np.cumprod(factors, axis=1)
    np.testing.assert_allclose(traj.values[:, 1:, 0], want, rtol=1e-13)


def test_fundamental_agrees_with_state_for_linear_dynamics():
    scen = builtin_scenarios()["scalar-moment-decay"]
    bundle = PathBundle.generate(13, 4, 16, 2)
    phi = simulate_fundamental(scen, bundle)
    state = simulate_closed_loop(scen, zero_feedback(scen), np.array([1.0]), bundle)
    np.testing.assert_allclose(phi.values[:, :, 0, 0], state.values[:, :, 0], atol=1e-13)


def test_planar_fundamental_starts_at_identity():
    scen = builtin_scenarios()["planar-deterministic-periodic"]
    bundle = PathBundle.generate(3, 2, 8, 1)
    phi = simulate_fundamental(scen, bundle)
    assert phi.values.shape == (2, 9, 2, 2)
    np.testing.assert_array_equal(phi.values[:, 0], np.broadcast_to(np.eye(2), (2, 2, 2)))


def test_brownian_trajectory_is_cumsum():
    bundle = PathBundle.generate(8, 3, 8, 2)
    traj = simulate_brownian(bundle)
    np.testing.assert_allclose(
        traj.values[:, 1:, 0], np.cumsum(bundle.increments, axis=1), atol=1e-15
    )
    assert traj.values[:, 0, 0].max() == 0.0


def test_overflow_paths_are_flagged_and_nan():
    scen = builtin_scenarios()["scalar-constant"]
    runaway = constant_feedback(scen, [[6.0]])
    bundle = PathBundle.generate(2, 3, 16, 8)
    traj = simulate_closed_loop(scen, runaway, np.array([1.0]), bundle)
    assert traj.overflow.all()
    assert np.isnan(traj.values[:, -1, 0]).all()
    with pytest.raises(SimulationError):
        estimate_second_moment_decay(traj)  # all paths excluded


# ---------------------------------------------------------------------------
# moment estimators


def test_decay_estimate_matches_discrete_rate():
    scen = builtin_scenarios()["scalar-moment-decay"]
    bundle = PathBundle.generate(17, 20000, 64, 4, antithetic=True)
    traj = simulate_fundamental(scen, bundle)
    report = estimate_second_moment_decay(traj)
    dt = 1.0 / 64
    discrete = -math.log((1.0 - dt) ** 2 + 0.25 * dt) / dt
    assert report.stable
    assert abs(report.lambda_hat - discrete) < 0.15
    assert report.n_points == 5


def test_decay_estimate_needs_three_periods():
    scen = builtin_scenarios()["scalar-moment-decay"]
    bundle = PathBundle.generate(17, 16, 16, 2)
    traj = simulate_fundamental(scen, bundle)
    with pytest.raises(SimulationError):
        estimate_second_moment_decay(traj)


def test_contraction_deterministic_dynamics_fits_exactly():
    scen = builtin_scenarios()["scalar-constant"]
    law = constant_feedback(scen, [[-0.4]])
    bundle = PathBundle.generate(19, 32, 64, 6)
    report = contraction_check(scen, law, np.array([1.0]), np.array([-1.0]), bundle)
    # C = 0: the difference decays deterministically, so the fit is exact
    want = -2.0 * 64 * math.log(1.0 - 1.4 / 64)
    assert abs(report.lambda_hat - want) < 1e-9
    assert report.lambda_se < 1e-9
    assert report.r_squared > 1.0 - 1e-12
    assert report.stable


def test_contraction_identical_starts_short_circuits():
    scen = builtin_scenarios()["scalar-constant"]
    law = constant_feedback(scen, [[-0.4]])
    bundle = PathBundle.generate(19, 8, 16, 4)
    report = contraction_check(scen, law, np.ones(1), np.ones(1), bundle)
    assert report.diagnostics["identically_zero"]
    assert report.lambda_hat == math.inf


# ---------------------------------------------------------------------------
# regression features and the Gram proxy


def test_poly_design_values():
    from ergolq.coefficients import PathPrefix

    pre = PathPrefix(np.array([[0.2, -0.1], [0.3, 0.3]]))
    phase = 0.25
    design = poly_design(pre, phase, degree=3)
    z = np.array([0.1, 0.6]) / 0.5
    np.testing.assert_allclose(design[:, 0], 1.0)
    np.testing.assert_allclose(design[:, 1], z)
    np.testing.assert_allclose(design[:, 2], z**2)
    np.testing.assert_allclose(design[:, 3], z**3)
    assert poly_design(pre, 0.0, degree=3).shape == (2, 1)
    assert poly_design(pre, phase, degree=0).shape == (2, 1)


def test_gram_lower_bound_on_constant_scenario():
    scen = builtin_scenarios()["scalar-constant"]
    bundle = PathBundle.generate(29, 256, 32, 8, antithetic=True)
    report = estimate_gram_lower_bound(scen, bundle)
    # integral of exp(-2 s) over a long tail is about one half
    assert report.delta_hat > 0.3
    assert report.diagnostics["delta_raw"] == pytest.approx(report.delta_hat)
    assert "tail_bound" in report.diagnostics
    with pytest.raises(SimulationError):
        estimate_gram_lower_bound(scen, bundle.restrict(2))
    with pytest.raises(SimulationError):
        estimate_gram_lower_bound(scen, bundle, r_nodes=[40])


# ---------------------------------------------------------------------------
# exports


def test_trajectory_csv_round_trip(tmp_path):
    scen = builtin_scenarios()["scalar-constant"]
    bundle = PathBundle.generate(23, 3, 8, 1)
    traj = simulate_closed_loop(scen, zero_feedback(scen), np.zeros(1), bundle)
    out = tmp_path / "traj.csv"
    export_trajectory_csv(traj, out, max_paths=2)
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["path_id", "node_index", "t", "c0"]
    assert len(rows) == 1 + 2 * traj.n_nodes
    # repr round trip preserves every bit
    assert float(rows[1][3]) == traj.values[0, 0, 0]
    assert float(rows[10][3]) == traj.values[1, 0, 0]


def test_moments_csv_matches_trajectory(tmp_path):
    scen = builtin_scenarios()["scalar-constant"]
    bundle = PathBundle.generate(23, 16, 8, 1)
    traj = simulate_closed_loop(scen, zero_feedback(scen), np.zeros(1), bundle)
    out = tmp_path / "moments.csv"
    export_moments_csv(traj, out)
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "mean_c0", "second_moment", "stderr"]
    assert len(rows) == 1 + traj.n_nodes
    second = np.array([float(r[2]) for r in rows[1:]])
    np.testing.assert_allclose(second, traj.squared_norms().mean(axis=0), rtol=1e-15)
