import json
import math

import numpy as np
import pytest

from misivqr.dgp import Dataset, sample_dataset
from misivqr.errors import ConfigError
from misivqr.identify import ParamPoint
from misivqr.inference import (
    InferenceConfig,
    TestResult,
    _PenalisedProfiler,
    bootstrap_multipliers,
    confidence_interval,
    critical_value_min_resampling,
    discard_statistics,
    min_resampling_draws,
    profiled_statistic,
    test_theta,
    test_thetas,
    y_window,
)
from misivqr.moments import MomentSystem, MultiplierSums, build_moment_spec, evaluate_moments, test_statistic

THETA = math.sqrt(0.5) - 0.5


@pytest.fixture(scope="module")
def data1(design_models):
    return sample_dataset(design_models[1], 1000, 31)


@pytest.fixture(scope="module")
def data2(design_models):
    return sample_dataset(design_models[2], 1000, 32)


@pytest.fixture(scope="module")
def config():
    return InferenceConfig(n_bootstrap=200, seed=5, theta_grid=(0.0, 0.6, 0.04))


# configuration


@pytest.mark.parametrize(
    "kwargs",
    [dict(alpha=0.0), dict(alpha=1.5), dict(n_bootstrap=99), dict(theta_grid=(0, 1, 0)), dict(theta_grid=(1, 0, 0.1)),
     dict(kappa=-1.0), dict(p_max=1.0), dict(refine_factor=1), dict(multiplier="rademacher")],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        InferenceConfig(**kwargs)


def test_config_defaults_and_round_trip():
    cfg = InferenceConfig()
    assert (cfg.alpha, cfg.n_bootstrap, cfg.y_points, cfg.p_points, cfg.refine_rounds) == (0.10, 500, 41, 21, 2)
    assert cfg.kappa_n(1000) == pytest.approx(math.sqrt(math.log(1000)))
    assert InferenceConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.fingerprint() == InferenceConfig().fingerprint() != cfg.replace(alpha=0.05).fingerprint()
    with pytest.raises(ConfigError):
        InferenceConfig.from_dict({"alpha": 0.1, "bogus": 1})


def test_theta_grid_contains_endpoints_and_halving_nests():
    cfg = InferenceConfig(theta_grid=(-0.2, 0.8, 0.02))
    th = cfg.thetas()
    assert th.size == 51 and th[0] == -0.2 and th[-1] == 0.8
    fine = cfg.replace(theta_grid=(-0.2, 0.8, 0.01)).thetas()
    assert set(th.tolist()) <= set(fine.tolist())


# profiling


def test_window_and_empty_window(data1):
    lo, hi = y_window(data1, 0.3)
    assert lo == pytest.approx(data1.y.min()) and hi == pytest.approx(data1.y.max() - 0.3)
    with pytest.raises(ConfigError):
        y_window(data1, 5.0)
    with pytest.raises(ConfigError):
        profiled_statistic(data1, build_moment_spec(data1, 0.5, 4), 5.0, InferenceConfig())


def test_profile_is_deterministic_and_minimal(data2, config):
    spec = build_moment_spec(data2, 0.5, 4)
    a = profiled_statistic(data2, spec, 0.25, config)
    b = profiled_statistic(data2, spec, 0.25, config)
    assert a == b
    assert a.point.theta == pytest.approx(0.25)
    # never above the statistic at any probed coarse grid point
    sys_ = MomentSystem(data2, spec)
    lo, hi = a.window
    ys = np.linspace(lo, hi, config.y_points)
    ps = np.linspace(0, config.p_max, config.p_points)
    grid = sys_.statistic(ys[:, None, None], ys[:, None, None] + 0.25, ps[None, :, None], ps[None, None, :])
    feasible = ps[:, None] + ps[None, :] < 1
    assert a.statistic <= grid[:, feasible].min() + 1e-12
    assert a.statistic == pytest.approx(test_statistic(evaluate_moments(data2, spec, a.point)), rel=1e-10)


def test_refinement_never_hurts(data2, config):
    spec = build_moment_spec(data2, 0.5, 4)
    stats = [profiled_statistic(data2, spec, 0.3, config.replace(refine_rounds=r)).statistic for r in (0, 1, 2)]
    assert stats[0] >= stats[1] >= stats[2]


@pytest.mark.parametrize("p_points, rounds", [(3, 0), (21, 2)])
def test_pure_noise_treatment_respects_probability_constraint(p_points, rounds):
    # with D independent of (Y, Z) and P(D = 1) = 1/2, every (y0, y1) fits at the excluded vertex p0 = p1 = 1/2
    gen = np.random.default_rng(0)
    n = 800
    data = Dataset(gen.random(n), gen.integers(0, 2, n), gen.integers(0, 2, n))
    spec = build_moment_spec(data, 0.5, 4)
    cfg = InferenceConfig(n_bootstrap=100, p_points=p_points, refine_rounds=rounds)
    for theta in (-0.6, 0.1, 0.7):
        prof = profiled_statistic(data, spec, theta, cfg)
        assert prof.point.p0 + prof.point.p1 < 1
        assert math.isfinite(prof.statistic)
    res = test_theta(data, spec, 0.7, cfg)
    assert math.isfinite(res.statistic) and math.isfinite(res.critical_value)


# bootstrap pieces


def test_multipliers_are_seeded_per_draw():
    a = bootstrap_multipliers(3, 100, 50)
    b = bootstrap_multipliers(3, 120, 50)
    np.testing.assert_array_equal(a, b[:100])
    assert not np.array_equal(a, bootstrap_multipliers(4, 100, 50))


def test_slack_only_system_has_zero_critical_value():
    v = np.random.default_rng(0).standard_normal((500, 6))
    t = np.full(6, 50.0)  # every inequality far from binding
    draws = discard_statistics(v, t, np.zeros(6, dtype=bool), kappa=2.6)
    assert np.all(draws == 0.0)


def test_discard_keeps_equalities_and_binding_inequalities():
    v = np.array([[1.0, -2.0, -3.0, -1.0]])
    is_eq = np.array([True, False, False, False])
    t = np.array([0.0, 0.5, 10.0, -1.0])
    assert discard_statistics(v, t, is_eq, 2.0)[0] == pytest.approx(1 + 4 + 1)


def test_penalised_objective_matches_contribution_matrix(data2):
    spec = build_moment_spec(data2, 0.5, 4)
    sys_ = MomentSystem(data2, spec)
    xi = bootstrap_multipliers(1, 100, data2.n)
    sums = MultiplierSums(sys_, xi)
    kappa, theta = 2.5, 0.2
    prof = _PenalisedProfiler(sys_, sums, theta, kappa)
    pt = ParamPoint(0.44, 0.64, 0.18, 0.26)
    ev = evaluate_moments(data2, spec, pt, sys_)
    g = ev.contributions
    v = xi @ (g - g.mean(0)) * ev.scale / (math.sqrt(data2.n) * ev.sigmas) + ev.standardized() / kappa
    expected = np.sum(v[:, :2] ** 2, 1) + np.sum(np.minimum(v[:, 2:], 0) ** 2, 1)
    got = (prof.eq_part(np.float64(pt.y0), pt.p0, pt.p1, False)
           + prof.ineq_part(0, np.float64(pt.p0), False) + prof.ineq_part(1, np.float64(pt.p1), False))
    np.testing.assert_allclose(got, expected, rtol=1e-9)
    grid = prof.eq_part_grid(pt.y0, np.array([[pt.p0]]), np.array([[pt.p1]]))[:, 0, 0]
    np.testing.assert_allclose(grid + prof.ineq_part(0, np.float64(pt.p0), False)
                               + prof.ineq_part(1, np.float64(pt.p1), False), expected, rtol=1e-9)


def test_min_resampling_draws_are_nonnegative_and_pr_is_a_minimum(data2, config):
    spec = build_moment_spec(data2, 0.5, 4)
    dr, pr = min_resampling_draws(data2, spec, THETA, config)
    assert dr.shape == pr.shape == (config.n_bootstrap,)
    assert np.all(dr >= 0) and np.all(pr >= 0)
    # the penalised profile is a minimum, so it cannot exceed its value at the sample argmin
    sys_ = MomentSystem(data2, spec)
    xi = bootstrap_multipliers(config.seed, config.n_bootstrap, data2.n)
    prof = profiled_statistic(data2, spec, THETA, config)
    pp = _PenalisedProfiler(sys_, MultiplierSums(sys_, xi), THETA, config.kappa_n(data2.n))
    p = prof.point
    at_argmin = (pp.eq_part(np.float64(p.y0), p.p0, p.p1, False) + pp.ineq_part(0, np.float64(p.p0), False)
                 + pp.ineq_part(1, np.float64(p.p1), False))
    assert np.all(pr <= at_argmin + 1e-9)


# tests


def test_min_critical_value_below_discard(data2, config):
    res = test_theta(data2, build_moment_spec(data2, 0.5, 4), THETA, config)
    assert res.critical_value <= res.critical_value_discard + 1e-12
    assert res.critical_value >= 0
    assert res.reject == (res.statistic > res.critical_value)


def test_critical_value_function_agrees_with_test(data2, config):
    spec = build_moment_spec(data2, 0.5, 4)
    cv = critical_value_min_resampling(data2, spec, 0.3, config)
    assert cv == test_theta(data2, spec, 0.3, config).critical_value


def test_alpha_one_rejects_everything(data2, config):
    spec = build_moment_spec(data2, 0.5, 4)
    res = test_thetas(data2, spec, [0.1, 0.3, 0.5], config.replace(alpha=1.0))
    assert all(r.critical_value == 0.0 for r in res)
    assert all(r.reject == (r.statistic > 0) for r in res)


def test_gross_violation_is_rejected(data1):
    spec = build_moment_spec(data1, 0.5, 4)
    res = test_theta(data1, spec, 0.9, InferenceConfig(n_bootstrap=200, seed=2))
    assert res.reject and res.statistic > 10 * max(res.critical_value, 1.0)


def test_truth_is_accepted(data1, data2):
    for data in (data1, data2):
        res = test_theta(data, build_moment_spec(data, 0.5, 4), THETA, InferenceConfig(n_bootstrap=200, seed=2))
        assert not res.reject


def test_determinism(data2, config):
    spec = build_moment_spec(data2, 0.5, 4)
    a = test_thetas(data2, spec, [0.1, 0.4], config)
    b = test_thetas(data2, spec, [0.1, 0.4], config)
    assert a == b


def test_unrepresentable_theta_rejected_inside_grid(data2, config):
    res = test_thetas(data2, build_moment_spec(data2, 0.5, 4), [3.0], config)[0]
    assert res.reject and res.statistic == math.inf and res.point is None


# confidence sets


@pytest.fixture(scope="module")
def interval(data1, config):
    return confidence_interval(data1, build_moment_spec(data1, 0.5, 4), config)


def test_interval_contains_truth_and_excludes_far_values(interval):
    lo, hi = interval.hull
    assert lo <= THETA + 0.04 and hi >= THETA
    assert not interval.contains(0.6)


def test_level_nesting(data1, config, interval):
    spec = build_moment_spec(data1, 0.5, 4)
    wide = confidence_interval(data1, spec, config.replace(alpha=0.05))
    narrow = confidence_interval(data1, spec, config.replace(alpha=0.5))
    assert set(narrow.accepted.tolist()) <= set(interval.accepted.tolist()) <= set(wide.accepted.tolist())
    assert wide.hull[0] <= narrow.hull[0] and narrow.hull[1] <= wide.hull[1]


def test_grid_halving_moves_hull_by_at_most_one_step(data1, config, interval):
    spec = build_moment_spec(data1, 0.5, 4)
    fine = confidence_interval(data1, spec, config.replace(theta_grid=(0.0, 0.6, 0.02)))
    step = config.theta_grid[2]
    assert abs(fine.hull[0] - interval.hull[0]) <= step + 1e-12
    assert abs(fine.hull[1] - interval.hull[1]) <= step + 1e-12


def test_all_rejected_grid_reports_diagnostics(data1, config):
    cs = confidence_interval(data1, None, config.replace(theta_grid=(0.8, 0.9, 0.05)))
    assert cs.empty and cs.hull is None
    assert cs.diagnostics["all_rejected"] and cs.diagnostics["closest_theta"] is not None


def test_outputs(tmp_path, interval):
    doc = json.loads(interval.to_json())
    assert doc["hull"] == list(interval.hull)
    assert len(doc["results"]) == interval.thetas.size
    interval.write_csv(tmp_path / "ci.csv")
    rows = (tmp_path / "ci.csv").read_text().splitlines()
    assert rows[0] == "theta,statistic,critical_value,reject" and len(rows) == interval.thetas.size + 1


def test_result_json():
    r = TestResult(0.2, 1.5, 2.0, False, ParamPoint(0.3, 0.5, 0.1, 0.1))
    doc = json.loads(json.dumps(r.to_dict()))
    assert doc["point"]["theta"] == pytest.approx(0.2) and doc["reject"] is False
