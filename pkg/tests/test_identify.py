import json
import math

import numpy as np
import pytest
from scipy.optimize import linprog

from conftest import make_model, oracle_sqrt_linear
from misivqr.dgp import QuantileFamily, StructuralModel, population_joint
from misivqr.errors import ConstructionError, DomainError
from misivqr.identify import (
    ParamPoint,
    PerturbedModel,
    construct_perturbation,
    density_caps,
    feasibility,
    identified_set,
    verify_observational_equivalence,
)

REFERENCE_SETS = {1: (0.21, 0.37), 2: (0.13, 0.37), 3: (0.12, 0.36)}


@pytest.fixture(scope="module")
def sets(design_models):
    return {k: identified_set(population_joint(m), 0.5) for k, m in design_models.items()}


def lp_feasible(pop, y0, y1, tau, slack):
    """Feasibility of the restrictions by linear programming with the box widened by ``slack``."""
    caps = density_caps(pop)
    a_eq, b_eq = [], []
    for z in (0, 1):
        a_eq.append([float(pop.cdf_y(z, y1)) - tau, float(pop.cdf_y(z, y0)) - tau])  # (p0, p1)
        b_eq.append(float(pop.subcdf_y_d(0, z, y0) + pop.subcdf_y_d(1, z, y1)) - tau)
    res = linprog(
        c=[0, 0], A_ub=[[1, 1]], b_ub=[1 - 1e-9 + slack], A_eq=a_eq, b_eq=b_eq,
        bounds=[(-slack, caps[0] + slack), (-slack, caps[1] + slack)], method="highs",
    )
    return res.status == 0


# parameter points


def test_param_point_invariants():
    assert ParamPoint(0.2, 0.5, 0.1, 0.2).theta == pytest.approx(0.3)
    for p0, p1 in [(-0.1, 0.1), (0.6, 0.4), (0.2, -1e-3)]:
        with pytest.raises(DomainError):
            ParamPoint(0.0, 0.1, p0, p1)


# caps


@pytest.mark.parametrize("design_id", [1, 2])
def test_caps_equal_misclassification_rates_without_endogeneity(design_models, design_id):
    # with rho = 0 the infimum of P(D = 1 | Y, Z) is reached as y -> 0 and equals p0
    caps = density_caps(population_joint(design_models[design_id]))
    assert caps[0] == pytest.approx(0.25, abs=1e-6)


@pytest.mark.parametrize("design_id, rho, gamma", [(1, 0.0, 0.5), (2, 0.0, 0.25), (3, 0.5, 0.25)])
def test_caps_match_oracle(design_models, design_id, rho, gamma):
    caps = density_caps(population_joint(design_models[design_id]))
    oracle, _ = oracle_sqrt_linear(rho, gamma)
    assert caps == pytest.approx(oracle, abs=1e-9)


# feasibility


def test_truth_is_feasible_with_generating_witness(design_models):
    res = feasibility(population_joint(design_models[2]), 0.5, math.sqrt(0.5), 0.5)
    assert res.feasible
    assert (res.p0, res.p1) == pytest.approx((0.25, 0.25), abs=1e-6)


@pytest.mark.parametrize("design_id", [1, 2, 3])
def test_truth_contained_in_every_design(design_models, design_id):
    res = feasibility(population_joint(design_models[design_id]), 0.5, math.sqrt(0.5), 0.5)
    assert res.feasible


@pytest.mark.parametrize("family", ["sqrt_linear", "square"])
def test_no_misclassification_witness_is_zero(family):
    m = make_model(family, rho=0.3, gamma=0.25, p0=0.0, p1=0.0)
    fam = m.q_family
    res = feasibility(population_joint(m), float(fam.quantile(0, 0.5)), float(fam.quantile(1, 0.5)), 0.5)
    assert res.feasible
    assert (res.p0, res.p1) == pytest.approx((0.0, 0.0), abs=1e-8)


def test_far_point_infeasible(design_models):
    assert not feasibility(population_joint(design_models[2]), 0.99, 0.999, 0.5).feasible


@pytest.mark.parametrize("design_id", [2, 3])
def test_feasibility_agrees_with_linear_programming(design_models, design_id):
    pop = population_joint(design_models[design_id])
    gen = np.random.default_rng(design_id)
    checked = 0
    for y0, y1 in gen.uniform(0.05, 0.95, size=(60, 2)):
        strict = lp_feasible(pop, y0, y1, 0.5, -1e-6)
        loose = lp_feasible(pop, y0, y1, 0.5, 1e-6)
        ours = feasibility(pop, y0, y1, 0.5).feasible
        if strict:
            assert ours
            checked += 1
        if not loose:
            assert not ours
            checked += 1
    assert checked >= 50


def test_singular_system_line_search():
    # without an instrument both equations coincide; the truth must still be found
    m = make_model(gamma=0.0)
    res = feasibility(population_joint(m), 0.5, math.sqrt(0.5), 0.5)
    assert res.feasible
    assert 0 <= res.p0 <= 0.25 + 1e-9 and 0 <= res.p1 <= 0.25 + 1e-9


# identified sets


@pytest.mark.parametrize("design_id", [1, 2, 3])
def test_identified_set_matches_table(sets, design_id):
    lo, hi = sets[design_id].theta_interval
    assert lo == pytest.approx(REFERENCE_SETS[design_id][0], abs=0.01)
    assert hi == pytest.approx(REFERENCE_SETS[design_id][1], abs=0.01)


@pytest.mark.parametrize("design_id, rho, gamma", [(1, 0.0, 0.5), (2, 0.0, 0.25), (3, 0.5, 0.25)])
def test_identified_set_matches_independent_oracle(sets, design_id, rho, gamma):
    _, interval = oracle_sqrt_linear(rho, gamma)
    assert sets[design_id].theta_interval == pytest.approx(interval, abs=1e-9)


def test_identified_interval_reaches_truth_up_to_one_cell(sets):
    # the true theta is an endpoint for design 1 and generally lies off the grid
    for s in sets.values():
        lo, hi = s.theta_interval
        assert lo - s.grid_step <= math.sqrt(0.5) - 0.5 <= hi + s.grid_step


def test_witnesses_satisfy_constraints(sets, design_models):
    for k, s in sets.items():
        pop = population_joint(design_models[k])
        caps = density_caps(pop)
        idx = np.flatnonzero(s.feasible)
        sample = idx[:: max(1, idx.size // 40)]
        for i in sample:
            p0, p1 = s.p0[i], s.p1[i]
            assert 0 <= p0 <= caps[0] + 1e-9 and 0 <= p1 <= caps[1] + 1e-9 and p0 + p1 < 1
            for z in (0, 1):
                lhs = float(pop.subcdf_y_d(0, z, s.y0[i]) + pop.subcdf_y_d(1, z, s.y1[i])) - 0.5
                rhs = p1 * (float(pop.cdf_y(z, s.y0[i])) - 0.5) + p0 * (float(pop.cdf_y(z, s.y1[i])) - 0.5)
                assert lhs == pytest.approx(rhs, abs=1e-7)


def test_interval_spans_feasible_thetas(sets):
    s = sets[3]
    th = (s.y1 - s.y0)[s.feasible]
    assert s.theta_interval == pytest.approx((th.min(), th.max()), abs=1e-12)


def test_refinement_moves_by_at_most_one_cell(design_models):
    pop = population_joint(design_models[2])
    coarse = identified_set(pop, 0.5, grid_step=0.01).theta_interval
    fine = identified_set(pop, 0.5, grid_step=0.005).theta_interval
    assert fine[0] >= coarse[0] - 0.01 - 1e-12 and fine[1] <= coarse[1] + 0.01 + 1e-12


def test_empty_window_reports_diagnostics(design_models):
    s = identified_set(population_joint(design_models[2]), 0.5, y_window=(0.9, 1.0), grid_step=0.01)
    assert s.empty and "reason" in s.diagnostics


def test_identified_set_serialisation(tmp_path, sets):
    s = sets[1]
    doc = json.loads(s.to_json())
    assert doc["theta_interval"] == list(s.theta_interval)
    assert doc["n_feasible"] == s.n_feasible
    s.write_csv(tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "y0,y1,p0,p1,theta" and len(lines) == s.n_feasible + 1


def test_grid_step_validation(design_models):
    with pytest.raises(DomainError):
        identified_set(design_models[1], 0.5, grid_step=0.0)


# non-identification witness


def test_perturbation_examples(square_model):
    pert = construct_perturbation(square_model, 0.1, d_bar=0, tau=0.5)
    assert pert.p_tilde == pytest.approx((0.15, 0.25), abs=1e-15)
    assert float(pert.t(0.5)) == pytest.approx(0.5 + 0.2 * (0.5 - 0.25), abs=1e-12)
    assert float(pert.q_tilde(0, 0.5)) == pytest.approx(0.55, abs=1e-9)
    assert verify_observational_equivalence(square_model, pert) < 1e-6


def test_zero_perturbation_is_identity(square_model):
    pert = construct_perturbation(square_model, 0.0)
    u = np.linspace(0, 1, 101)
    np.testing.assert_allclose(pert.t(u), u, atol=1e-15)
    assert pert.p_tilde == (square_model.p0, square_model.p1)
    assert verify_observational_equivalence(square_model, pert) < 1e-12


def test_self_distance_zero(design_models):
    assert verify_observational_equivalence(design_models[2], design_models[2]) == 0.0


def test_shifted_misclassification_is_detectable(square_model):
    other = square_model.replace(p0=square_model.p0 + 0.1)
    assert verify_observational_equivalence(square_model, other) > 0.01


@pytest.mark.parametrize("eps", [0.02, 0.05, 0.1, 0.2])
def test_equivalence_over_epsilon(square_model, eps):
    pert = construct_perturbation(square_model, eps)
    assert verify_observational_equivalence(square_model, pert) < 1e-6
    assert float(pert.q_tilde(0, 0.5)) != pytest.approx(0.5, abs=1e-6)


def test_perturbation_of_treated_arm():
    # for d_bar = 1 the relevant map is u -> u^2 under the square-root/linear family, which is Lipschitz
    base = make_model("sqrt_linear", rho=0.0, gamma=0.25)
    pert = construct_perturbation(base, 0.1, d_bar=1)
    assert pert.p_tilde == pytest.approx((0.25, 0.15))
    assert verify_observational_equivalence(base, pert) < 1e-6
    assert float(pert.q_tilde(1, 0.5)) != pytest.approx(math.sqrt(0.5), abs=1e-3)


def test_t_is_increasing_bijection(square_model):
    pert = construct_perturbation(square_model, 0.2)
    u = np.linspace(0, 1, 2001)
    t = pert.t(u)
    assert t[0] == pytest.approx(0) and t[-1] == pytest.approx(1) and np.all(np.diff(t) > 0)
    np.testing.assert_allclose(pert.t_inverse(t), u, atol=1e-12)


@pytest.mark.parametrize(
    "model_kwargs, eps, d_bar",
    [
        (dict(family="sqrt_linear"), 0.1, 0),  # sqrt map is not Lipschitz at 0
        (dict(family="square"), 0.1, 1),
        (dict(family="square", rho=0.3), 0.1, 0),  # endogenous treatment
        (dict(family="square"), 0.25, 0),  # epsilon reaches p0
    ],
)
def test_perturbation_preconditions(model_kwargs, eps, d_bar):
    with pytest.raises(ConstructionError):
        construct_perturbation(make_model(**model_kwargs), eps, d_bar=d_bar)


def test_perturbation_rejects_equal_quantiles():
    m = StructuralModel(QuantileFamily.affine(0.25, 0.5), 0.0, 0.25, (0.0, 1.0), (0.5, 0.5), 0.25, 0.25)
    with pytest.raises(ConstructionError):
        construct_perturbation(m, 0.1)


def test_perturbed_model_is_a_population(square_model):
    pert = construct_perturbation(square_model, 0.1)
    assert isinstance(pert, PerturbedModel)
    y = np.linspace(0, 1, 51)
    for z in (0, 1):
        total = pert.subcdf_y_d(0, z, y) + pert.subcdf_y_d(1, z, y)
        assert total[-1] == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.diff(total) >= -1e-12)
