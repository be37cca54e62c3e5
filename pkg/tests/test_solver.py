import numpy as np
import pytest

import smoothfit as sf
from smoothfit.problems import catalog_entry, load_problem_config, perpetual_put_value, put_free_boundary
from smoothfit.solver import (
    MonotonicityError,
    SolverError,
    SolverNonConvergence,
    evaluate_policy,
    intervention_targets,
)
from helpers import simple_problem


def test_discretize_pure_diffusion_row():
    # unit diffusion 0.5 sigma^2 = 1: interior weights (1/h^2, -2/h^2, 1/h^2)
    prob, grid = simple_problem(
        sigma="1.4142135623730951", box={"lower": [0.0], "upper": [1.0], "points": [11]}
    )
    gen = sf.discretize(prob, grid, [0.0])
    h = grid.spacing[0]
    row = gen.matrix[5].toarray().ravel()
    assert row[4] == pytest.approx(1 / h**2, rel=1e-12)
    assert row[5] == pytest.approx(-2 / h**2, rel=1e-12)
    assert row[6] == pytest.approx(1 / h**2, rel=1e-12)


def test_discretize_upwinds_positive_drift():
    prob, grid = simple_problem(beta="1", box={"lower": [0.0], "upper": [1.0], "points": [11]})
    gen = sf.discretize(prob, grid, [0.0])
    h = grid.spacing[0]
    row = gen.matrix[5].toarray().ravel()
    assert row[5] == pytest.approx(-1 / h, rel=1e-12)
    assert row[6] == pytest.approx(1 / h, rel=1e-12)
    assert row[4] == 0.0


def test_generator_on_constants_gives_minus_rho():
    for key in ("b1", "b2", "b4"):
        e = catalog_entry(key)
        gen = sf.discretize(e.problem, e.grid, e.problem.control_set.points[0])
        out = gen.apply_linear(np.ones(e.grid.node_count))
        rho = e.problem.coefficients.rho_at(e.grid.nodes(), e.problem.control_set.points[0])
        assert np.max(np.abs(out[gen.interior_mask] + rho[gen.interior_mask])) <= 1e-10


def test_generator_interior_offdiagonals_nonnegative():
    for key in ("b1", "b2", "b3", "b4", "b5"):
        e = catalog_entry(key)
        for a in e.problem.control_set.points[:: max(1, e.problem.control_set.size // 3)]:
            gen = sf.discretize(e.problem, e.grid, a)
            assert gen.min_offdiag_interior() >= -1e-12


def test_cross_terms_assemble_and_stay_monotone():
    # constant correlated diffusion within the dominance bound
    prob, grid = simple_problem(
        n=2, m=2,
        sigma=[["1", "0"], ["0.5", "1"]],
        rho="1",
        box={"lower": [0.0, 0.0], "upper": [1.0, 1.0], "points": [9, 9]},
    )
    gen = sf.discretize(prob, grid, [0.0])
    assert gen.min_offdiag_interior() >= -1e-12
    # generator annihilates constants
    ones = np.ones(grid.node_count)
    assert np.max(np.abs(gen.apply_linear(ones)[gen.interior_mask] + 1.0)) <= 1e-10
    # and reproduces the quadratic cross term: 0.5 tr(c D2(x1 x2)) = c_12
    f = grid.nodes()[:, 0] * grid.nodes()[:, 1]
    expected = 0.5  # c_12 = (sigma sigma*)_12 = 0.5
    drift_free = gen.apply_linear(f) + 1.0 * f  # add back rho * f
    assert np.max(np.abs(drift_free[gen.interior_mask] - expected)) <= 1e-9


def test_cross_terms_negative_correlation_split():
    prob, grid = simple_problem(
        n=2, m=2,
        sigma=[["1", "0"], ["-0.5", "1"]],
        rho="1",
        box={"lower": [0.0, 0.0], "upper": [1.0, 1.0], "points": [9, 9]},
    )
    gen = sf.discretize(prob, grid, [0.0])
    assert gen.min_offdiag_interior() >= -1e-12
    f = grid.nodes()[:, 0] * grid.nodes()[:, 1]
    drift_free = gen.apply_linear(f) + 1.0 * f
    assert np.max(np.abs(drift_free[gen.interior_mask] + 0.5)) <= 1e-9


def test_discretize_rejects_dominant_cross_terms():
    prob, grid = simple_problem(
        n=2, m=2,
        sigma=[["1", "0"], ["0.97", "0.1"]],
        rho="1",
        box={"lower": [0.0, 0.0], "upper": [1.0, 1.0], "points": [9, 9]},
    )
    with pytest.raises(MonotonicityError, match="node"):
        sf.discretize(prob, grid, [0.0])


def test_policy_iteration_constant_equation():
    prob, grid = simple_problem(g="3", rho="0.5",
                                box={"lower": [0.0], "upper": [1.0], "points": [21]})
    v, policy, report = sf.policy_iteration(prob, grid, tol=1e-10, max_iter=20)
    assert np.max(np.abs(v.values - 6.0)) <= 1e-12
    assert report.residual <= 1e-12
    assert report.converged


def test_policy_iteration_policy_attains_discrete_argmax(b4_solution):
    e, v, policy, _ = b4_solution
    gens = [sf.discretize(e.problem, e.grid, a) for a in e.problem.control_set.points]
    stacked = np.stack([g.apply(v.values) for g in gens])
    best = stacked.max(axis=0)
    chosen = stacked[policy.control_index, np.arange(e.grid.node_count)]
    assert np.max(np.abs(best - chosen)) <= 1e-12


def test_policy_iteration_consistent_with_pointwise_hamiltonian(b4_solution):
    # discrete residual ~ 0 implies the pointwise Hamiltonian at difference
    # quotients is O(h) small (upwind vs central mismatch)
    e, v, _, _ = b4_solution
    h = e.grid.spacing[0]
    for x in (-1.0, -0.3, 0.4, 1.1):
        k = e.grid.nearest_flat_index(np.array([x]))
        p = (v.values[k + 1] - v.values[k - 1]) / (2 * h)
        P = (v.values[k + 1] - 2 * v.values[k] + v.values[k - 1]) / h**2
        hval, _ = sf.eval_H(e.problem, e.grid.node_coords(k), v.values[k], [p], [[P]])
        assert abs(hval) <= 50 * h


def test_policy_iteration_self_convergence_first_order():
    e = catalog_entry("b4")
    diffs = {}
    prev = None
    for npts in (1001, 2001, 4001):
        grid = sf.build_grid([-2.0], [2.0], [npts])
        v, _, _ = sf.policy_iteration(e.problem, grid, tol=1e-10, max_iter=60)
        if prev is not None:
            xs = np.linspace(-1.0, 1.0, 401)[:, None]  # inner half of the box
            diffs[npts] = float(np.max(np.abs(v.interpolate(xs) - prev.interpolate(xs))))
        prev = v
    h_coarse = 4.0 / 1000
    assert diffs[2001] <= 0.2 * h_coarse
    # halving the spacing halves the disagreement (first-order scheme)
    assert 0.3 <= diffs[4001] / diffs[2001] <= 0.7


def test_policy_iteration_nonconvergence_carries_partial():
    e = catalog_entry("b4")
    with pytest.raises(SolverNonConvergence) as err:
        sf.policy_iteration(e.problem, e.grid, tol=1e-14, max_iter=1)
    v, policy, report = err.value.partial
    assert not report.converged
    assert v.values.shape == (e.grid.node_count,)


def test_rho_min_declared_violation():
    e = catalog_entry("b4")
    with pytest.raises(SolverError, match="rho_min"):
        sf.policy_iteration(e.problem, e.grid, tol=1e-8, rho_min=2.0)


def test_rho_min_must_be_positive():
    prob, grid = simple_problem(g="1", rho="0")
    with pytest.raises(SolverError, match="rho"):
        sf.policy_iteration(prob, grid, tol=1e-8)


def test_solve_obstacle_zero_payoff_stops_everywhere():
    prob, grid = simple_problem(
        problem_class="OptimalStopping", obstacle="0", rho="1", sigma="0.3",
        box={"lower": [0.0], "upper": [1.0], "points": [41]},
    )
    v, stop, report = sf.solve_obstacle(prob, grid, tol=1e-10)
    assert np.max(np.abs(v.values)) <= 1e-12
    assert stop.all()


def test_solve_obstacle_dominant_payoff():
    prob, grid = simple_problem(
        problem_class="OptimalStopping", obstacle="100 + x1", rho="1", sigma="0.3",
        box={"lower": [0.0], "upper": [1.0], "points": [41]},
    )
    v, stop, _ = sf.solve_obstacle(prob, grid, tol=1e-10)
    psi = prob.obstacle_at(grid.nodes())
    assert np.max(np.abs(v.values - psi)) <= 1e-10
    assert stop.all()


def test_solve_obstacle_b1_against_oracle(b1_solution):
    e, v, stop, report = b1_solution
    x = e.grid.nodes()[:, 0]
    bstar = put_free_boundary(1.0, 0.0, 0.2, 0.05)
    bhat = x[stop].max()
    assert abs(bhat - bstar) / bstar <= 0.01
    oracle = perpetual_put_value(x, 1.0, 0.0, 0.2, 0.05)
    inner = (x >= 0.01 + 3.99 / 4) & (x <= 4.0 - 3.99 / 4)
    assert np.max(np.abs(v.values - oracle)[inner]) <= 2e-3
    # complementarity: dominance and one-sided equation residual
    psi = e.problem.obstacle_at(e.grid.nodes())
    assert np.min(v.values - psi) >= -1e-8
    res = sf.supersolution_residual(v, e.problem)
    assert res.min_interior >= -1e-8


def test_solve_obstacle_comparison_in_payoff(b1_solution):
    e, v, _, _ = b1_solution
    psi = e.problem.obstacle_at(e.grid.nodes())
    v_up, _, _ = sf.solve_obstacle(e.problem, e.grid, tol=1e-8,
                                   obstacle_values=psi + 0.1)
    assert np.min(v_up.values - v.values) >= -1e-9


def test_policy_iteration_comparison_in_reward(b4_solution):
    e, v, _, _ = b4_solution
    cfg_up, grid = simple_problem(
        beta="a1 - x1", sigma="0.1", g="-(x1^2) - 0.1 * a1^2 + 0.1", rho="1",
        controls=[(a,) for a in np.linspace(-1, 1, 21)],
        box={"lower": [-2.0], "upper": [2.0], "points": [2001]},
    )
    v_up, _, _ = sf.policy_iteration(cfg_up, grid, tol=1e-8, max_iter=60)
    assert np.min(v_up.values - v.values) >= -1e-9
    # constant reward shift moves the value by its discounted worth
    assert np.max(np.abs(v_up.values - v.values - 0.1)) <= 1e-7


def test_intervention_operator_examples():
    grid = sf.build_grid([-1.0], [1.0], [81])
    zero = sf.GridFunction(grid, np.zeros(81))
    out = sf.intervention_operator(zero, 1.0, 0.5)
    assert np.max(np.abs(out.values + 0.5)) <= 1e-14

    affine = sf.GridFunction.from_callable(grid, lambda x: 0.3 * x[:, 0])
    out = sf.intervention_operator(affine, 0.5, 0.1)  # slope below the unit cost
    assert np.max(np.abs(out.values - (affine.values - 0.1))) <= 1e-12

    vee = sf.GridFunction.from_callable(grid, lambda x: np.abs(x[:, 0]))
    got = sf.intervention_operator(vee, 0.5, 0.1)
    # independent brute force over nodes
    nodes = grid.nodes()[:, 0]
    brute = np.max(vee.values[None, :] - 0.5 * np.abs(nodes[None, :] - nodes[:, None]) - 0.1, axis=1)
    assert np.max(np.abs(got.values - brute)) <= 1e-14
    k0 = grid.flat_index([40])
    assert got.values[k0] == pytest.approx(0.4, abs=1e-14)


def test_intervention_operator_requires_positive_costs():
    grid = sf.build_grid([-1.0], [1.0], [11])
    zero = sf.GridFunction(grid, np.zeros(11))
    with pytest.raises(SolverError):
        sf.intervention_operator(zero, 0.0, 0.5)


def test_impulse_qvi_large_fixed_cost_means_no_action():
    prob, grid = simple_problem(
        problem_class="ImpulseControl", beta="-x1", sigma="0.3", g="-(x1^2)", rho="1",
        impulse_costs={"c0": 0.1, "c1": 1000.0},
        box={"lower": [-2.0], "upper": [2.0], "points": [201]},
    )
    v, action, report = sf.solve_impulse_qvi(prob, grid, tol=1e-9)
    assert not action.any()
    v_free = evaluate_policy(prob, grid, np.zeros(grid.node_count, dtype=np.int64))
    assert np.max(np.abs(v.values - v_free.values)) <= 1e-8


def test_impulse_qvi_zero_reward():
    prob, grid = simple_problem(
        problem_class="ImpulseControl", beta="-x1", sigma="0.3", g="0", rho="1",
        impulse_costs={"c0": 1.0, "c1": 0.5},
        box={"lower": [-2.0], "upper": [2.0], "points": [201]},
    )
    v, action, _ = sf.solve_impulse_qvi(prob, grid, tol=1e-10)
    assert np.max(np.abs(v.values)) <= 1e-10
    mv = sf.intervention_operator(v, 1.0, 0.5)
    gap = v.values - mv.values
    assert np.min(gap) >= 0.5 - 1e-10  # intervening only pays the fixed cost


def test_impulse_qvi_benchmark_complementarity(b5_solution):
    e, v, action, report = b5_solution
    assert action.any()
    assert report.intervention_margin >= -1e-8
    assert report.pde_margin >= -1e-8
    # outer iterates from the upper start never increase
    assert max(report.outer_max_increase[1:]) <= 1e-8


def test_impulse_qvi_two_starts_agree():
    e = catalog_entry("b5")
    grid = sf.build_grid([-2.0], [2.0], [201])
    v_up, _, _ = sf.solve_impulse_qvi(e.problem, grid, tol=1e-9, start="upper")
    v_lo, _, _ = sf.solve_impulse_qvi(e.problem, grid, tol=1e-9,
                                      start="no_intervention")
    assert np.max(np.abs(v_up.values - v_lo.values)) <= 1e-6


def test_supersolution_residual_shift(b1_solution):
    e, v, _, _ = b1_solution
    res = sf.supersolution_residual(v, e.problem)
    shifted = sf.GridFunction(e.grid, v.values + 0.5)
    res_up = sf.supersolution_residual(shifted, e.problem)
    gain = (res_up.field - res.field)[res.interior_mask]
    assert np.min(gain) >= 0.05 * 0.5 - 1e-9  # rho_min * shift


def test_solve_report_json_schema(b4_solution):
    _, _, _, report = b4_solution
    d = report.to_json_dict()
    assert set(d) == {"iterations", "residual", "policy_changes", "ordering", "converged"}
    assert d["ordering"] == "sequential"
    assert d["converged"] is True


def test_policy_iteration_residual_monotone_diagnostic(b4_solution):
    _, _, _, report = b4_solution
    assert report.monotone_residual  # flagged, not fatal, when violated
    assert report.notes == []
