import numpy as np
import pytest

import smoothfit as sf
from smoothfit.lattice import LatticeError
from smoothfit.problems import catalog_entry, put_exponent
from smoothfit.regularity import (
    DegenerateWitnessError,
    RangeKinkError,
    RankJumpError,
    RegularityError,
    detect_region_edge,
    fit_bound_constant,
    local_derivative_scale,
    subspace_basis,
)
from helpers import simple_problem


# ---------------------------------------------------------------------------
# semiconvexity


def test_semiconvexity_of_convex_kink_is_zero():
    g = sf.build_grid([-1.0], [1.0], [201])
    f = sf.GridFunction.from_callable(g, lambda x: np.abs(x[:, 0]))
    cert = sf.semiconvexity_constant(f, n_samples=3000, rng_seed=1)
    assert cert.c_estimate <= 1e-10


def test_semiconvexity_of_negative_square_is_one():
    g = sf.build_grid([-1.0], [1.0], [201])
    f = sf.GridFunction.from_callable(g, lambda x: -x[:, 0] ** 2)
    cert = sf.semiconvexity_constant(f, n_samples=3000, rng_seed=1)
    assert cert.c_estimate == pytest.approx(1.0, abs=0.02)
    assert cert.kappa == pytest.approx(2.0, abs=0.04)


def test_semiconvexity_of_solved_put_is_zero(b1_solution):
    _, v, _, _ = b1_solution
    cert = sf.semiconvexity_constant(v, n_samples=4000, rng_seed=2)
    assert cert.c_estimate <= 0.02


def test_semiconvexity_is_deterministic():
    g = sf.build_grid([-1.0], [1.0], [101])
    f = sf.GridFunction.from_callable(g, lambda x: np.sin(3 * x[:, 0]))
    a = sf.semiconvexity_constant(f, n_samples=1500, rng_seed=9)
    b = sf.semiconvexity_constant(f, n_samples=1500, rng_seed=9)
    assert a.c_estimate == b.c_estimate
    assert a.worst_triple == b.worst_triple


def test_semiconvexity_region_escape():
    g = sf.build_grid([-1.0], [1.0], [101])
    f = sf.GridFunction(g, np.zeros(101))
    with pytest.raises(LatticeError):
        sf.semiconvexity_constant(f, region=([-2.0], [1.0]))


# ---------------------------------------------------------------------------
# diffusion span


def test_range_basis_column_span():
    prob, _ = simple_problem(n=2, m=1, sigma=[["1"], ["0"]], rho="1")
    rb = sf.range_basis(prob, [0.3, 0.4])
    assert rb.rank == 1
    assert np.allclose(np.abs(rb.basis[:, 0]), [1.0, 0.0])
    assert np.allclose(rb.projector, np.diag([1.0, 0.0]))
    assert np.allclose(np.abs(rb.kernel_basis[:, 0]), [0.0, 1.0])


def test_range_basis_full_rank_projector_is_identity():
    prob, _ = simple_problem(n=2, m=2, sigma=[["1", "0"], ["0.3", "1"]], rho="1")
    rb = sf.range_basis(prob, [0.0, 0.0])
    assert rb.rank == 2
    assert np.allclose(rb.projector, np.eye(2), atol=1e-12)


def test_range_basis_b3_rank_one(b3_solution):
    e, _, _, _ = b3_solution
    rb = sf.range_basis(e.problem, [0.9, 0.2])
    assert rb.rank == 1
    assert np.allclose(np.abs(rb.basis[:, 0]), [1.0, 0.0], atol=1e-12)


def test_range_basis_trivial_flagged():
    prob, _ = simple_problem(sigma="0", rho="1")
    rb = sf.range_basis(prob, [0.0])
    assert rb.trivial
    assert rb.rank == 0


def test_projector_idempotent_and_symmetric():
    for key, pt in (("b2", [1.0, 1.5]), ("b3", [0.8, -0.3]), ("b4", [0.2])):
        e = catalog_entry(key)
        rb = sf.range_basis(e.problem, pt)
        P = rb.projector
        assert np.max(np.abs(P - P.T)) <= 1e-10
        assert np.max(np.abs(P @ P - P)) <= 1e-10


def test_range_basis_aggregates_controls():
    # each control contributes one direction; the union spans the plane
    prob, _ = simple_problem(
        n=2, m=1, sigma=[["a1"], ["1 - a1"]], rho="1",
        controls=((0.0,), (1.0,)),
    )
    rb = sf.range_basis(prob, [0.0, 0.0])
    assert rb.rank == 2


# ---------------------------------------------------------------------------
# directional smoothness


def field_problem():
    return simple_problem(
        n=2, m=2, sigma=[["1", "0"], ["0", "0"]], rho="1",
        box={"lower": [-1.0, -1.0], "upper": [1.0, 1.0], "points": [101, 101]},
    )


def test_directional_smoothness_detects_kernel_kink():
    prob, grid = field_problem()
    f = sf.GridFunction.from_callable(grid, lambda x: np.abs(x[:, 1]) + x[:, 0] ** 2)
    rb = sf.range_basis(prob, [0.2, 0.0])
    reports = sf.directional_smoothness(f, [0.2, 0.0], rb)
    by_dir = {tuple(np.round(r.direction, 6)): r for r in reports}
    r1 = by_dir[(1.0, 0.0)]
    assert r1.in_range and r1.classification == "smooth"
    assert r1.slope_plus == pytest.approx(0.4, abs=1e-6)
    r2 = by_dir[(0.0, 1.0)]
    assert not r2.in_range and r2.classification == "kink"
    assert r2.jump == pytest.approx(2.0, abs=1e-6)


def test_directional_smoothness_flip_check_and_scale():
    prob, grid = field_problem()
    f = sf.GridFunction.from_callable(grid, lambda x: np.abs(x[:, 1]) + x[:, 0] ** 2)
    reports = sf.directional_smoothness(f, [0.2, 0.0], sf.range_basis(prob, [0.2, 0.0]))
    assert all(r.flip_check <= 1e-10 for r in reports)
    assert local_derivative_scale(reports) == pytest.approx(1.0, abs=1e-6)


def test_directional_smoothness_near_boundary_excluded():
    prob, grid = field_problem()
    f = sf.GridFunction(grid, np.zeros(grid.node_count))
    reports = sf.directional_smoothness(f, [0.999, 0.0], sf.range_basis(prob, [0.999, 0.0]))
    assert all(r.classification == "near-boundary-excluded" for r in reports)


def test_directional_smoothness_random_combos_span_only():
    prob, _ = simple_problem(
        n=2, m=2, sigma=[["1", "0"], ["0", "1"]], rho="1",
        box={"lower": [-1.0, -1.0], "upper": [1.0, 1.0], "points": [41, 41]},
    )
    _, grid = field_problem()
    f = sf.GridFunction.from_callable(grid, lambda x: x[:, 0] + 2 * x[:, 1])
    reports = sf.directional_smoothness(f, [0.0, 0.0], sf.range_basis(prob, [0.0, 0.0]))
    in_range = [r for r in reports if r.in_range]
    assert len(in_range) == 2 + 3  # two basis directions plus three combos
    for r in in_range:
        expected = r.direction @ np.array([1.0, 2.0])
        assert r.slope_plus == pytest.approx(expected, abs=1e-8)


def test_projected_gradient_affine_exact():
    prob, grid = field_problem()
    f = sf.GridFunction.from_callable(grid, lambda x: 3.0 * x[:, 0] - 0.5 * x[:, 1])
    rb = sf.range_basis(prob, [0.1, -0.2])
    grad = sf.projected_gradient(f, [0.1, -0.2], rb)
    assert np.allclose(grad, rb.projector @ np.array([3.0, -0.5]), atol=1e-9)


def test_projected_gradient_full_rank_matches_central_gradient():
    prob, grid = simple_problem(
        n=2, m=2, sigma=[["1", "0"], ["0", "1"]], rho="1",
        box={"lower": [-1.0, -1.0], "upper": [1.0, 1.0], "points": [201, 201]},
    )
    f = sf.GridFunction.from_callable(grid, lambda x: np.sin(x[:, 0]) * np.cos(x[:, 1]))
    x = np.array([0.25, -0.3])
    grad = sf.projected_gradient(f, x, sf.range_basis(prob, x))
    true = np.array([np.cos(0.25) * np.cos(-0.3), -np.sin(0.25) * np.sin(-0.3)])
    assert np.allclose(grad, true, atol=5e-4)


def test_projected_gradient_matches_slice_oracle_on_b3(b3_solution):
    e, v, _, _ = b3_solution
    x = np.array([1.2, 0.4])
    grad = sf.projected_gradient(v, x, sf.range_basis(e.problem, x))
    # differentiate the per-slice closed form in x1 (independent quotient)
    eps = 1e-6
    up = e.oracle.closed_form_value(np.array([[1.2 + eps, 0.4]]))[0]
    dn = e.oracle.closed_form_value(np.array([[1.2 - eps, 0.4]]))[0]
    assert grad[0] == pytest.approx((up - dn) / (2 * eps), abs=5 * e.grid.max_spacing)
    assert grad[1] == 0.0


def test_projected_gradient_raises_on_span_kink():
    prob, grid = field_problem()
    f = sf.GridFunction.from_callable(grid, lambda x: np.abs(x[:, 0]))
    with pytest.raises(RangeKinkError):
        sf.projected_gradient(f, [0.0, 0.0], sf.range_basis(prob, [0.0, 0.0]))


# ---------------------------------------------------------------------------
# continuity of the projected gradient


def test_gradient_continuity_smooth_quadratic():
    prob, grid = simple_problem(
        n=2, m=2, sigma=[["1", "0"], ["0", "1"]], rho="1",
        box={"lower": [-1.0, -1.0], "upper": [1.0, 1.0], "points": [161, 161]},
    )
    f = sf.GridFunction.from_callable(grid, lambda x: x[:, 0] ** 2 + 0.5 * x[:, 1] ** 2)
    rep = sf.gradient_continuity(
        f, ([-0.5, -0.5], [0.5, 0.5]), lambda x: sf.range_basis(prob, x),
        deltas=(0.2, 0.1, 0.05), n_pairs=60, rng_seed=0,
    )
    assert rep.monotone()
    # gradient field is 2-Lipschitz; allow estimator noise on top
    for delta, mod in zip(rep.deltas, rep.moduli):
        assert mod <= 2.0 * delta + 0.01


def test_gradient_continuity_rank_jump_rejected():
    prob, grid = simple_problem(
        n=2, m=2, sigma=[["pos(x1)", "0"], ["0", "0"]], rho="1",
        box={"lower": [-1.0, -1.0], "upper": [1.0, 1.0], "points": [41, 41]},
    )
    f = sf.GridFunction(grid, np.zeros(grid.node_count))
    with pytest.raises(RankJumpError):
        sf.gradient_continuity(f, ([-0.5, -0.5], [0.5, 0.5]),
                               lambda x: sf.range_basis(prob, x), n_pairs=20)


def test_gradient_continuity_ladder_on_put(b1_solution):
    e, v, _, _ = b1_solution
    rep = sf.gradient_continuity(
        v, ([0.7], [3.2]), lambda x: sf.range_basis(e.problem, x),
        deltas=(0.2, 0.1, 0.05, 0.025), n_pairs=100, rng_seed=3,
    )
    assert rep.monotone()
    assert rep.moduli[-1] < rep.moduli[0]
    assert rep.moduli[-1] >= rep.noise_floor


# ---------------------------------------------------------------------------
# test-function family


def test_kink_witness_scalar_identities():
    w = sf.kink_witness([1.0], [0.0], 0.0, [[1.0]], j_list=[1, 10, 100])
    assert w.lambda_list == pytest.approx([4.0, 40.0, 400.0])
    assert max(w.trace_errors) <= 1e-10
    assert max(w.gradient_errors) <= 1e-10
    assert w.residual_list == pytest.approx([0.5, 5.0, 50.0])
    assert w.residual_strictly_increasing
    assert w.residual_slope_consistency() <= 1e-10


def test_kink_witness_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        n, m = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        while True:
            p1 = rng.standard_normal(n)
            p2 = rng.standard_normal(n)
            sigma0 = rng.standard_normal((n, m))
            kappa = abs(rng.standard_normal())
            if np.linalg.norm(sigma0.T @ (p1 - p2)) > 0.1:
                break
        w = sf.kink_witness(p1, p2, kappa, sigma0, j_list=[1, 10, 100, 1000])
        assert max(w.trace_errors) <= 1e-10
        assert max(w.gradient_errors) <= 1e-10
        assert w.residual_strictly_increasing
        assert w.residual_slope_consistency() <= 1e-8


def test_kink_witness_bend_stays_below_abs():
    w = sf.kink_witness([2.0, 0.0], [0.0, 1.0], 0.5, [[1.0, 0.2], [0.0, 0.4]],
                        j_list=[1, 10])
    assert w.bend_bound_max_ratio < 1.0
    assert w.bend_bound_radius > 0.0


def test_kink_witness_degenerate_direction_rejected():
    with pytest.raises(DegenerateWitnessError):
        sf.kink_witness([1.0], [1.0], 0.0, [[1.0]])
    with pytest.raises(DegenerateWitnessError):
        sf.kink_witness([0.0, 1.0], [0.0, -1.0], 0.0, [[1.0, 0.0], [0.0, 0.0]])


def test_kink_witness_validates_inputs():
    with pytest.raises(RegularityError):
        sf.kink_witness([1.0], [0.0], -1.0, [[1.0]])
    with pytest.raises(RegularityError):
        sf.kink_witness([1.0], [0.0], 0.0, [[1.0]], j_list=[3, 2])
    with pytest.raises(RegularityError):
        sf.kink_witness([1.0], [0.0], 0.0, [[1.0]], j_list=[0, 1])


def test_kink_witness_residual_uses_linear_data():
    w = sf.kink_witness([1.0], [0.0], 0.0, [[1.0]], j_list=[1, 2],
                        l_data={"g0": 2.0, "beta0": [4.0], "rho0": 1.0, "v0": 3.0})
    # g0 + <beta0, (p1+p2)/2> + j/2 - rho0 v0
    assert w.residual_list == pytest.approx([2.0 + 2.0 + 0.5 - 3.0, 2.0 + 2.0 + 1.0 - 3.0])


# ---------------------------------------------------------------------------
# smooth fit


def test_smooth_fit_on_put_boundary(b1_solution):
    e, v, stop, _ = b1_solution
    reports = sf.smooth_fit_check(v, e.problem, stop)
    assert reports
    checked = [r for r in reports if not r.skipped]
    assert checked
    for r in checked:
        assert r.value_gap <= r.tol_value
        assert all(gap <= r.tol_deriv for gap in r.derivative_gaps)
        assert r.passed


def test_smooth_fit_empty_when_no_edge():
    prob, grid = simple_problem(
        problem_class="OptimalStopping", obstacle="100 + x1", rho="1", sigma="0.3",
        box={"lower": [0.0], "upper": [1.0], "points": [41]},
    )
    v, stop, _ = sf.solve_obstacle(prob, grid, tol=1e-9)
    assert stop.all()
    assert sf.smooth_fit_check(v, prob, stop) == []


def test_smooth_fit_b3_span_direction_everywhere(b3_solution):
    e, v, stop, _ = b3_solution
    reports = sf.smooth_fit_check(v, e.problem, stop, max_points=60)
    checked = [r for r in reports if not r.skipped]
    assert checked
    on_kink_line = [r for r in checked if abs(r.x[1]) < 1e-12]
    assert on_kink_line, "free boundary must be probed on the payoff-kink line"
    for r in checked:
        assert all(gap <= r.tol_deriv for gap in r.derivative_gaps)
        # span direction is e1 only; kernel slopes reported without a verdict
        assert all(abs(d[1]) < 1e-9 for d in r.directions)


def test_detect_region_edge_excludes_box_boundary():
    g = sf.build_grid([0.0, 0.0], [1.0, 1.0], [21, 21])
    region = (g.nodes()[:, 0] <= 0.4)
    edge = detect_region_edge(g, region)
    coords = g.nodes()[edge]
    assert np.all(np.abs(coords[:, 0] - 0.4) < 0.06)
    assert np.all(coords[:, 1] > 0.05) and np.all(coords[:, 1] < 0.95)


# ---------------------------------------------------------------------------
# growth / Lipschitz / semiconvexity bounds


def test_bounds_zero_function_passes():
    g = sf.build_grid([-1.0], [1.0], [41])
    f = sf.GridFunction(g, np.zeros(41))
    rep = sf.check_value_bounds(f, M=0.5, p=2.0, n_samples=2000, rng_seed=0)
    assert all(rep.passed)


def test_bounds_cubic_fails_growth_with_unit_constant():
    g = sf.build_grid([0.0], [10.0], [201])
    f = sf.GridFunction.from_callable(g, lambda x: x[:, 0] ** 3)
    rep = sf.check_value_bounds(f, M=1.0, p=2.0, n_samples=4000, rng_seed=0)
    assert not rep.passed[0]
    assert rep.worst_growth_x[0] > 8.0


def test_bounds_fitted_constant_passes_on_basket(b2_solution):
    _, v, _, _ = b2_solution
    M = fit_bound_constant(v, p=2.0, rng_seed=5)
    rep = sf.check_value_bounds(v, M, p=2.0, n_samples=10000, rng_seed=6)
    assert all(rep.passed), (rep.growth_margin, rep.lipschitz_margin,
                             rep.semiconvexity_margin)


def test_bounds_requires_positive_M():
    g = sf.build_grid([-1.0], [1.0], [41])
    f = sf.GridFunction(g, np.zeros(41))
    with pytest.raises(RegularityError):
        sf.check_value_bounds(f, M=0.0)


def test_subspace_basis_rank_rule():
    b = subspace_basis(np.array([[1.0, 2.0], [0.0, 0.0]]))
    assert b.shape == (2, 1)
    assert subspace_basis(np.zeros((2, 2))).shape == (2, 0)
