import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import smoothfit as sf
from helpers import simple_problem
from smoothfit.problems import (
    B1_PARAMS,
    B3_PARAMS,
    ProblemConfigError,
    catalog,
    catalog_entry,
    load_problem_config,
    perpetual_put_value,
    put_exponent,
    put_free_boundary,
    validate_wellposedness,
)


def test_eval_L_constant_reward_only():
    prob, _ = simple_problem(g="1")
    val = sf.eval_L(prob, [0.0], [0.3], 2.0, [5.0], [[7.0]])
    assert val == pytest.approx(1.0)


def test_eval_L_trace_term():
    prob, _ = simple_problem(sigma="1")
    val = sf.eval_L(prob, [0.0], [0.0], 0.0, [0.0], [[2.0]])
    assert val == pytest.approx(1.0)  # 0.5 * 1 * 2


def test_eval_L_drift_inner_product():
    prob, _ = simple_problem(beta="a1", controls=((-1.0,), (1.0,)))
    val = sf.eval_L(prob, [1.0], [0.0], 0.0, [3.0], [[0.0]])
    assert val == pytest.approx(3.0)


def test_eval_L_rejects_asymmetric_P():
    prob, _ = simple_problem(n=2, m=2)
    with pytest.raises(ValueError, match="symmetric"):
        sf.eval_L(prob, [0.0], [0.0, 0.0], 0.0, [0.0, 0.0], [[0.0, 1.0], [0.0, 0.0]])


def test_eval_H_maximizes_drift():
    prob, _ = simple_problem(beta="a1", controls=((-1.0,), (1.0,)))
    val, a = sf.eval_H(prob, [0.0], 0.0, [3.0], [[0.0]])
    assert val == pytest.approx(3.0)
    assert a == pytest.approx([1.0])


def test_eval_H_singleton_degenerates_to_eval_L():
    prob, _ = simple_problem(g="2", controls=((0.7,),))
    val, a = sf.eval_H(prob, [0.1], 1.0, [0.0], [[0.0]])
    assert val == sf.eval_L(prob, [0.7], [0.1], 1.0, [0.0], [[0.0]])
    assert a == pytest.approx([0.7])


def test_eval_H_tie_breaks_to_first_control():
    prob, _ = simple_problem(beta="a1", controls=((-1.0,), (0.0,), (1.0,)))
    val, a = sf.eval_H(prob, [0.0], 0.0, [0.0], [[0.0]])
    assert val == pytest.approx(0.0)
    assert a == pytest.approx([-1.0])


@settings(max_examples=25, deadline=None)
@given(p=st.floats(-3, 3), pdiag=st.floats(-2, 2), r=st.floats(-2, 2))
def test_eval_H_dominates_every_member(p, pdiag, r):
    prob, _ = simple_problem(beta="a1", g="-a1^2", rho="1",
                             controls=[(a,) for a in np.linspace(-1, 1, 9)])
    hval, _ = sf.eval_H(prob, [0.2], r, [p], [[pdiag]])
    for a in prob.control_set.points:
        assert hval >= sf.eval_L(prob, a, [0.2], r, [p], [[pdiag]]) - 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 9999))
def test_eval_H_monotone_in_hessian_argument(seed):
    rng = np.random.default_rng(seed)
    prob, _ = simple_problem(
        n=2, m=2,
        beta=["a1", "-x2"],
        sigma=[["1", "0"], ["x1", "1"]],
        g="-a1^2", rho="1",
        controls=[(-1.0,), (0.0,), (1.0,)],
    )
    P = rng.standard_normal((2, 2))
    P = 0.5 * (P + P.T)
    Q = rng.standard_normal((2, 2))
    D = Q @ Q.T  # positive semidefinite bump
    x, r, p = [0.3, -0.2], 0.5, [1.0, -1.0]
    assert sf.eval_H(prob, x, r, p, P + D)[0] >= sf.eval_H(prob, x, r, p, P)[0] - 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 9999), t=st.floats(0.0, 1.0))
def test_eval_L_affine_in_value_slope_curvature(seed, t):
    rng = np.random.default_rng(seed)
    prob, _ = simple_problem(beta="x1 + a1", sigma="x1", g="x1 * a1", rho="1 + x1^2",
                             controls=((0.4,),))
    r1, r2 = rng.standard_normal(2)
    p1, p2 = rng.standard_normal((2, 1))
    P1, P2 = rng.standard_normal(2)
    z = lambda r, p, P: sf.eval_L(prob, [0.4], [0.3], r, [p], [[P]])
    lhs = z(t * r1 + (1 - t) * r2, t * p1[0] + (1 - t) * p2[0], t * P1 + (1 - t) * P2)
    rhs = t * z(r1, p1[0], P1) + (1 - t) * z(r2, p2[0], P2)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


# ---------------------------------------------------------------------------
# benchmark catalog oracles


def bisect_negative_root(mu, s, rho0):
    # independent root finder for 0.5 s^2 b (b - 1) + mu b - rho0 = 0
    def q(b):
        return 0.5 * s * s * b * (b - 1.0) + mu * b - rho0

    lo, hi = -50.0, 0.0
    assert q(lo) > 0 > q(hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if q(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_put_exponent_against_bisection_oracle():
    p = B1_PARAMS
    beta_oracle = bisect_negative_root(p["mu"], p["s"], p["rho0"])
    assert put_exponent(p["mu"], p["s"], p["rho0"]) == pytest.approx(beta_oracle, abs=1e-12)
    bstar = put_free_boundary(p["K"], p["mu"], p["s"], p["rho0"])
    assert bstar == pytest.approx(p["K"] * beta_oracle / (beta_oracle - 1.0), abs=1e-12)
    assert bstar == pytest.approx(0.5367, abs=1e-4)


def test_put_value_smooth_fit_at_boundary():
    p = B1_PARAMS
    bstar = put_free_boundary(p["K"], p["mu"], p["s"], p["rho0"])
    eps = 1e-6
    v = lambda x: perpetual_put_value(x, p["K"], p["mu"], p["s"], p["rho0"])
    # one-sided secants: V is C^1 at the pasting point but not C^2
    slope_minus = (v(bstar) - v(bstar - eps)) / eps
    slope_plus = (v(bstar + eps) - v(bstar)) / eps
    assert slope_minus == pytest.approx(-1.0, abs=1e-9)
    assert slope_plus == pytest.approx(-1.0, abs=1e-5)
    assert v(bstar) == pytest.approx(p["K"] - bstar, abs=1e-14)


def test_catalog_keys_and_grids():
    entries = {e.key: e for e in catalog()}
    assert set(entries) >= {"b1", "b2", "b3", "b4", "b5"}
    assert entries["b1"].grid.points[0] == 4000
    for e in entries.values():
        e.problem.validate_on(e.grid)
    with pytest.raises(KeyError):
        catalog_entry("nope")


def test_b2_payoff_is_convex():
    e = catalog_entry("b2")
    rng = np.random.default_rng(7)
    x = 0.05 + rng.random((500, 2)) * 2.9
    y = 0.05 + rng.random((500, 2)) * 2.9
    lam = rng.random(500)
    mid = lam[:, None] * x + (1 - lam)[:, None] * y
    excess = (
        e.problem.obstacle_at(mid)
        - lam * e.problem.obstacle_at(x)
        - (1 - lam) * e.problem.obstacle_at(y)
    )
    assert np.max(excess) <= 1e-12  # convex payoff: semiconvexity constant 0


def test_b3_slice_oracle_is_put_with_slice_strike():
    e = catalog_entry("b3")
    p = B3_PARAMS
    beta_oracle = bisect_negative_root(0.0, p["s"], p["rho0"])
    for x1, x2 in ((0.8, 0.5), (1.5, -0.4), (0.3, 0.0)):
        strike = p["K0"] + p["slope"] * abs(x2 - p["x2star"])
        bstar = strike * beta_oracle / (beta_oracle - 1.0)
        if x1 <= bstar:
            expected = strike - x1
        else:
            expected = (strike - bstar) * (x1 / bstar) ** beta_oracle
        got = e.oracle.closed_form_value(np.array([[x1, x2]]))[0]
        assert got == pytest.approx(expected, rel=1e-10)


def test_b3_diffusion_is_rank_one():
    e = catalog_entry("b3")
    rng = np.random.default_rng(0)
    pts = np.column_stack([0.01 + rng.random(50) * 3.99, -1 + 2 * rng.random(50)])
    sig = e.problem.coefficients.sigma_at(pts, e.problem.control_set.points[0])
    a = np.einsum("nij,nkj->nik", sig, sig)
    assert np.max(np.abs(a[:, 1, :])) == 0.0  # second row of sigma sigma* vanishes
    assert np.min(np.abs(a[:, 0, 0])) > 0.0


def test_b4_drift_split_consistent():
    e = catalog_entry("b4")
    rng = np.random.default_rng(1)
    pts = -2 + 4 * rng.random((100, 1))
    for a in e.problem.control_set.points[::5]:
        b0, b1 = e.problem.beta_split_at(pts, a)
        beta = e.problem.coefficients.beta_at(pts, a)
        assert np.max(np.abs(b0 + b1 - beta)) <= 1e-12


# ---------------------------------------------------------------------------
# config loading


def test_config_file_matches_catalog_b1():
    from pathlib import Path

    run_cfg = json.loads(
        (Path(__file__).parent.parent / "configs" / "b1_perpetual_put.json").read_text()
    )
    prob, grid = load_problem_config(run_cfg["problem"])
    e = catalog_entry("b1")
    assert tuple(grid.points) == tuple(e.grid.points)
    rng = np.random.default_rng(3)
    pts = 0.01 + rng.random((50, 1)) * 3.99
    a = [0.0]
    assert np.allclose(
        prob.coefficients.sigma_at(pts, a), e.problem.coefficients.sigma_at(pts, a)
    )
    assert np.allclose(prob.obstacle_at(pts), e.problem.obstacle_at(pts))
    assert np.allclose(prob.coefficients.rho_at(pts, a), 0.05)


def test_config_rejects_unknown_fields():
    with pytest.raises(ProblemConfigError, match="unknown problem fields"):
        simple_problem(typo_field=1)


def test_config_rejects_unknown_coefficient_fields():
    cfg = {
        "class": "DriftControl", "n": 1, "m": 1,
        "box": {"lower": [0.0], "upper": [1.0], "points": [5]},
        "coefficients": {"beta": ["0"], "sigma": [["0"]], "g": "0", "rho": "1",
                         "extra": "1"},
        "control_set": {"points": [[0.0]]},
    }
    with pytest.raises(ProblemConfigError, match="unknown coefficient fields"):
        load_problem_config(cfg)


def test_config_rejects_bad_class_and_expressions():
    with pytest.raises(ProblemConfigError, match="class"):
        simple_problem(problem_class="Elliptic")
    with pytest.raises(ProblemConfigError):
        simple_problem(beta=["x1 +"])


def test_config_requires_obstacle_for_stopping():
    with pytest.raises(ProblemConfigError, match="obstacle"):
        simple_problem(problem_class="OptimalStopping", rho="1")


def test_config_requires_positive_impulse_costs():
    with pytest.raises(ProblemConfigError, match="c0 > 0"):
        simple_problem(problem_class="ImpulseControl", rho="1",
                       impulse_costs={"c0": 0.0, "c1": 1.0})


def test_config_rejects_rho_negative():
    with pytest.raises(ProblemConfigError, match="rho"):
        simple_problem(rho="-1")


def test_config_control_interval_sampling():
    prob, _ = simple_problem(control_set={"interval": {"lower": [-1.0], "upper": [1.0],
                                                       "samples": [5]}})
    assert prob.control_set.size == 5
    assert np.allclose(prob.control_set.points[:, 0], [-1, -0.5, 0, 0.5, 1])


def test_config_drift_split_mismatch_rejected():
    with pytest.raises(ProblemConfigError, match="drift split"):
        simple_problem(beta="a1 - x1",
                       drift_split={"beta0": ["-x1"], "beta1": ["2 * a1"]},
                       controls=((0.5,),))


def test_wellposedness_warnings():
    prob, grid = simple_problem(rho="0", g="1")
    warnings = validate_wellposedness(prob, grid)
    assert any("discount" in w for w in warnings)
    e = catalog_entry("b4")
    assert validate_wellposedness(e.problem, e.grid) == []
