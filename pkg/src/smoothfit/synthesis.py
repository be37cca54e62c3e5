"""Feedback synthesis and Monte Carlo verification.

For drift-separable problems the optimizer only sees the projection of the
gradient onto the span of the controlled drift directions, so a feedback map
can be built from projected gradients alone. The synthesized policy is then
audited by simulating the controlled dynamics and comparing the discounted
payoff against the solved field (the verification gap), and by re-solving the
linear equation with the nonlinear part frozen at the synthesized source.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse.linalg import spsolve

from .lattice import Grid, GridFunction, axis_slope_field
from .problems import ProblemClass, ProblemSpec
from . import solver as solver_mod
from .regularity import subspace_basis

__all__ = [
    "SynthesisError",
    "FeedbackPolicy",
    "SimulationEstimate",
    "StructureReport",
    "GapEntry",
    "structure_check",
    "feedback_map",
    "simulate",
    "verification_gap",
    "freeze_and_resolve",
    "never_act_policy",
    "never_stop_policy",
]


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeedbackPolicy:
    """Measurable node-to-action map; off-node queries use the nearest node.

    kind "control": control_index picks a row of control_points.
    kind "stop": stop_flag marks the stopping region.
    kind "impulse": act_flag marks the action region, target_index the node
    the impulse jumps to.
    """

    kind: str
    grid: Grid
    control_index: np.ndarray | None = None
    control_points: np.ndarray | None = None
    stop_flag: np.ndarray | None = None
    act_flag: np.ndarray | None = None
    target_index: np.ndarray | None = None

    @staticmethod
    def controls(grid: Grid, control_index, control_points) -> "FeedbackPolicy":
        idx = np.asarray(control_index, dtype=np.int64)
        pts = np.atleast_2d(np.asarray(control_points, dtype=float))
        if idx.size != grid.node_count:
            raise SynthesisError("control_index must cover every node")
        if idx.min() < 0 or idx.max() >= len(pts):
            raise SynthesisError("control_index out of range of control_points")
        return FeedbackPolicy(kind="control", grid=grid, control_index=idx,
                              control_points=pts)

    @staticmethod
    def stopping(grid: Grid, stop_flag) -> "FeedbackPolicy":
        flag = np.asarray(stop_flag, dtype=bool)
        if flag.size != grid.node_count:
            raise SynthesisError("stop_flag must cover every node")
        return FeedbackPolicy(kind="stop", grid=grid, stop_flag=flag)

    @staticmethod
    def impulse(grid: Grid, act_flag, target_index) -> "FeedbackPolicy":
        flag = np.asarray(act_flag, dtype=bool)
        tgt = np.asarray(target_index, dtype=np.int64)
        if flag.size != grid.node_count or tgt.size != grid.node_count:
            raise SynthesisError("act_flag and target_index must cover every node")
        return FeedbackPolicy(kind="impulse", grid=grid, act_flag=flag, target_index=tgt)

    def controls_at(self, x) -> np.ndarray:
        flat = self.grid.nearest_flat_index(np.atleast_2d(x))
        return self.control_points[self.control_index[flat]]

    def to_json_dict(self) -> dict:
        out = {"kind": self.kind, "grid": self.grid.to_json_dict()}
        if self.kind == "control":
            out["control_index"] = [int(k) for k in self.control_index]
            out["control_points"] = [[float(v) for v in row] for row in self.control_points]
        elif self.kind == "stop":
            out["stop_flag"] = [bool(b) for b in self.stop_flag]
        else:
            out["act_flag"] = [bool(b) for b in self.act_flag]
            out["target_index"] = [int(k) for k in self.target_index]
        return out

    @staticmethod
    def from_json_dict(obj: dict) -> "FeedbackPolicy":
        grid = Grid.from_json_dict(obj["grid"])
        kind = obj["kind"]
        if kind == "control":
            return FeedbackPolicy.controls(grid, obj["control_index"], obj["control_points"])
        if kind == "stop":
            return FeedbackPolicy.stopping(grid, obj["stop_flag"])
        if kind == "impulse":
            return FeedbackPolicy.impulse(grid, obj["act_flag"], obj["target_index"])
        raise SynthesisError(f"unknown policy kind {kind!r}")


def never_act_policy(grid: Grid, problem: ProblemSpec,
                     control=None) -> FeedbackPolicy:
    """Constant-control adversary; defaults to the control closest to zero."""
    pts = problem.control_set.points
    if control is None:
        k = int(np.argmin(np.linalg.norm(pts, axis=1)))
    else:
        k = int(np.argmin(np.linalg.norm(pts - np.asarray(control, float), axis=1)))
    return FeedbackPolicy.controls(grid, np.full(grid.node_count, k, dtype=np.int64), pts)


def never_stop_policy(grid: Grid) -> FeedbackPolicy:
    return FeedbackPolicy.stopping(grid, np.zeros(grid.node_count, dtype=bool))


# ---------------------------------------------------------------------------
# structure condition and feedback map

@dataclass(frozen=True)
class StructureReport:
    sample_points: np.ndarray
    violations: np.ndarray  # ||(I - P_range(sigma)) P_S|| per point
    worst_point: np.ndarray
    worst_violation: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst_violation <= self.tol


def _controlled_drift_basis(problem: ProblemSpec, x: np.ndarray,
                            tau_rank: float) -> np.ndarray:
    cols = []
    for a in problem.control_set.points:
        _, b1 = problem.beta_split_at(x[None, :], a)
        cols.append(b1[0])
    return subspace_basis(np.stack(cols, axis=1), tau_rank)


def structure_check(
    problem: ProblemSpec,
    grid: Grid,
    sample_points: np.ndarray | None = None,
    tau_rank: float = 1e-8,
    tol: float = 1e-8,
    n_default: int = 25,
    rng_seed: int = 0,
) -> StructureReport:
    """Containment of the controlled-drift span in the diffusion span.

    At each sample: build S(x) from the stacked beta1(x, a) over the sampled
    controls and range(sigma(x, .)), then measure ||(I - P_sigma) P_S||.
    Failures are report entries, not exceptions.
    """
    if problem.drift_split is None:
        raise SynthesisError("structure_check requires a drift split")
    if sample_points is None:
        rng = np.random.default_rng(rng_seed)
        sample_points = grid.lower + rng.random((n_default, grid.dim)) * (
            grid.upper - grid.lower
        )
    sample_points = np.atleast_2d(np.asarray(sample_points, dtype=float))
    from .regularity import range_basis  # local, avoids import noise at module load

    violations = []
    for x in sample_points:
        s_basis = _controlled_drift_basis(problem, x, tau_rank)
        rb = range_basis(problem, x, tau_rank)
        if s_basis.shape[1] == 0:
            violations.append(0.0)
            continue
        p_s = s_basis @ s_basis.T
        gap = (np.eye(grid.dim) - rb.projector) @ p_s
        violations.append(float(np.linalg.norm(gap, 2)))
    violations = np.asarray(violations)
    worst = int(np.argmax(violations))
    return StructureReport(
        sample_points=sample_points,
        violations=violations,
        worst_point=sample_points[worst],
        worst_violation=float(violations[worst]),
        tol=tol,
    )


def _nodal_gradient_and_jumps(v: GridFunction) -> tuple[np.ndarray, np.ndarray]:
    """Per-node extrapolated two-sided axis slopes: (gradient, jump per axis)."""
    grid = v.grid
    grads = np.empty((grid.node_count, grid.dim))
    jumps = np.empty((grid.node_count, grid.dim))
    for ax in range(grid.dim):
        plus = axis_slope_field(v, ax, "plus")
        minus = axis_slope_field(v, ax, "minus")
        both = np.isfinite(plus) & np.isfinite(minus)
        grad = np.where(both, 0.5 * (plus + minus), np.where(np.isfinite(plus), plus, minus))
        grads[:, ax] = grad
        jumps[:, ax] = np.where(both, np.abs(plus - minus), 0.0)
    return grads, jumps


def feedback_map(
    v: GridFunction,
    problem: ProblemSpec,
    tau_rank: float = 1e-8,
    tol_jump_factor: float = 5.0,
) -> FeedbackPolicy:
    """Synthesize the argmax control from projected gradients of the value.

    The maximized quantity at node x is g(x, a) + <beta1(x, a), D_S v(x)> with
    D_S the gradient projected on the controlled-drift span; ties resolve to
    the first control in enumeration order. Nodes in the outermost two layers
    copy the nearest interior action. A kink in a span direction aborts: it
    must not happen when the structure condition holds.
    """
    if problem.drift_split is None:
        raise SynthesisError("feedback_map requires a drift split")
    grid = v.grid
    check = structure_check(problem, grid, tau_rank=tau_rank)
    if not check.passed:
        raise SynthesisError(
            f"structure condition fails at {check.worst_point.tolist()} "
            f"(violation {check.worst_violation:.3e})"
        )
    grads, jumps = _nodal_gradient_and_jumps(v)
    nodes = grid.nodes()
    interior = grid.interior_mask()
    # kink alert inside the controlled-drift span, interior nodes only
    scale = np.maximum(1.0, np.max(np.abs(grads), axis=1))
    tol_jump = tol_jump_factor * grid.max_spacing * scale
    for ax in range(grid.dim):
        # axis ax participates in S wherever beta1 has a component there
        b1_mag = np.zeros(grid.node_count)
        for a in problem.control_set.points:
            _, b1 = problem.beta_split_at(nodes, a)
            b1_mag = np.maximum(b1_mag, np.abs(b1[:, ax]))
        active = interior & (b1_mag > 1e-12) & (jumps[:, ax] > tol_jump)
        if np.any(active):
            bad = int(np.flatnonzero(active)[0])
            raise SynthesisError(
                f"gradient jump {jumps[bad, ax]:.3e} in a controlled direction at "
                f"{grid.node_coords(bad).tolist()}; differentiability guarantee "
                "violated or tolerance misconfigured"
            )
    # project the gradient on S node by node and maximize the control term
    best_val = np.full(grid.node_count, -np.inf)
    best_idx = np.zeros(grid.node_count, dtype=np.int64)
    for k, a in enumerate(problem.control_set.points):
        _, b1 = problem.beta_split_at(nodes, a)
        gval = problem.coefficients.g_at(nodes, a)
        # <b1, D_S v> = <b1, Dv> when b1 lies in S by construction
        val = gval + np.sum(b1 * grads, axis=1)
        better = val > best_val + 0.0
        best_val = np.where(better, val, best_val)
        best_idx = np.where(better, k, best_idx)
    # outermost layers copy the nearest interior action
    if np.any(~interior):
        interior_nodes = nodes[interior]
        interior_idx = best_idx[interior]
        for flat in np.flatnonzero(~interior):
            d = np.linalg.norm(interior_nodes - nodes[flat], axis=1)
            best_idx[flat] = interior_idx[int(np.argmin(d))]
    return FeedbackPolicy.controls(grid, best_idx, problem.control_set.points)


# ---------------------------------------------------------------------------
# Monte Carlo

@dataclass(frozen=True)
class SimulationEstimate:
    x0: np.ndarray
    n_paths: int
    dt: float
    t_max: float
    mean: float
    stderr: float
    tail_bound: float
    seed: int
    absorbed_fraction: float = 0.0
    noise_order: str = "step_major_philox"

    def to_json_dict(self) -> dict:
        return {
            "x0": [float(t) for t in np.atleast_1d(self.x0)],
            "n_paths": int(self.n_paths),
            "dt": float(self.dt),
            "T_max": float(self.t_max),
            "mean": float(self.mean),
            "stderr": float(self.stderr),
            "tail_bound": float(self.tail_bound),
            "seed": int(self.seed),
            "absorbed_fraction": float(self.absorbed_fraction),
            "noise_order": self.noise_order,
        }


def _policy_controls(policy: FeedbackPolicy, x: np.ndarray) -> np.ndarray:
    flat = policy.grid.nearest_flat_index(x)
    return policy.control_points[policy.control_index[flat]]


def simulate(
    problem: ProblemSpec,
    policy: FeedbackPolicy,
    x0,
    n_paths: int,
    dt: float,
    t_max: float,
    seed: int = 0,
    tail_tol: float = 1e-3,
    antithetic: bool = False,
) -> SimulationEstimate:
    """Discounted payoff of the policy from x0 by Euler time stepping.

    The discount integral uses the left-endpoint rule; within each step the
    reward is integrated against the frozen exponential rate exactly, so a
    constant-coefficient run reproduces the closed-form integral to rounding.
    Paths leaving the box are absorbed: the frozen state's reward is paid out
    to the horizon and the path retired. Stopping is detected by post-step
    region membership; impulses apply at most once per step.
    """
    if dt <= 0:
        raise SynthesisError("dt must be > 0")
    if n_paths <= 0:
        raise SynthesisError("n_paths must be > 0")
    grid = policy.grid
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    a0 = problem.control_set.points[0]
    rho_grid = problem.coefficients.rho_at(grid.nodes(), a0)
    rho_min = float(np.min(rho_grid))
    if rho_min > 0 and np.exp(-rho_min * t_max) > tail_tol:
        raise SynthesisError(
            f"horizon too short: exp(-rho_min T) = {np.exp(-rho_min * t_max):.2e} "
            f"> tail tolerance {tail_tol:.2e}"
        )
    n_steps = int(np.ceil(t_max / dt))
    rng = np.random.default_rng(np.random.Philox(key=np.uint64(seed)))

    n, m = problem.n, problem.m
    state = np.tile(x0, (n_paths, 1))
    disc = np.zeros(n_paths)  # accumulated discount integral
    value = np.zeros(n_paths)
    active = np.ones(n_paths, dtype=bool)
    absorbed = 0
    is_stop = policy.kind == "stop"
    is_impulse = policy.kind == "impulse"
    c0, c1 = problem.impulse_costs if problem.impulse_costs else (0.0, 0.0)
    payoff_scale = 0.0
    if is_stop:
        payoff_scale = float(np.max(np.abs(problem.obstacle_at(grid.nodes()))))

    def stop_payoff(idx: np.ndarray):
        pts = state[idx]
        value[idx] += np.exp(-disc[idx]) * problem.obstacle_at(pts)
        active[idx] = False

    # stopping at time zero
    if is_stop:
        flat0 = grid.nearest_flat_index(state)
        hit = active & policy.stop_flag[flat0]
        if np.any(hit):
            stop_payoff(np.flatnonzero(hit))

    for _ in range(n_steps):
        if not np.any(active):
            break
        if antithetic:
            half = (n_paths + 1) // 2
            zh = rng.standard_normal((half, m))
            z = np.concatenate([zh, -zh[: n_paths - half]], axis=0)
        else:
            z = rng.standard_normal((n_paths, m))
        act_idx = np.flatnonzero(active)
        pts = state[act_idx]
        flat = grid.nearest_flat_index(pts)

        if is_impulse:
            acting = policy.act_flag[flat]
            if np.any(acting):
                who = act_idx[acting]
                targets = np.atleast_2d(grid.nodes()[policy.target_index[flat[acting]]])
                shift = targets - state[who]
                value[who] -= np.exp(-disc[who]) * (
                    c0 * np.linalg.norm(shift, axis=1) + c1
                )
                state[who] = targets
                pts = state[act_idx]
                flat = grid.nearest_flat_index(pts)

        if policy.kind == "control":
            a_rows = policy.control_points[policy.control_index[flat]]
        else:
            a_rows = np.tile(a0, (len(act_idx), 1))

        # per-control coefficient evaluation (few distinct controls in practice)
        beta = np.empty_like(pts)
        gvals = np.empty(len(act_idx))
        rvals = np.empty(len(act_idx))
        sig = np.empty((len(act_idx), n, m))
        uniq, inv = np.unique(a_rows, axis=0, return_inverse=True)
        for u, arow in enumerate(uniq):
            sel = inv == u
            beta[sel] = problem.coefficients.beta_at(pts[sel], arow)
            gvals[sel] = problem.coefficients.g_at(pts[sel], arow)
            rvals[sel] = problem.coefficients.rho_at(pts[sel], arow)
            sig[sel] = problem.coefficients.sigma_at(pts[sel], arow)

        if not is_stop:
            # exact within-step integral of the frozen-rate reward
            w = np.where(rvals > 1e-14, (1.0 - np.exp(-rvals * dt)) / np.where(rvals > 1e-14, rvals, 1.0), dt)
            value[act_idx] += np.exp(-disc[act_idx]) * gvals * w

        noise = np.einsum("pnm,pm->pn", sig, z[act_idx]) * np.sqrt(dt)
        new_pts = pts + beta * dt + noise
        disc[act_idx] += rvals * dt

        clipped = np.clip(new_pts, grid.lower, grid.upper)
        out = np.any(np.abs(clipped - new_pts) > 0, axis=1)
        state[act_idx] = clipped
        if np.any(out):
            who = act_idx[out]
            absorbed += len(who)
            if not is_stop:
                rfro = rvals[out]
                gfro = gvals[out]
                w = np.where(rfro > 1e-14, 1.0 / np.where(rfro > 1e-14, rfro, 1.0), t_max)
                value[who] += np.exp(-disc[who]) * gfro * w
            active[who] = False

        if is_stop and np.any(active):
            act_idx = np.flatnonzero(active)
            flat = grid.nearest_flat_index(state[act_idx])
            hit = policy.stop_flag[flat]
            if np.any(hit):
                stop_payoff(act_idx[hit])

    mean = float(np.sum(value) / n_paths)  # numpy pairwise summation, fixed order
    stderr = float(np.std(value, ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    gmax = float(np.max(np.abs(problem.coefficients.g_at(grid.nodes(), a0))))
    tail_scale = max(payoff_scale, gmax / max(rho_min, 1e-14))
    tail = float(np.exp(-rho_min * t_max)) * tail_scale
    return SimulationEstimate(
        x0=x0,
        n_paths=n_paths,
        dt=dt,
        t_max=t_max,
        mean=mean,
        stderr=stderr,
        tail_bound=tail,
        seed=seed,
        absorbed_fraction=absorbed / n_paths,
    )


@dataclass(frozen=True)
class GapEntry:
    x0: np.ndarray
    value: float
    mc_mean: float
    mc_stderr: float
    gap: float  # value - mc_mean; positive means the policy underperforms

    def significantly_negative(self, allowance: float, stderr_mult: float = 2.0) -> bool:
        return self.gap < -(stderr_mult * self.mc_stderr + allowance)

    def significantly_positive(self, allowance: float, stderr_mult: float = 2.0) -> bool:
        return self.gap > stderr_mult * self.mc_stderr + allowance


def verification_gap(
    v: GridFunction,
    problem: ProblemSpec,
    policy: FeedbackPolicy,
    x0_list: Sequence,
    n_paths: int,
    dt: float,
    t_max: float,
    seed: int = 0,
    tail_tol: float = 1e-3,
) -> list[GapEntry]:
    """Solved value minus simulated policy payoff at each start point.

    A significantly positive gap flags policy suboptimality (legitimate); a
    significantly negative one flags a solver bug, since the value dominates
    every admissible policy's payoff.
    """
    out = []
    for i, x0 in enumerate(x0_list):
        est = simulate(problem, policy, x0, n_paths, dt, t_max,
                       seed=seed + 1000003 * i, tail_tol=tail_tol)
        val = float(v.interpolate(np.atleast_1d(np.asarray(x0, dtype=float))))
        out.append(GapEntry(x0=np.atleast_1d(np.asarray(x0, dtype=float)),
                            value=val, mc_mean=est.mean, mc_stderr=est.stderr,
                            gap=val - est.mean))
    return out


# ---------------------------------------------------------------------------
# freeze-and-resolve

def freeze_and_resolve(
    v: GridFunction,
    problem: ProblemSpec,
    grid: Grid | None = None,
) -> tuple[GridFunction, float]:
    """Re-solve the linear equation with the nonlinear part frozen at v.

    The frozen scalar source is the discrete realization of the maximized
    control term, s(x) = max_a { A_a v + g_a }(x) - A0 v(x), with A0 the
    generator of the uncontrolled drift part; the linear problem A0 w + s = 0
    is solved with Dirichlet data w = v on the grid boundary. Returns the
    re-solved field and the interior sup-norm gap; the gap is a consistency
    diagnostic and shrinks with the tolerance the input was solved to.
    """
    if problem.drift_split is None:
        raise SynthesisError("freeze_and_resolve requires a drift split")
    grid = grid or v.grid
    gens = [solver_mod.discretize(problem, grid, a) for a in problem.control_set.points]
    nodes = grid.nodes()
    beta0_exprs, _ = problem.drift_split
    beta0 = problem.coefficients._eval_vector(beta0_exprs, nodes, None)
    a0 = problem.control_set.points[0]
    sigma = problem.coefficients.sigma_at(nodes, a0)
    diffusion = np.einsum("nij,nkj->nik", sigma, sigma)
    rho = problem.coefficients.rho_at(nodes, a0)
    gen0 = solver_mod.assemble_operator(grid, beta0, diffusion, rho,
                                        np.zeros(grid.node_count))
    best = np.max(np.stack([g.apply(v.values) for g in gens], axis=0), axis=0)
    source = best - gen0.apply_linear(v.values)

    interior = grid.interior_mask()
    idx_int = np.flatnonzero(interior)
    idx_bd = np.flatnonzero(~interior)
    m_full = (-gen0.matrix).tocsr()
    m_ii = m_full[idx_int][:, idx_int]
    m_ib = m_full[idx_int][:, idx_bd]
    rhs = source[idx_int] - m_ib @ v.values[idx_bd]
    w_int = spsolve(m_ii.tocsr(), rhs)
    w = v.values.copy()
    w[idx_int] = w_int
    sup_gap = float(np.max(np.abs(w[idx_int] - v.values[idx_int])))
    return GridFunction(grid, w), sup_gap
