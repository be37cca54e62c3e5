"""Directional-regularity verification for solved value fields.

The headline checks: along the span of the diffusion columns the solved field
must be differentiable (one-sided slopes agree), the projected gradient must
match the projection of the full gradient where the latter exists, and the
projected gradient must vary continuously. Kernel directions are measured but
never judged; kinks there are genuinely possible and one benchmark requires
one. The module also reproduces an explicit test-function family whose
second-order term can be pushed to any prescribed trace, certifying the
contradiction mechanism behind the smoothness of such fields.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .expressions import NondifferentiableError, parse_expression
from .lattice import (
    Grid,
    GridFunction,
    LatticeError,
    OutOfBoxError,
    default_probe_steps,
    one_sided_directional_derivative,
)
from .problems import ProblemSpec

__all__ = [
    "RegularityError",
    "DegenerateWitnessError",
    "RangeKinkError",
    "RankJumpError",
    "SemiconvexityCertificate",
    "RangeBasis",
    "DirectionalReport",
    "KinkWitness",
    "SmoothFitReport",
    "BoundsReport",
    "ContinuityReport",
    "semiconvexity_constant",
    "range_basis",
    "directional_smoothness",
    "projected_gradient",
    "gradient_continuity",
    "kink_witness",
    "smooth_fit_check",
    "check_value_bounds",
    "fit_bound_constant",
    "local_derivative_scale",
]


class RegularityError(RuntimeError):
    pass


class DegenerateWitnessError(RegularityError):
    """sigma*(p1 - p2) = 0: no direction to witness, the construction is void."""


class RangeKinkError(RegularityError):
    """A direction inside the diffusion span classified as a kink.

    Either the data contradicts the differentiability guarantee or the jump
    tolerance is misconfigured; surfaced loudly instead of being averaged away.
    """


class RankJumpError(RegularityError):
    """The subspace family changes rank inside the probed region."""


# ---------------------------------------------------------------------------
# semiconvexity

@dataclass(frozen=True)
class SemiconvexityCertificate:
    region_lower: np.ndarray
    region_upper: np.ndarray
    c_estimate: float
    n_samples: int
    n_used: int
    worst_triple: tuple  # (x, y, lambda) attaining the estimate
    min_denominator: float
    rng_seed: int

    @property
    def kappa(self) -> float:
        """Quadratic-shift constant: v + (kappa/2)|.|^2 is convex-like, kappa = 2c."""
        return 2.0 * self.c_estimate


def semiconvexity_constant(
    v: GridFunction,
    region: tuple | None = None,
    n_samples: int = 2000,
    rng_seed: int = 0,
    min_denominator: float | None = None,
) -> SemiconvexityCertificate:
    """Sampled mid-combination excess constant, floored at zero.

    Draws x, y uniform in the region and lambda uniform in (0, 1), and takes
    the max of [v(lx + (1-l)y) - l v(x) - (1-l) v(y)] / [l(1-l)|x-y|^2].
    Triples whose denominator falls below `min_denominator` are skipped: there
    the quotient measures interpolation noise, not curvature. Default floor is
    64 * max_spacing^2.
    """
    grid = v.grid
    lo = np.asarray(region[0], dtype=float) if region else grid.lower.copy()
    hi = np.asarray(region[1], dtype=float) if region else grid.upper.copy()
    if np.any(lo < grid.lower - 1e-12) or np.any(hi > grid.upper + 1e-12):
        raise LatticeError("region escapes the grid box")
    if min_denominator is None:
        min_denominator = 64.0 * grid.max_spacing**2
    rng = np.random.default_rng(rng_seed)
    x = lo + rng.random((n_samples, grid.dim)) * (hi - lo)
    y = lo + rng.random((n_samples, grid.dim)) * (hi - lo)
    lam = rng.random(n_samples)
    denom = lam * (1.0 - lam) * np.sum((x - y) ** 2, axis=1)
    keep = denom >= min_denominator
    if not np.any(keep):
        raise RegularityError("no admissible sample triples; enlarge region or samples")
    xk, yk, lk, dk = x[keep], y[keep], lam[keep], denom[keep]
    mid = lk[:, None] * xk + (1.0 - lk)[:, None] * yk
    excess = v.interpolate(mid) - lk * v.interpolate(xk) - (1.0 - lk) * v.interpolate(yk)
    ratio = excess / dk
    i = int(np.argmax(ratio))
    return SemiconvexityCertificate(
        region_lower=lo,
        region_upper=hi,
        c_estimate=float(max(0.0, ratio[i])),
        n_samples=n_samples,
        n_used=int(np.sum(keep)),
        worst_triple=(xk[i].tolist(), yk[i].tolist(), float(lk[i])),
        min_denominator=float(min_denominator),
        rng_seed=rng_seed,
    )


# ---------------------------------------------------------------------------
# diffusion span

@dataclass(frozen=True)
class RangeBasis:
    """Orthonormal basis of the span of the diffusion columns over all controls."""

    x: np.ndarray
    basis: np.ndarray  # (n, rank)
    kernel_basis: np.ndarray  # (n, n - rank)
    projector: np.ndarray  # (n, n)
    singular_values: np.ndarray
    tau_rank: float

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def trivial(self) -> bool:
        return self.rank == 0


def _signed_columns(u: np.ndarray) -> np.ndarray:
    out = u.copy()
    for k in range(out.shape[1]):
        j = int(np.argmax(np.abs(out[:, k])))
        if out[j, k] < 0:
            out[:, k] = -out[:, k]
    return out


def range_basis(problem: ProblemSpec, x, tau_rank: float = 1e-8) -> RangeBasis:
    """SVD span of the stacked sigma(x, a) columns over the sampled controls.

    Rank is decided by tau_rank * largest singular value; a fully degenerate
    point (all singular values below threshold) yields rank zero and marks the
    differentiability guarantee inapplicable there.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    cols = []
    for a in problem.control_set.points:
        cols.append(problem.coefficients.sigma_at(x[None, :], a)[0])
    stacked = np.concatenate(cols, axis=1)  # (n, m * |A|)
    u, s, _ = np.linalg.svd(stacked, full_matrices=True)
    if s.size == 0 or s[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(s > tau_rank * s[0]))
    basis = _signed_columns(u[:, :rank])
    kernel = _signed_columns(u[:, rank:])
    proj = basis @ basis.T
    return RangeBasis(
        x=x,
        basis=basis,
        kernel_basis=kernel,
        projector=proj,
        singular_values=s,
        tau_rank=tau_rank,
    )


def subspace_basis(vectors: np.ndarray, tau_rank: float = 1e-8) -> np.ndarray:
    """Orthonormal span of the given column vectors with the same rank rule."""
    u, s, _ = np.linalg.svd(np.atleast_2d(vectors), full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return u[:, :0]
    rank = int(np.sum(s > tau_rank * s[0]))
    return _signed_columns(u[:, :rank])


# ---------------------------------------------------------------------------
# directional smoothness

@dataclass(frozen=True)
class DirectionalReport:
    x: np.ndarray
    direction: np.ndarray
    in_range: bool
    slope_plus: float
    slope_minus: float
    jump: float
    tol_jump: float
    classification: str  # smooth | kink | near-boundary-excluded
    flip_check: float  # |slope_plus(h) + slope_minus(-h)|, should be ~0


def local_derivative_scale(reports: Sequence[DirectionalReport]) -> float:
    """Largest observed one-sided slope magnitude at a probe point."""
    mags = [
        max(abs(r.slope_plus), abs(r.slope_minus))
        for r in reports
        if np.isfinite(r.slope_plus)
    ]
    return max(mags) if mags else 0.0


def _one_direction_report(
    v: GridFunction,
    x: np.ndarray,
    direction: np.ndarray,
    in_range: bool,
    tol_jump_factor: float,
    steps: Sequence[float] | None,
) -> DirectionalReport:
    d = direction / np.linalg.norm(direction)
    use_steps = steps if steps is not None else default_probe_steps(v.grid, d)
    sp_ = one_sided_directional_derivative(v, x, d, "plus", use_steps)
    sm_ = one_sided_directional_derivative(v, x, d, "minus", use_steps)
    # orientation flip must swap the two sides: slope_plus(-h) = -slope_minus(h)
    sp_flip = one_sided_directional_derivative(v, x, -d, "plus", use_steps)
    flip_check = abs(sp_flip + sm_)
    jump = sp_ - sm_
    scale = max(1.0, abs(sp_), abs(sm_))
    tol_jump = tol_jump_factor * v.grid.max_spacing * scale
    cls = "smooth" if abs(jump) <= tol_jump else "kink"
    return DirectionalReport(
        x=x,
        direction=d,
        in_range=in_range,
        slope_plus=sp_,
        slope_minus=sm_,
        jump=jump,
        tol_jump=tol_jump,
        classification=cls,
        flip_check=abs(sp_flip + sm_),
    )


def directional_smoothness(
    v: GridFunction,
    x,
    basis: RangeBasis,
    tol_jump_factor: float = 5.0,
    steps: Sequence[float] | None = None,
    rng_seed: int = 0,
    n_random_combos: int = 3,
    boundary_width_mult: float = 2.0,
) -> list[DirectionalReport]:
    """One report per span direction, per kernel direction, and per random
    unit combination inside the span (when the span has dimension >= 2, the
    combinations exercise the decomposition h = sum_j h_j).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if v.grid.is_near_boundary(x, boundary_width_mult):
        nan = float("nan")
        return [
            DirectionalReport(
                x=x, direction=d, in_range=in_r, slope_plus=nan, slope_minus=nan,
                jump=nan, tol_jump=nan, classification="near-boundary-excluded",
                flip_check=nan,
            )
            for d, in_r in _probe_directions(basis, rng_seed, n_random_combos)
        ]
    return [
        _one_direction_report(v, x, d, in_r, tol_jump_factor, steps)
        for d, in_r in _probe_directions(basis, rng_seed, n_random_combos)
    ]


def _probe_directions(basis: RangeBasis, rng_seed: int, n_random_combos: int):
    dirs: list[tuple[np.ndarray, bool]] = []
    for k in range(basis.rank):
        dirs.append((basis.basis[:, k], True))
    for k in range(basis.kernel_basis.shape[1]):
        dirs.append((basis.kernel_basis[:, k], False))
    if basis.rank >= 2 and n_random_combos > 0:
        rng = np.random.default_rng(rng_seed)
        for _ in range(n_random_combos):
            w = rng.standard_normal(basis.rank)
            w /= np.linalg.norm(w)
            dirs.append((basis.basis @ w, True))
    return dirs


def projected_gradient(
    v: GridFunction,
    x,
    basis: RangeBasis,
    tol_jump_factor: float = 5.0,
    steps: Sequence[float] | None = None,
) -> np.ndarray:
    """Gradient of the restriction to x + span(basis), as an ambient vector.

    Requires every span direction to classify smooth at x; a kink inside the
    span is surfaced as RangeKinkError rather than silently averaged.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if basis.trivial:
        raise RegularityError("projected gradient undefined for a trivial span")
    grad = np.zeros(v.grid.dim)
    for k in range(basis.rank):
        rep = _one_direction_report(v, x, basis.basis[:, k], True, tol_jump_factor, steps)
        if rep.classification != "smooth":
            raise RangeKinkError(
                f"span direction {rep.direction.tolist()} at {x.tolist()} has jump "
                f"{rep.jump:.3e} > tol {rep.tol_jump:.3e}"
            )
        grad += 0.5 * (rep.slope_plus + rep.slope_minus) * basis.basis[:, k]
    return grad


@dataclass(frozen=True)
class ContinuityReport:
    deltas: tuple
    moduli: tuple
    n_pairs: int
    noise_floor: float
    rank: int

    def monotone(self, slack: float = 0.05) -> bool:
        return all(
            b <= a * (1.0 + slack) + 1e-15 for a, b in zip(self.moduli, self.moduli[1:])
        )


def gradient_continuity(
    v: GridFunction,
    region: tuple,
    basis_field: Callable[[np.ndarray], RangeBasis],
    deltas: Sequence[float] = (0.2, 0.1, 0.05, 0.025),
    n_pairs: int = 150,
    rng_seed: int = 0,
    tol_jump_factor: float = 5.0,
) -> ContinuityReport:
    """Empirical modulus of continuity of the projected gradient on a region.

    For each delta, samples pairs |x - y| <= delta and records
    max |D_S v(x) - D_S v(y)|. The ladder should fall toward the derivative
    estimator's noise floor; rank jumps inside the region abort the check.
    """
    lo = np.asarray(region[0], dtype=float)
    hi = np.asarray(region[1], dtype=float)
    rng = np.random.default_rng(rng_seed)
    probes = lo + rng.random((max(24, n_pairs // 4), lo.size)) * (hi - lo)
    bases = [basis_field(p) for p in probes]
    ranks = {b.rank for b in bases}
    if len(ranks) != 1:
        raise RankJumpError(f"span rank not constant on region: ranks {sorted(ranks)}")
    rank = ranks.pop()
    grads = {}

    def grad_at(pt: np.ndarray) -> np.ndarray:
        key = tuple(np.round(pt, 12))
        if key not in grads:
            grads[key] = projected_gradient(v, pt, basis_field(pt), tol_jump_factor)
        return grads[key]

    moduli = []
    noise = []
    for delta in deltas:
        worst = 0.0
        for _ in range(n_pairs):
            x = lo + rng.random(lo.size) * (hi - lo)
            step = rng.standard_normal(lo.size)
            step *= (delta * rng.random()) / np.linalg.norm(step)
            y = np.clip(x + step, lo, hi)
            gx, gy = grad_at(x), grad_at(y)
            worst = max(worst, float(np.linalg.norm(gx - gy)))
        moduli.append(worst)
    # rough estimator noise: disagreement of the two one-sided slopes at probes
    for p in probes[:12]:
        b = basis_field(p)
        for k in range(b.rank):
            rep = _one_direction_report(v, p, b.basis[:, k], True, tol_jump_factor, None)
            noise.append(abs(rep.jump))
    return ContinuityReport(
        deltas=tuple(float(d) for d in deltas),
        moduli=tuple(moduli),
        n_pairs=n_pairs,
        noise_floor=float(np.median(noise)) if noise else 0.0,
        rank=rank,
    )


# ---------------------------------------------------------------------------
# explicit test-function family (kink witness)

@dataclass(frozen=True)
class KinkWitness:
    p1: np.ndarray
    p2: np.ndarray
    kappa: float
    sigma0: np.ndarray
    a_label: str
    j_list: tuple
    lambda_list: tuple
    trace_list: tuple
    trace_errors: tuple
    gradient_errors: tuple
    residual_list: tuple
    bend_bound_max_ratio: float
    bend_bound_radius: float

    @property
    def trace_identity_ok(self) -> bool:
        return max(self.trace_errors) <= 1e-10

    @property
    def residual_strictly_increasing(self) -> bool:
        return all(b > a for a, b in zip(self.residual_list, self.residual_list[1:]))

    def residual_slope_consistency(self) -> float:
        """Relative spread of the two-point slopes of residual vs j (affinity check)."""
        slopes = [
            (rb - ra) / (jb - ja)
            for (ja, ra), (jb, rb) in zip(
                zip(self.j_list, self.residual_list),
                zip(self.j_list[1:], self.residual_list[1:]),
            )
        ]
        ref = max(abs(s) for s in slopes)
        return (max(slopes) - min(slopes)) / ref if ref > 0 else 0.0


def _phi_callable(lam: float, kappa: float, p1: np.ndarray, p2: np.ndarray):
    dp = p1 - p2
    sp = 0.5 * (p1 + p2)

    def bend(t):
        return -(lam**3) * t**4 + 0.5 * lam * t * t

    def phi(y: np.ndarray) -> float:
        t = 0.5 * float(dp @ y)
        return bend(t) + float(sp @ y) - 0.5 * kappa * float(y @ y)

    return phi


def kink_witness(
    p1,
    p2,
    kappa: float,
    sigma0,
    a_label: str = "a",
    j_list: Sequence[int] = (1, 10, 100),
    l_data: Mapping[str, float] | None = None,
) -> KinkWitness:
    """Build the quartic test-function family realizing an unbounded trace.

    For two distinct supporting slopes p1, p2 with sigma0*(p1 - p2) != 0 and a
    semiconvexity shift kappa, each member

        phi_j(y) = bend_j(<p1 - p2, y> / 2) + <p1 + p2, y> / 2 - (kappa/2)|y|^2,
        bend_j(t) = -lambda_j^3 t^4 + (lambda_j / 2) t^2,
        lambda_j  = 4 (j + kappa |sigma0|_F^2) / |sigma0^T (p1 - p2)|^2,

    has gradient (p1 + p2)/2 at the origin and trace of sigma0^T D^2phi_j sigma0
    exactly j, while bend_j stays below |t| everywhere. The derivative data is
    recovered by evaluating the second-order jet of the bend expression, not by
    trusting the algebra, and is cross-checked by finite differences.
    """
    p1 = np.atleast_1d(np.asarray(p1, dtype=float))
    p2 = np.atleast_1d(np.asarray(p2, dtype=float))
    sigma0 = np.atleast_2d(np.asarray(sigma0, dtype=float))
    if sigma0.shape[0] != p1.size:
        raise RegularityError(
            f"sigma0 has {sigma0.shape[0]} rows but slopes live in dim {p1.size}"
        )
    j_arr = [int(j) for j in j_list]
    if any(j <= 0 for j in j_arr) or any(b <= a for a, b in zip(j_arr, j_arr[1:])):
        raise RegularityError("j_list must be strictly increasing positive integers")
    if kappa < 0:
        raise RegularityError("kappa must be >= 0")
    dp = p1 - p2
    q = float(np.linalg.norm(sigma0.T @ dp) ** 2)
    frob2 = float(np.linalg.norm(sigma0, "fro") ** 2)
    if q <= 1e-14 * max(1.0, frob2) * max(1.0, float(dp @ dp)):
        raise DegenerateWitnessError(
            "sigma0^T (p1 - p2) = 0: required sigma*(p1-p2) != 0 fails, "
            "the two slopes are indistinguishable along the diffusion"
        )
    data = {"g0": 0.0, "beta0": np.zeros(p1.size), "rho0": 0.0, "v0": 0.0}
    if l_data:
        data.update({k: np.asarray(v, dtype=float) if k == "beta0" else float(v)
                     for k, v in l_data.items()})
    bend_expr = parse_expression("-(lam^3) * t^4 + (lam / 2) * t^2")

    lambdas, traces, terrs, gerrs, residuals = [], [], [], [], []
    max_ratio, radius = 0.0, 0.0
    for j in j_arr:
        lam = 4.0 * (j + kappa * frob2) / q
        _, d1, d2 = bend_expr.univariate_jet("t", 0.0, {"lam": lam})
        grad = 0.5 * d1 * dp + 0.5 * (p1 + p2)
        gerrs.append(float(np.max(np.abs(grad - 0.5 * (p1 + p2)))))
        hess = 0.25 * d2 * np.outer(dp, dp) - kappa * np.eye(p1.size)
        trace = float(np.trace(sigma0.T @ hess @ sigma0))
        traces.append(trace)
        terrs.append(abs(trace - j))
        # finite-difference cross-check of the trace on the actual callable
        phi = _phi_callable(lam, kappa, p1, p2)
        fd = 0.0
        for kcol in range(sigma0.shape[1]):
            c = sigma0[:, kcol]
            hstep = 1e-2 / (1.0 + np.sqrt(lam) * max(1.0, float(np.linalg.norm(c))))
            sten = (
                -phi(2 * hstep * c)
                + 16 * phi(hstep * c)
                - 30 * phi(0 * c)
                + 16 * phi(-hstep * c)
                - phi(-2 * hstep * c)
            ) / (12 * hstep * hstep)
            fd += sten
        if abs(fd - trace) > 1e-5 * max(1.0, abs(trace)):
            raise RegularityError(
                f"finite-difference trace {fd:.6e} disagrees with jet trace {trace:.6e}"
            )
        lambdas.append(lam)
        residuals.append(
            float(data["g0"])
            + 0.5 * float(np.asarray(data["beta0"]) @ (p1 + p2))
            + 0.5 * trace
            - float(data["rho0"]) * float(data["v0"])
        )
        # the bend must stay below |t|; sample generously around its active scale
        tgrid = np.linspace(-8.0 / lam, 8.0 / lam, 4001)
        bendv = -(lam**3) * tgrid**4 + 0.5 * lam * tgrid**2
        ratio = np.max(bendv[tgrid != 0.0] / np.abs(tgrid[tgrid != 0.0]))
        max_ratio = max(max_ratio, float(ratio))
        radius = max(radius, 8.0 / lam)
        if ratio > 1.0:
            raise RegularityError("bend exceeded |t|; quartic construction broken")
    return KinkWitness(
        p1=p1,
        p2=p2,
        kappa=float(kappa),
        sigma0=sigma0,
        a_label=a_label,
        j_list=tuple(j_arr),
        lambda_list=tuple(lambdas),
        trace_list=tuple(traces),
        trace_errors=tuple(terrs),
        gradient_errors=tuple(gerrs),
        residual_list=tuple(residuals),
        bend_bound_max_ratio=max_ratio,
        bend_bound_radius=radius,
    )


# ---------------------------------------------------------------------------
# smooth fit at free boundaries

@dataclass(frozen=True)
class SmoothFitReport:
    x: np.ndarray
    value_gap: float
    directions: tuple  # unit vectors tested inside the span
    derivative_gaps: tuple
    kernel_slopes: tuple  # reported, never judged
    tol_value: float
    tol_deriv: float
    skipped: bool = False
    skip_reason: str = ""

    @property
    def passed(self) -> bool:
        if self.skipped:
            return True
        return self.value_gap <= self.tol_value and all(
            g <= self.tol_deriv for g in self.derivative_gaps
        )


def detect_region_edge(grid: Grid, region: np.ndarray,
                       exclude_near_boundary: bool = True) -> np.ndarray:
    """Flat indices of region nodes with at least one axis neighbor outside."""
    nd = region.reshape(tuple(grid.points))
    edge = np.zeros_like(nd)
    for ax in range(grid.dim):
        lower_nb = np.roll(nd, 1, axis=ax)
        upper_nb = np.roll(nd, -1, axis=ax)
        sl_lo = [slice(None)] * grid.dim
        sl_lo[ax] = 0
        lower_nb[tuple(sl_lo)] = nd[tuple(sl_lo)]
        sl_hi = [slice(None)] * grid.dim
        sl_hi[ax] = -1
        upper_nb[tuple(sl_hi)] = nd[tuple(sl_hi)]
        edge |= nd & (~lower_nb | ~upper_nb)
    flat = np.flatnonzero(edge.reshape(-1))
    if exclude_near_boundary:
        near = grid.near_boundary_mask()
        flat = flat[~near[flat]]
    return flat


def smooth_fit_check(
    v: GridFunction,
    problem: ProblemSpec,
    region: np.ndarray,
    tol_value: float | None = None,
    tol_deriv: float | None = None,
    tau_rank: float = 1e-8,
    steps: Sequence[float] | None = None,
    max_points: int = 40,
) -> list[SmoothFitReport]:
    """Value and derivative pasting at the detected edge of the stop region.

    For each edge node: |v - payoff| against tol_value, and for each span
    direction the mismatch between the one-sided slopes of v and the payoff's
    analytic directional derivative against tol_deriv. Kernel directions are
    reported without a verdict; payoff kinks at a probe skip that point.
    """
    grid = v.grid
    if tol_value is None:
        tol_value = 10.0 * grid.max_spacing**2
    if tol_deriv is None:
        tol_deriv = 5.0 * grid.max_spacing
    edges = detect_region_edge(grid, np.asarray(region, dtype=bool))
    if edges.size > max_points:
        sel = np.linspace(0, edges.size - 1, max_points).astype(int)
        edges = edges[sel]
    reports: list[SmoothFitReport] = []
    for flat in edges:
        x = grid.node_coords(int(flat))
        basis = range_basis(problem, x, tau_rank)
        value_gap = abs(float(v.values[flat]) - float(problem.obstacle_at(x)[0]))
        dir_list, gap_list, kernel_slopes = [], [], []
        skipped, reason = False, ""
        env = problem.coefficients.env(x[None, :], None)
        for k in range(basis.rank):
            d = basis.basis[:, k]
            try:
                dg = problem.obstacle.directional_derivative(
                    env, {f"x{i + 1}": d[i] for i in range(grid.dim)}
                )
            except NondifferentiableError:
                skipped, reason = True, "payoff not differentiable at probe"
                break
            try:
                spl = one_sided_directional_derivative(v, x, d, "plus", steps)
                smi = one_sided_directional_derivative(v, x, d, "minus", steps)
            except OutOfBoxError:
                skipped, reason = True, "probe stencil escapes the box"
                break
            dgf = float(np.asarray(dg).reshape(-1)[0])
            dir_list.append(tuple(float(t) for t in d))
            gap_list.append(max(abs(spl - dgf), abs(smi - dgf)))
        if not skipped:
            for k in range(basis.kernel_basis.shape[1]):
                d = basis.kernel_basis[:, k]
                try:
                    spl = one_sided_directional_derivative(v, x, d, "plus", steps)
                    smi = one_sided_directional_derivative(v, x, d, "minus", steps)
                    kernel_slopes.append((float(spl), float(smi)))
                except OutOfBoxError:
                    kernel_slopes.append((float("nan"), float("nan")))
        reports.append(
            SmoothFitReport(
                x=x,
                value_gap=value_gap,
                directions=tuple(dir_list),
                derivative_gaps=tuple(gap_list),
                kernel_slopes=tuple(kernel_slopes),
                tol_value=tol_value,
                tol_deriv=tol_deriv,
                skipped=skipped,
                skip_reason=reason,
            )
        )
    return reports


# ---------------------------------------------------------------------------
# growth / Lipschitz / semiconvexity bounds

@dataclass(frozen=True)
class BoundsReport:
    M: float
    p: float
    growth_margin: float
    lipschitz_margin: float
    semiconvexity_margin: float
    worst_growth_x: np.ndarray
    worst_lipschitz_pair: tuple
    worst_semiconvexity_triple: tuple
    n_samples: int

    @property
    def passed(self) -> tuple[bool, bool, bool]:
        return (
            self.growth_margin >= 0,
            self.lipschitz_margin >= 0,
            self.semiconvexity_margin >= 0,
        )


def _bounds_samples(grid: Grid, n_samples: int, rng: np.random.Generator):
    span = grid.upper - grid.lower
    x = grid.lower + rng.random((n_samples, grid.dim)) * span
    y = grid.lower + rng.random((n_samples, grid.dim)) * span
    lam = rng.random(n_samples)
    return x, y, lam


def check_value_bounds(
    v: GridFunction,
    M: float,
    p: float = 2.0,
    n_samples: int = 10000,
    rng_seed: int = 0,
) -> BoundsReport:
    """Sampled polynomial growth, weighted Lipschitz, and weighted
    semiconvexity inequalities with constant M and exponent p >= 2.
    Margins are the worst slack (negative means the inequality failed).

    The field is only known through interpolation, so pair and triple
    inequalities are sampled at separations the grid resolves: pairs need
    |x - y| >= 4 max_spacing and triples need lambda(1-lambda)|x - y|^2 >=
    64 max_spacing^2, mirroring the semiconvexity certificate's floor.
    """
    if M <= 0:
        raise RegularityError("M must be > 0")
    grid = v.grid
    rng = np.random.default_rng(rng_seed)
    x, y, lam = _bounds_samples(grid, n_samples, rng)
    vx = v.interpolate(x)
    vy = v.interpolate(y)
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)

    growth = M * (1.0 + nx**p) - np.abs(vx)
    gi = int(np.argmin(growth))

    dist = np.linalg.norm(x - y, axis=1)
    pair_ok = dist >= 4.0 * grid.max_spacing
    lip = np.where(
        pair_ok,
        M * (1.0 + nx ** (p - 1) + ny ** (p - 1)) * dist - np.abs(vx - vy),
        np.inf,
    )
    li = int(np.argmin(lip))

    mid = lam[:, None] * x + (1.0 - lam)[:, None] * y
    excess = v.interpolate(mid) - lam * vx - (1.0 - lam) * vy
    triple_ok = lam * (1.0 - lam) * dist**2 >= 64.0 * grid.max_spacing**2
    semi = np.where(
        triple_ok,
        M * lam * (1.0 - lam) * (1.0 + nx ** (p - 2) + ny ** (p - 2)) * dist**2 - excess,
        np.inf,
    )
    si = int(np.argmin(semi))

    return BoundsReport(
        M=float(M),
        p=float(p),
        growth_margin=float(growth[gi]),
        lipschitz_margin=float(lip[li]),
        semiconvexity_margin=float(semi[si]),
        worst_growth_x=x[gi],
        worst_lipschitz_pair=(x[li].tolist(), y[li].tolist()),
        worst_semiconvexity_triple=(x[si].tolist(), y[si].tolist(), float(lam[si])),
        n_samples=n_samples,
    )


def fit_bound_constant(
    v: GridFunction,
    p: float = 2.0,
    n_samples: int = 4000,
    rng_seed: int = 1,
    safety: float = 1.1,
) -> float:
    """Smallest sampled M making all three inequalities hold, times a safety factor."""
    grid = v.grid
    rng = np.random.default_rng(rng_seed)
    x, y, lam = _bounds_samples(grid, n_samples, rng)
    vx = v.interpolate(x)
    vy = v.interpolate(y)
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    need = [np.max(np.abs(vx) / (1.0 + nx**p))]
    dist = np.linalg.norm(x - y, axis=1)
    ok = dist >= 4.0 * grid.max_spacing
    need.append(
        np.max(np.abs(vx - vy)[ok] / ((1.0 + nx ** (p - 1) + ny ** (p - 1)) * dist)[ok])
    )
    mid = lam[:, None] * x + (1.0 - lam)[:, None] * y
    excess = v.interpolate(mid) - lam * vx - (1.0 - lam) * vy
    okd = lam * (1.0 - lam) * dist**2 >= 64.0 * grid.max_spacing**2
    denom = lam * (1.0 - lam) * (1.0 + nx ** (p - 2) + ny ** (p - 2)) * dist**2
    pos = np.maximum(excess[okd], 0.0)
    need.append(np.max(pos / denom[okd]) if np.any(okd) else 0.0)
    return float(safety * max(max(need), 1e-12))
