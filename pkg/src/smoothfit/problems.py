"""Problem specifications, pointwise generator/Hamiltonian evaluation, benchmarks.

A problem bundles drift ``beta(x, a)``, diffusion loading ``sigma(x, a)``,
running reward ``g(x, a)`` and discount ``rho(x, a)`` as expression trees,
plus the class tag (drift control / optimal stopping / impulse control) and
the class-specific extras (stopping payoff, impulse costs, drift split).

``eval_L`` computes ``g + <beta, p> + 0.5 tr(sigma sigma* P) - rho r``;
``eval_H`` maximizes it over the sampled control set with deterministic
first-occurrence tie-breaking.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .expressions import Expression, ExpressionError, parse_expression
from .lattice import Grid, build_grid

__all__ = [
    "ProblemClass",
    "ControlSet",
    "Coefficients",
    "ProblemSpec",
    "BenchmarkOracle",
    "CatalogEntry",
    "ProblemConfigError",
    "eval_L",
    "eval_H",
    "catalog",
    "catalog_entry",
    "load_problem_config",
    "validate_wellposedness",
    "put_exponent",
    "put_free_boundary",
    "perpetual_put_value",
]


class ProblemConfigError(ValueError):
    """Invalid problem configuration document."""


class ProblemClass(Enum):
    DRIFT_CONTROL = "DriftControl"
    OPTIMAL_STOPPING = "OptimalStopping"
    IMPULSE_CONTROL = "ImpulseControl"


@dataclass(frozen=True)
class ControlSet:
    """Finite control sample; enumeration order is the tie-breaking order."""

    points: np.ndarray  # (k, d)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.size == 0:
            raise ProblemConfigError("control set must be nonempty")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def control_dim(self) -> int:
        return self.points.shape[1]

    @staticmethod
    def from_points(points) -> "ControlSet":
        return ControlSet(np.atleast_2d(np.asarray(points, dtype=float)))

    @staticmethod
    def from_box(lower, upper, samples) -> "ControlSet":
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        samples = np.atleast_1d(np.asarray(samples, dtype=np.int64))
        if not (lower.shape == upper.shape == samples.shape):
            raise ProblemConfigError("control box fields must share one shape")
        if np.any(samples < 1):
            raise ProblemConfigError("control box needs >= 1 sample per axis")
        axes = [
            np.linspace(lo, hi, int(k)) if k > 1 else np.asarray([0.5 * (lo + hi)])
            for lo, hi, k in zip(lower, upper, samples)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return ControlSet(np.stack(mesh, axis=-1).reshape(-1, lower.size))


def _parse_each(exprs, what: str) -> list[Expression]:
    out = []
    for i, text in enumerate(exprs):
        try:
            out.append(parse_expression(text) if isinstance(text, str) else text)
        except ExpressionError as exc:
            raise ProblemConfigError(f"{what}[{i}]: {exc}") from exc
    return out


@dataclass(frozen=True)
class Coefficients:
    """Expression-tree coefficients of the controlled generator."""

    beta: tuple  # n expressions
    sigma: tuple  # n rows of m expressions
    g: Expression
    rho: Expression
    constants: Mapping[str, float] = field(default_factory=dict)

    def env(self, x: np.ndarray, a: np.ndarray | None) -> dict:
        """Evaluation environment for points x (N, n) and one control a (d,)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        env = {f"x{i + 1}": x[:, i] for i in range(x.shape[1])}
        if a is not None:
            a = np.atleast_1d(np.asarray(a, dtype=float))
            env.update({f"a{j + 1}": a[j] for j in range(a.size)})
        env.update({k: float(v) for k, v in self.constants.items()})
        return env

    def _eval_vector(self, exprs, x, a) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        env = self.env(x, a)
        cols = [np.broadcast_to(np.asarray(e.evaluate(env)), (x.shape[0],)) for e in exprs]
        return np.stack(cols, axis=-1)

    def beta_at(self, x, a) -> np.ndarray:
        return self._eval_vector(self.beta, x, a)

    def sigma_at(self, x, a) -> np.ndarray:
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        rows = [self._eval_vector(row, x2, a) for row in self.sigma]
        return np.stack(rows, axis=1)  # (N, n, m)

    def g_at(self, x, a) -> np.ndarray:
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        env = self.env(x2, a)
        return np.broadcast_to(np.asarray(self.g.evaluate(env)), (x2.shape[0],)).astype(float)

    def rho_at(self, x, a) -> np.ndarray:
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        env = self.env(x2, a)
        return np.broadcast_to(np.asarray(self.rho.evaluate(env)), (x2.shape[0],)).astype(float)


@dataclass(frozen=True)
class ProblemSpec:
    problem_class: ProblemClass
    n: int
    m: int
    coefficients: Coefficients
    control_set: ControlSet
    obstacle: Expression | None = None
    impulse_costs: tuple[float, float] | None = None
    drift_split: tuple[tuple, tuple] | None = None  # (beta0 exprs, beta1 exprs)
    name: str = ""

    def __post_init__(self):
        if self.problem_class is ProblemClass.OPTIMAL_STOPPING and self.obstacle is None:
            raise ProblemConfigError("optimal stopping problems require an obstacle")
        if self.problem_class is ProblemClass.IMPULSE_CONTROL:
            if self.impulse_costs is None:
                raise ProblemConfigError("impulse problems require impulse_costs (c0, c1)")
            c0, c1 = self.impulse_costs
            if not (c0 > 0 and c1 > 0):
                raise ProblemConfigError("impulse costs must satisfy c0 > 0 and c1 > 0")

    def obstacle_at(self, x) -> np.ndarray:
        if self.obstacle is None:
            raise ProblemConfigError("problem has no obstacle")
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        env = self.coefficients.env(x2, None)
        return np.broadcast_to(np.asarray(self.obstacle.evaluate(env)), (x2.shape[0],)).astype(float)

    def beta_split_at(self, x, a) -> tuple[np.ndarray, np.ndarray]:
        if self.drift_split is None:
            raise ProblemConfigError("problem has no drift split")
        beta0_exprs, beta1_exprs = self.drift_split
        b0 = self.coefficients._eval_vector(beta0_exprs, x, None)
        b1 = self.coefficients._eval_vector(beta1_exprs, x, a)
        return b0, b1

    def validate_on(self, grid: Grid, n_samples: int = 200, rng_seed: int = 0) -> None:
        """Sampled invariant checks: finiteness, rho >= 0, drift-split consistency."""
        rng = np.random.default_rng(rng_seed)
        pts = grid.lower + rng.random((n_samples, grid.dim)) * (grid.upper - grid.lower)
        controls = self.control_set.points
        picks = controls[rng.integers(0, len(controls), size=min(8, len(controls)))]
        for a in picks:
            beta = self.coefficients.beta_at(pts, a)
            sig = self.coefficients.sigma_at(pts, a)
            gv = self.coefficients.g_at(pts, a)
            rv = self.coefficients.rho_at(pts, a)
            for arr, what in ((beta, "beta"), (sig, "sigma"), (gv, "g"), (rv, "rho")):
                if not np.all(np.isfinite(arr)):
                    raise ProblemConfigError(f"{what} is not finite on the box")
            if np.any(rv < 0):
                raise ProblemConfigError("rho must be >= 0 on the box")
            if self.drift_split is not None:
                b0, b1 = self.beta_split_at(pts, a)
                gap = np.max(np.abs(b0 + b1 - beta))
                if gap > 1e-12:
                    raise ProblemConfigError(
                        f"drift split inconsistent with beta: max gap {gap:.3e}"
                    )
        if self.obstacle is not None:
            ov = self.obstacle_at(pts)
            if not np.all(np.isfinite(ov)):
                raise ProblemConfigError("obstacle is not finite on the box")


def eval_L(problem: ProblemSpec, a, x, r: float, p, P) -> float:
    """g + <beta, p> + 0.5 tr(sigma sigma* P) - rho r at one point and control."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if not np.allclose(P, P.T, atol=1e-12):
        raise ValueError("P must be symmetric")
    coeff = problem.coefficients
    beta = coeff.beta_at(x[None, :], a)[0]
    sigma = coeff.sigma_at(x[None, :], a)[0]
    gval = float(coeff.g_at(x[None, :], a)[0])
    rho = float(coeff.rho_at(x[None, :], a)[0])
    trace = float(np.trace(sigma @ sigma.T @ P))
    return gval + float(beta @ p) + 0.5 * trace - rho * float(r)


def eval_H(problem: ProblemSpec, x, r: float, p, P) -> tuple[float, np.ndarray]:
    """sup over the sampled control set; returns (value, first-occurrence argmax)."""
    controls = problem.control_set.points
    if len(controls) == 0:
        raise ProblemConfigError("empty sampled control set")
    best_val = -np.inf
    best_a = controls[0]
    for a in controls:
        val = eval_L(problem, a, x, r, p, P)
        if val > best_val:
            best_val = val
            best_a = a
    return best_val, np.asarray(best_a, dtype=float)


# ---------------------------------------------------------------------------
# benchmark catalog

@dataclass(frozen=True)
class BenchmarkOracle:
    name: str
    closed_form_value: Callable[[np.ndarray], np.ndarray] | None = None
    free_boundary: float | Callable | None = None
    note: str = ""
    properties: Mapping[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class CatalogEntry:
    key: str
    problem: ProblemSpec
    grid: Grid
    oracle: BenchmarkOracle


def put_exponent(mu: float, s: float, rho0: float) -> float:
    """Negative root of 0.5 s^2 b (b - 1) + mu b - rho0 = 0."""
    a = 0.5 * s * s
    b = mu - 0.5 * s * s
    c = -rho0
    disc = b * b - 4.0 * a * c
    if disc <= 0 or a <= 0:
        raise ValueError("no real negative root for these parameters")
    return (-b - np.sqrt(disc)) / (2.0 * a)


def put_free_boundary(K: float, mu: float, s: float, rho0: float) -> float:
    beta = put_exponent(mu, s, rho0)
    return K * beta / (beta - 1.0)


def perpetual_put_value(x, K: float, mu: float, s: float, rho0: float) -> np.ndarray:
    """Closed-form value of the perpetual stopping payoff (K - x)^+ under GBM."""
    beta = put_exponent(mu, s, rho0)
    bstar = K * beta / (beta - 1.0)
    ccoef = (K - bstar) * bstar ** (-beta)
    x = np.asarray(x, dtype=float)
    return np.where(x <= bstar, K - x, ccoef * np.maximum(x, 1e-300) ** beta)


def _coeffs(n, m, beta, sigma, g, rho, constants) -> Coefficients:
    beta_e = tuple(_parse_each(beta, "beta"))
    if len(beta_e) != n:
        raise ProblemConfigError(f"beta needs {n} components, got {len(beta_e)}")
    if len(sigma) != n or any(len(row) != m for row in sigma):
        raise ProblemConfigError(f"sigma must be {n}x{m} expressions")
    sigma_e = tuple(tuple(_parse_each(row, "sigma")) for row in sigma)
    return Coefficients(
        beta=beta_e,
        sigma=sigma_e,
        g=parse_expression(g) if isinstance(g, str) else g,
        rho=parse_expression(rho) if isinstance(rho, str) else rho,
        constants=dict(constants),
    )


B1_PARAMS = {"K": 1.0, "mu": 0.0, "s": 0.2, "rho0": 0.05}
B2_PARAMS = {"K": 1.0, "mu1": 0.03, "mu2": 0.02, "s1": 0.25, "s2": 0.2, "rho0": 0.08}
B3_PARAMS = {"K0": 1.0, "slope": 0.3, "x2star": 0.0, "s": 0.2, "rho0": 0.05}
B4_PARAMS = {"eps": 0.1, "sig": 0.1, "rho0": 1.0}
B5_PARAMS = {"sig": 0.3, "rho0": 1.0, "c0": 0.1, "c1": 0.05}


def _b1_entry() -> CatalogEntry:
    p = B1_PARAMS
    problem = ProblemSpec(
        problem_class=ProblemClass.OPTIMAL_STOPPING,
        n=1,
        m=1,
        coefficients=_coeffs(1, 1, ["mu * x1"], [["s * x1"]], "0", "rho0", p),
        control_set=ControlSet.from_points([[0.0]]),
        obstacle=parse_expression("pos(K - x1)"),
        name="b1_perpetual_put",
    )
    grid = build_grid([0.01], [4.0], [4000])
    oracle = BenchmarkOracle(
        name="perpetual put (GBM, payoff (K-x)^+)",
        closed_form_value=lambda x: perpetual_put_value(
            np.atleast_2d(x)[:, 0], p["K"], p["mu"], p["s"], p["rho0"]
        ),
        free_boundary=put_free_boundary(p["K"], p["mu"], p["s"], p["rho0"]),
        note="continuation value C x^beta with beta the negative quadratic root; "
        "constants recomputed from the quadratic, never hard-coded",
        properties={"convex": True},
    )
    return CatalogEntry("b1", problem, grid, oracle)


def _b2_entry() -> CatalogEntry:
    p = B2_PARAMS
    problem = ProblemSpec(
        problem_class=ProblemClass.OPTIMAL_STOPPING,
        n=2,
        m=2,
        coefficients=_coeffs(
            2,
            2,
            ["mu1 * x1", "mu2 * x2"],
            [["s1 * x1", "0"], ["0", "s2 * x2"]],
            "0",
            "rho0",
            p,
        ),
        control_set=ControlSet.from_points([[0.0]]),
        obstacle=parse_expression("pos(K - x1 - x2)"),
        name="b2_basket_put",
    )
    grid = build_grid([0.05, 0.05], [3.0, 3.0], [121, 121])
    oracle = BenchmarkOracle(
        name="two-asset basket put (no closed form)",
        note="oracle is convexity of the payoff plus value bounds 0 <= V <= K",
        properties={"convex": True, "upper_bound": p["K"], "lower_bound": 0.0},
    )
    return CatalogEntry("b2", problem, grid, oracle)


def _b3_entry() -> CatalogEntry:
    p = B3_PARAMS

    def slice_value(x: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        strike = p["K0"] + p["slope"] * np.abs(pts[:, 1] - p["x2star"])
        return np.asarray(
            [
                perpetual_put_value(x1, k, 0.0, p["s"], p["rho0"])
                for x1, k in zip(pts[:, 0], strike)
            ]
        )

    problem = ProblemSpec(
        problem_class=ProblemClass.OPTIMAL_STOPPING,
        n=2,
        m=2,
        coefficients=_coeffs(
            2,
            2,
            ["0", "0"],
            [["s * x1", "0"], ["0", "0"]],
            "0",
            "rho0",
            p,
        ),
        control_set=ControlSet.from_points([[0.0]]),
        obstacle=parse_expression("pos(K0 + slope * abs(x2 - x2star) - x1)"),
        name="b3_degenerate_slice_put",
    )
    grid = build_grid([0.01, -1.0], [4.0, 1.0], [401, 81])
    oracle = BenchmarkOracle(
        name="rank-1 diffusion stopping problem, per-slice put oracle",
        closed_form_value=slice_value,
        free_boundary=lambda x2: put_free_boundary(
            p["K0"] + p["slope"] * abs(x2 - p["x2star"]), 0.0, p["s"], p["rho0"]
        ),
        note="x2 is frozen (row 2 of sigma and beta vanish); value is the 1-d put "
        "with strike K(x2), kinked in x2 at x2star, smooth in x1 on continuation",
        properties={"kink_line_x2": p["x2star"]},
    )
    return CatalogEntry("b3", problem, grid, oracle)


def _b4_entry() -> CatalogEntry:
    p = B4_PARAMS
    problem = ProblemSpec(
        problem_class=ProblemClass.DRIFT_CONTROL,
        n=1,
        m=1,
        coefficients=_coeffs(
            1, 1, ["a1 - x1"], [["sig"]], "-(x1^2) - eps * a1^2", "rho0", p
        ),
        control_set=ControlSet.from_box([-1.0], [1.0], [21]),
        drift_split=(
            tuple(_parse_each(["-x1"], "beta0")),
            tuple(_parse_each(["a1"], "beta1")),
        ),
        name="b4_drift_control",
    )
    grid = build_grid([-2.0], [2.0], [2001])
    oracle = BenchmarkOracle(
        name="mean-reverting drift control with quadratic costs",
        note="no closed form; verified by self-convergence and Monte Carlo gap",
        properties={"convexity_not_asserted": True},
    )
    return CatalogEntry("b4", problem, grid, oracle)


def _b5_entry() -> CatalogEntry:
    p = B5_PARAMS
    problem = ProblemSpec(
        problem_class=ProblemClass.IMPULSE_CONTROL,
        n=1,
        m=1,
        coefficients=_coeffs(1, 1, ["-x1"], [["sig"]], "-(x1^2)", "rho0", p),
        control_set=ControlSet.from_points([[0.0]]),
        impulse_costs=(p["c0"], p["c1"]),
        name="b5_impulse_mean_reverting",
    )
    grid = build_grid([-2.0], [2.0], [801])
    oracle = BenchmarkOracle(
        name="1-d mean-reverting impulse benchmark",
        note="no closed form; verified through the quasi-variational inequality "
        "complementarity margins and monotone outer iterates",
    )
    return CatalogEntry("b5", problem, grid, oracle)


def catalog() -> list[CatalogEntry]:
    """Benchmark problems with their default grids and oracles."""
    return [_b1_entry(), _b2_entry(), _b3_entry(), _b4_entry(), _b5_entry()]


def catalog_entry(key: str) -> CatalogEntry:
    for entry in catalog():
        if entry.key == key:
            return entry
    raise KeyError(f"no catalog entry {key!r}")


# ---------------------------------------------------------------------------
# JSON problem configs

_TOP_FIELDS = {
    "class",
    "n",
    "m",
    "box",
    "coefficients",
    "control_set",
    "obstacle",
    "impulse_costs",
    "drift_split",
    "constants",
    "name",
}
_COEFF_FIELDS = {"beta", "sigma", "g", "rho"}
_BOX_FIELDS = {"lower", "upper", "points"}
_CONTROL_FIELDS = {"points", "interval"}


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ProblemConfigError(f"missing field {where}.{key}")
    return obj[key]


def load_problem_config(source) -> tuple[ProblemSpec, Grid]:
    """Load a problem + grid from a JSON document (dict, text, or path).

    Unknown fields are rejected so that typos fail loudly.
    """
    if isinstance(source, (str, Path)) and not str(source).lstrip().startswith("{"):
        obj = json.loads(Path(source).read_text())
    elif isinstance(source, str):
        obj = json.loads(source)
    else:
        obj = source
    if not isinstance(obj, dict):
        raise ProblemConfigError("problem config must be a JSON object")

    unknown = set(obj) - _TOP_FIELDS
    if unknown:
        raise ProblemConfigError(f"unknown problem fields: {sorted(unknown)}")

    cls_text = _require(obj, "class", "problem")
    try:
        cls = ProblemClass(cls_text)
    except ValueError:
        raise ProblemConfigError(
            f"class must be one of {[c.value for c in ProblemClass]}, got {cls_text!r}"
        ) from None
    n = int(_require(obj, "n", "problem"))
    m = int(_require(obj, "m", "problem"))

    box = _require(obj, "box", "problem")
    if set(box) - _BOX_FIELDS:
        raise ProblemConfigError(f"unknown box fields: {sorted(set(box) - _BOX_FIELDS)}")
    grid = build_grid(box["lower"], box["upper"], box["points"])
    if grid.dim != n:
        raise ProblemConfigError(f"box dimension {grid.dim} != n = {n}")

    coeffs_obj = _require(obj, "coefficients", "problem")
    if set(coeffs_obj) - _COEFF_FIELDS:
        raise ProblemConfigError(
            f"unknown coefficient fields: {sorted(set(coeffs_obj) - _COEFF_FIELDS)}"
        )
    constants = {k: float(v) for k, v in obj.get("constants", {}).items()}
    coefficients = _coeffs(
        n,
        m,
        _require(coeffs_obj, "beta", "coefficients"),
        _require(coeffs_obj, "sigma", "coefficients"),
        _require(coeffs_obj, "g", "coefficients"),
        _require(coeffs_obj, "rho", "coefficients"),
        constants,
    )

    ctrl_obj = _require(obj, "control_set", "problem")
    if set(ctrl_obj) - _CONTROL_FIELDS:
        raise ProblemConfigError(
            f"unknown control_set fields: {sorted(set(ctrl_obj) - _CONTROL_FIELDS)}"
        )
    if "points" in ctrl_obj:
        control_set = ControlSet.from_points(ctrl_obj["points"])
    elif "interval" in ctrl_obj:
        iv = ctrl_obj["interval"]
        control_set = ControlSet.from_box(iv["lower"], iv["upper"], iv["samples"])
    else:
        raise ProblemConfigError("control_set needs 'points' or 'interval'")

    obstacle = None
    if obj.get("obstacle") is not None:
        obstacle = parse_expression(obj["obstacle"])
    impulse_costs = None
    if obj.get("impulse_costs") is not None:
        ic = obj["impulse_costs"]
        impulse_costs = (float(ic["c0"]), float(ic["c1"]))
    drift_split = None
    if obj.get("drift_split") is not None:
        ds = obj["drift_split"]
        drift_split = (
            tuple(_parse_each(ds["beta0"], "drift_split.beta0")),
            tuple(_parse_each(ds["beta1"], "drift_split.beta1")),
        )

    problem = ProblemSpec(
        problem_class=cls,
        n=n,
        m=m,
        coefficients=coefficients,
        control_set=control_set,
        obstacle=obstacle,
        impulse_costs=impulse_costs,
        drift_split=drift_split,
        name=str(obj.get("name", "")),
    )
    problem.validate_on(grid)
    return problem, grid


def validate_wellposedness(problem: ProblemSpec, grid: Grid, n_samples: int = 400,
                           rng_seed: int = 0) -> list[str]:
    """Heuristic well-posedness screening; returns warning strings, never raises.

    Checks a sampled positive lower bound on the discount rate and roughly
    sublinear growth of beta and sigma against the box diameter.
    """
    warnings: list[str] = []
    rng = np.random.default_rng(rng_seed)
    pts = grid.lower + rng.random((n_samples, grid.dim)) * (grid.upper - grid.lower)
    a0 = problem.control_set.points[0]
    rho = problem.coefficients.rho_at(pts, a0)
    if np.min(rho) <= 0:
        warnings.append("discount rate is not bounded away from zero on the box")
    scale = 1.0 + np.linalg.norm(pts, axis=1)
    beta_norm = np.linalg.norm(problem.coefficients.beta_at(pts, a0), axis=1)
    sigma_norm = np.linalg.norm(
        problem.coefficients.sigma_at(pts, a0).reshape(n_samples, -1), axis=1
    )
    for nrm, what in ((beta_norm, "beta"), (sigma_norm, "sigma")):
        ratio = np.max(nrm / scale)
        if ratio > 50.0:
            warnings.append(f"{what} grows fast relative to 1 + |x| (ratio {ratio:.1f})")
    if np.min(rho) > 0:
        growth = np.max(np.abs(problem.coefficients.g_at(pts, a0))) / max(np.min(rho), 1e-12)
        if growth > 1e6:
            warnings.append("g / rho is very large; value may be near overflow scale")
    return warnings
