"""Uniform tensor grids on boxes, scalar grid fields, and derivative probes.

Everything downstream (solvers, regularity probes, synthesis) works on two
objects: `Grid`, a uniform tensor product of axis points on a box, and
`GridFunction`, node values equipped with multilinear interpolation.
Node coordinates are always reproduced as ``lower[i] + k * spacing[i]`` so
that serialization round-trips bit-exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from itertools import product
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "LatticeError",
    "OutOfBoxError",
    "Grid",
    "GridFunction",
    "Stencil",
    "StencilKind",
    "build_grid",
    "interpolate",
    "one_sided_directional_derivative",
    "default_probe_steps",
    "axis_slope_field",
]


class LatticeError(ValueError):
    """Invalid grid construction or grid-function data."""


class OutOfBoxError(LatticeError):
    """A query point or probe step left the grid box."""


def _as_vector(v, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.ndim != 1:
        raise LatticeError(f"{name} must be a 1-d vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on the box [lower, upper], row-major node order."""

    lower: np.ndarray
    upper: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        lower = _as_vector(self.lower, "lower")
        upper = _as_vector(self.upper, "upper")
        points = np.atleast_1d(np.asarray(self.points, dtype=np.int64))
        if not (lower.shape == upper.shape == points.shape):
            raise LatticeError(
                f"dimension mismatch: lower {lower.shape}, upper {upper.shape}, "
                f"points {points.shape}"
            )
        if np.any(upper - lower <= 0):
            raise LatticeError("non-positive extent: require lower < upper componentwise")
        if np.any(points < 3):
            raise LatticeError("need at least 3 points per axis")
        for arr, name in ((lower, "lower"), (upper, "upper"), (points, "points")):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / (self.points - 1)

    @property
    def node_count(self) -> int:
        return int(np.prod(self.points))

    @property
    def max_spacing(self) -> float:
        return float(np.max(self.spacing))

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.lower[axis] + np.arange(self.points[axis]) * self.spacing[axis]

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape (node_count, dim), row-major order."""
        axes = [self.axis_coords(i) for i in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.dim)

    def flat_index(self, multi: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(int(k) for k in multi), tuple(self.points)))

    def multi_index(self, flat: int) -> tuple[int, ...]:
        return tuple(int(k) for k in np.unravel_index(int(flat), tuple(self.points)))

    def node_coords(self, flat: int) -> np.ndarray:
        multi = np.asarray(self.multi_index(flat), dtype=float)
        return self.lower + multi * self.spacing

    def nearest_flat_index(self, x):
        """Flat index of the closest node to each query point (clipped to the box).

        A single point (dim,) returns an int; a batch (Q, dim) returns an array.
        """
        single = np.asarray(x, dtype=float).ndim == 1
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        idx = np.rint((pts - self.lower) / self.spacing).astype(np.int64)
        idx = np.clip(idx, 0, self.points - 1)
        flat = np.ravel_multi_index(tuple(idx.T), tuple(self.points))
        return int(flat[0]) if single else flat

    def contains(self, x, rtol: float = 1e-12) -> bool:
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        tol = rtol * (self.upper - self.lower)
        return bool(np.all(pts >= self.lower - tol) and np.all(pts <= self.upper + tol))

    def interior_mask(self) -> np.ndarray:
        """Boolean flat mask of nodes strictly inside along every axis."""
        mask = np.ones(tuple(self.points), dtype=bool)
        for ax in range(self.dim):
            sl = [slice(None)] * self.dim
            sl[ax] = 0
            mask[tuple(sl)] = False
            sl[ax] = -1
            mask[tuple(sl)] = False
        return mask.reshape(-1)

    def near_boundary_mask(self, width_mult: float = 2.0) -> np.ndarray:
        """Nodes within width_mult * max_spacing of the box boundary (flat mask)."""
        width = width_mult * self.max_spacing
        nodes = self.nodes()
        close_low = np.any(nodes - self.lower < width, axis=1)
        close_high = np.any(self.upper - nodes < width, axis=1)
        return close_low | close_high

    def is_near_boundary(self, x, width_mult: float = 2.0) -> bool:
        pt = _as_vector(x, "x")
        width = width_mult * self.max_spacing
        return bool(np.any(pt - self.lower < width) or np.any(self.upper - pt < width))

    def to_json_dict(self) -> dict:
        return {
            "dim": self.dim,
            "lower": [float(v) for v in self.lower],
            "upper": [float(v) for v in self.upper],
            "points": [int(v) for v in self.points],
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "Grid":
        grid = Grid(
            lower=np.asarray(obj["lower"], dtype=float),
            upper=np.asarray(obj["upper"], dtype=float),
            points=np.asarray(obj["points"], dtype=np.int64),
        )
        if int(obj.get("dim", grid.dim)) != grid.dim:
            raise LatticeError("dim field inconsistent with lower/upper/points")
        return grid


def build_grid(lower, upper, points) -> Grid:
    """Build a uniform tensor grid; spacing is (upper - lower) / (points - 1)."""
    return Grid(
        lower=_as_vector(lower, "lower"),
        upper=_as_vector(upper, "upper"),
        points=np.atleast_1d(np.asarray(points, dtype=np.int64)),
    )


class GridFunction:
    """Scalar field on a grid: flat row-major node values + multilinear interpolation.

    Immutable after construction; all evaluation methods are pure.
    """

    def __init__(self, grid: Grid, values):
        values = np.asarray(values, dtype=float).reshape(-1).copy()
        if values.size != grid.node_count:
            raise LatticeError(
                f"values length {values.size} does not match node count {grid.node_count}"
            )
        if not np.all(np.isfinite(values)):
            raise LatticeError("grid-function values must all be finite")
        values.setflags(write=False)
        self.grid = grid
        self.values = values

    @staticmethod
    def from_callable(grid: Grid, fn: Callable[[np.ndarray], np.ndarray]) -> "GridFunction":
        return GridFunction(grid, np.asarray(fn(grid.nodes()), dtype=float))

    @property
    def values_nd(self) -> np.ndarray:
        return self.values.reshape(tuple(self.grid.points))

    def interpolate(self, x):
        """Multilinear interpolation at points inside the box.

        Accepts a single point (dim,) or a batch (Q, dim); exact at nodes and
        for affine fields.
        """
        single = np.asarray(x, dtype=float).ndim == 1
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        if pts.shape[1] != self.grid.dim:
            raise LatticeError(f"query dimension {pts.shape[1]} != grid dim {self.grid.dim}")
        lo, hi = self.grid.lower, self.grid.upper
        tol = 1e-12 * (hi - lo)
        if np.any(pts < lo - tol) or np.any(pts > hi + tol):
            bad = pts[np.any((pts < lo - tol) | (pts > hi + tol), axis=1)][0]
            raise OutOfBoxError(f"query point {bad.tolist()} outside box")
        pts = np.clip(pts, lo, hi)
        u = (pts - lo) / self.grid.spacing
        base = np.minimum(np.floor(u).astype(np.int64), self.grid.points - 2)
        frac = u - base
        out = np.zeros(pts.shape[0])
        shape = tuple(self.grid.points)
        for corner in product((0, 1), repeat=self.grid.dim):
            idx = base + np.asarray(corner, dtype=np.int64)
            w = np.ones(pts.shape[0])
            for ax, c in enumerate(corner):
                w *= frac[:, ax] if c else (1.0 - frac[:, ax])
            flat = np.ravel_multi_index(tuple(idx.T), shape)
            out += w * self.values[flat]
        return float(out[0]) if single else out

    def to_json_dict(self) -> dict:
        d = self.grid.to_json_dict()
        d["values"] = [float(v) for v in self.values]
        return d

    @staticmethod
    def from_json_dict(obj: dict) -> "GridFunction":
        return GridFunction(Grid.from_json_dict(obj), np.asarray(obj["values"], dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), allow_nan=False)

    @staticmethod
    def from_json(text: str) -> "GridFunction":
        return GridFunction.from_json_dict(json.loads(text))


def interpolate(f: GridFunction, x):
    return f.interpolate(x)


class StencilKind(Enum):
    FIRST_FORWARD = "first_forward"
    FIRST_BACKWARD = "first_backward"
    FIRST_CENTRAL = "first_central"
    SECOND_CENTRAL = "second_central"


@dataclass(frozen=True)
class Stencil:
    """Nodal finite-difference probe along one axis with a step multiplier."""

    kind: StencilKind
    step_multiplier: int = 1

    def __post_init__(self):
        if self.step_multiplier < 1:
            raise LatticeError("step_multiplier must be >= 1")

    def apply(self, f: GridFunction, flat: int, axis: int) -> float:
        grid = f.grid
        multi = list(grid.multi_index(flat))
        k = self.step_multiplier
        h = grid.spacing[axis] * k

        def at(offset: int) -> float:
            shifted = list(multi)
            shifted[axis] += offset
            if not (0 <= shifted[axis] < grid.points[axis]):
                raise OutOfBoxError("stencil reaches outside the grid")
            return float(f.values[grid.flat_index(shifted)])

        if self.kind is StencilKind.FIRST_FORWARD:
            return (at(k) - at(0)) / h
        if self.kind is StencilKind.FIRST_BACKWARD:
            return (at(0) - at(-k)) / h
        if self.kind is StencilKind.FIRST_CENTRAL:
            return (at(k) - at(-k)) / (2 * h)
        return (at(k) - 2 * at(0) + at(-k)) / h**2


def _richardson_to_zero(steps: np.ndarray, samples: np.ndarray) -> float:
    """Neville polynomial extrapolation of samples(step) to step -> 0."""
    table = samples.astype(float).copy()
    k = len(steps)
    for level in range(1, k):
        for i in range(k - level):
            s_i, s_ik = steps[i], steps[i + level]
            table[i] = table[i + 1] + (table[i + 1] - table[i]) * s_ik / (s_i - s_ik)
    return float(table[0])


def default_probe_steps(grid: Grid, direction) -> list[float]:
    """Default decreasing step list {4s, 2s, s}, s = spacing projected on the direction."""
    d = _as_vector(direction, "direction")
    norm = np.linalg.norm(d)
    if norm == 0:
        raise LatticeError("zero direction")
    s = float(np.linalg.norm((d / norm) * grid.spacing))
    return [4.0 * s, 2.0 * s, s]


def one_sided_directional_derivative(
    f: GridFunction,
    x,
    direction,
    side: str,
    steps: Sequence[float] | None = None,
) -> float:
    """One-sided directional slope by Richardson extrapolation over a step list.

    side="plus" extrapolates (f(x + s h) - f(x)) / s as s -> 0; side="minus"
    extrapolates (f(x) - f(x - s h)) / s, so at a kink of |x| the two sides
    return the two one-sided slopes. Steps must be strictly decreasing with at
    least two entries, and every probe point must stay inside the box.
    """
    if side not in ("plus", "minus"):
        raise LatticeError(f"side must be 'plus' or 'minus', got {side!r}")
    x0 = _as_vector(x, "x")
    d = _as_vector(direction, "direction")
    norm = np.linalg.norm(d)
    if norm == 0:
        raise LatticeError("zero direction")
    d = d / norm
    if steps is None:
        steps = default_probe_steps(f.grid, d)
    steps_arr = np.asarray(list(steps), dtype=float)
    if steps_arr.size < 2:
        raise LatticeError("need at least 2 probe steps")
    if np.any(steps_arr <= 0) or np.any(np.diff(steps_arr) >= 0):
        raise LatticeError("steps must be positive and strictly decreasing")
    sign = 1.0 if side == "plus" else -1.0
    probe_pts = x0[None, :] + sign * steps_arr[:, None] * d[None, :]
    if not f.grid.contains(probe_pts):
        raise OutOfBoxError("probe step escapes the grid box")
    f0 = f.interpolate(x0)
    fs = f.interpolate(probe_pts)
    quotients = sign * (fs - f0) / steps_arr
    return _richardson_to_zero(steps_arr, quotients)


def axis_slope_field(f: GridFunction, axis: int, side: str) -> np.ndarray:
    """Extrapolated one-sided slope along a grid axis at every node.

    Uses nodal offsets {4, 2, 1} cells where the grid allows, degrading to
    {2, 1} and a plain one-cell quotient near the edge. Fast path used by the
    feedback synthesizer; matches one_sided_directional_derivative at nodes
    with full margin.
    """
    if side not in ("plus", "minus"):
        raise LatticeError(f"side must be 'plus' or 'minus', got {side!r}")
    grid = f.grid
    vals = f.values_nd
    h = grid.spacing[axis]
    npts = int(grid.points[axis])
    sign = 1 if side == "plus" else -1
    out = np.full(vals.shape, np.nan)

    idx = np.arange(npts)
    margin = (npts - 1 - idx) if side == "plus" else idx

    def shifted(k: int) -> np.ndarray:
        return np.take(vals, np.clip(idx + sign * k, 0, npts - 1), axis=axis)

    base = np.take(vals, idx, axis=axis)
    quot = {k: sign * (shifted(k) - base) / (k * h) for k in (1, 2, 4)}

    # broadcastable margin along the probed axis
    mshape = [1] * vals.ndim
    mshape[axis] = npts
    marg = margin.reshape(mshape)

    steps3 = np.asarray([4.0, 2.0, 1.0]) * h
    est3 = _vector_richardson(steps3, [quot[4], quot[2], quot[1]])
    steps2 = np.asarray([2.0, 1.0]) * h
    est2 = _vector_richardson(steps2, [quot[2], quot[1]])
    out = np.where(marg >= 4, est3, np.where(marg >= 2, est2, quot[1]))
    # nodes with zero margin have no one-sided sample at all
    out = np.where(marg >= 1, out, np.nan)
    return out.reshape(-1)


def _vector_richardson(steps: np.ndarray, samples: list[np.ndarray]) -> np.ndarray:
    table = [s.astype(float).copy() for s in samples]
    k = len(steps)
    for level in range(1, k):
        for i in range(k - level):
            s_i, s_ik = steps[i], steps[i + level]
            table[i] = table[i + 1] + (table[i + 1] - table[i]) * s_ik / (s_i - s_ik)
    return table[0]
