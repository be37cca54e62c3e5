#!/usr/bin/env python3
"""Solve one benchmark, verify its regularity, and print a short summary.

Usage: python scripts/run_benchmark.py --key b1 [--out out/b1]
"""
import argparse
import time

import numpy as np

import smoothfit as sf
from smoothfit.problems import ProblemClass, catalog_entry
from smoothfit.regularity import local_derivative_scale
from smoothfit.synthesis import FeedbackPolicy


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--key", default="b1", choices=["b1", "b2", "b3", "b4", "b5"])
    parser.add_argument("--tol", type=float, default=1e-8)
    args = parser.parse_args()

    e = catalog_entry(args.key)
    print(f"== {e.key}: {e.oracle.name}")
    t0 = time.monotonic()
    if e.problem.problem_class is ProblemClass.DRIFT_CONTROL:
        v, policy, report = sf.policy_iteration(e.problem, e.grid, tol=args.tol)
        region = None
    elif e.problem.problem_class is ProblemClass.OPTIMAL_STOPPING:
        v, region, report = sf.solve_obstacle(e.problem, e.grid, tol=args.tol)
    else:
        v, region, report = sf.solve_impulse_qvi(e.problem, e.grid, tol=args.tol)
    print(f"solved in {time.monotonic() - t0:.2f}s, {report.iterations} sweeps, "
          f"residual {report.residual:.2e}")

    if e.oracle.closed_form_value is not None:
        oracle = e.oracle.closed_form_value(e.grid.nodes())
        err = np.abs(v.values - oracle)
        print(f"|V - oracle|_inf = {err.max():.2e}")
    if region is not None and isinstance(e.oracle.free_boundary, float):
        bhat = e.grid.nodes()[region][:, 0].max()
        print(f"free boundary: detected {bhat:.5f} vs oracle {e.oracle.free_boundary:.5f}")

    # a few interior regularity probes
    rng = np.random.default_rng(0)
    span = e.grid.upper - e.grid.lower
    probes = e.grid.lower + (0.25 + 0.5 * rng.random((5, e.grid.dim))) * span
    for x in probes:
        basis = sf.range_basis(e.problem, x)
        if basis.trivial:
            continue
        reports = sf.directional_smoothness(v, x, basis)
        scale = local_derivative_scale(reports)
        kinds = {r.classification for r in reports if r.in_range}
        print(f"  probe {np.round(x, 3).tolist()}: span rank {basis.rank}, "
              f"span classes {sorted(kinds)}, derivative scale {scale:.3f}")

    if region is not None and e.problem.problem_class is ProblemClass.OPTIMAL_STOPPING:
        fits = sf.smooth_fit_check(v, e.problem, region)
        checked = [r for r in fits if not r.skipped]
        if checked:
            worst = max(max(r.derivative_gaps, default=0.0) for r in checked)
            print(f"smooth fit at {len(checked)} edge nodes: worst derivative gap "
                  f"{worst:.2e} (tol {checked[0].tol_deriv:.2e})")


if __name__ == "__main__":
    main()
