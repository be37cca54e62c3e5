"""Command-line driver: solve, verify, witness, simulate, report.

Exit codes: 0 pass, 1 input/usage error, 2 numerical non-convergence,
3 regularity-verdict failure. Artifacts are deterministic JSON; CSV renderings
follow the frozen column orders in docs/formats.md.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import read_artifact, write_artifact
from .lattice import GridFunction
from .problems import ProblemClass, load_problem_config, validate_wellposedness
from .regularity import (
    detect_region_edge,
    directional_smoothness,
    fit_bound_constant,
    check_value_bounds,
    kink_witness,
    range_basis,
    semiconvexity_constant,
    smooth_fit_check,
    DegenerateWitnessError,
    RegularityError,
)
from .solver import (
    SolverError,
    SolverNonConvergence,
    intervention_targets,
    policy_iteration,
    solve_impulse_qvi,
    solve_obstacle,
)
from .synthesis import (
    FeedbackPolicy,
    SynthesisError,
    feedback_map,
    never_act_policy,
    never_stop_policy,
    verification_gap,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NONCONVERGENCE = 2
EXIT_VERDICT = 3


class UsageError(Exception):
    pass


def _load_run_config(path: str) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    return cfg


def _positive(cfg: dict, section: str, name: str, default: float) -> float:
    val = float(cfg.get(name, default))
    if val <= 0:
        raise UsageError(f"{section}.{name}: tolerances and budgets must be > 0")
    return val


def _problem_and_grid(cfg: dict):
    if "problem" not in cfg:
        raise UsageError("config needs a 'problem' section")
    prob_cfg = cfg["problem"]
    try:
        if isinstance(prob_cfg, dict) and set(prob_cfg) == {"path"}:
            return load_problem_config(prob_cfg["path"])
        return load_problem_config(prob_cfg)
    except Exception as exc:
        raise UsageError(f"problem: {exc}")


def _seed(cfg: dict, args) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    seed = int(seed)
    if not (0 <= seed < 2**64):
        raise UsageError("seed: must be an unsigned 64-bit integer")
    return seed


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        n = int(os.environ.get("SMOOTHFIT_THREADS", "1"))
    if n < 1:
        raise UsageError("threads: must be >= 1")
    return n


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# solve

def cmd_solve(args) -> int:
    cfg = _load_run_config(args.config)
    problem, grid = _problem_and_grid(cfg)
    seed = _seed(cfg, args)
    _threads(args)
    for warning in validate_wellposedness(problem, grid):
        print(f"warning: {warning}", file=sys.stderr)
    scfg = cfg.get("solve", {})
    tol = _positive(scfg, "solve", "tol", 1e-8)
    max_iter = int(scfg.get("max_iter", 100))
    if max_iter < 1:
        raise UsageError("solve.max_iter: must be >= 1")
    rho_min = scfg.get("rho_min")
    rho_min = float(rho_min) if rho_min is not None else None

    out = _out_dir(args)
    exit_code = EXIT_OK
    try:
        if problem.problem_class is ProblemClass.DRIFT_CONTROL:
            v, policy, report = policy_iteration(problem, grid, tol, max_iter, rho_min)
        elif problem.problem_class is ProblemClass.OPTIMAL_STOPPING:
            v, stop_region, report = solve_obstacle(problem, grid, tol, max_iter, rho_min)
            policy = FeedbackPolicy.stopping(grid, stop_region)
        else:
            v, action_region, report = solve_impulse_qvi(problem, grid, tol, max_iter,
                                                         rho_min=rho_min)
            _, targets = intervention_targets(v, *problem.impulse_costs)
            policy = FeedbackPolicy.impulse(grid, action_region, targets)
    except SolverNonConvergence as exc:
        v, policy_or_region, report = exc.partial
        if problem.problem_class is ProblemClass.OPTIMAL_STOPPING:
            policy = FeedbackPolicy.stopping(grid, policy_or_region)
        elif problem.problem_class is ProblemClass.IMPULSE_CONTROL:
            _, targets = intervention_targets(v, *problem.impulse_costs)
            policy = FeedbackPolicy.impulse(grid, policy_or_region, targets)
        else:
            policy = policy_or_region
        print(f"warning: {exc}", file=sys.stderr)
        exit_code = EXIT_NONCONVERGENCE
    except SolverError as exc:
        raise UsageError(str(exc))

    write_artifact(out / "V.json", {"field": v.to_json_dict()}, cfg, seed)
    write_artifact(out / "policy.json", {"policy": policy.to_json_dict()}, cfg, seed)
    write_artifact(out / "report.json", {"report": report.to_json_dict()}, cfg, seed)
    if args.format == "csv":
        _write_field_csv(out / "field.csv", v)
    return exit_code


def _write_field_csv(path: Path, v: GridFunction) -> None:
    nodes = v.grid.nodes()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(v.grid.dim)] + ["value"])
        for row, val in zip(nodes, v.values):
            writer.writerow([repr(float(t)) for t in row] + [repr(float(val))])


# ---------------------------------------------------------------------------
# verify

def _default_probes(grid, policy, per_axis: int, fb_margin_cells: int) -> np.ndarray:
    """Interior probe nodes on a coarse lattice, away from the box boundary
    and from the detected free boundary (derivative probes cannot resolve a
    jump classification within a stencil reach of either)."""
    margins = [max(5, int(np.ceil(2.5 * grid.max_spacing / grid.spacing[i])))
               for i in range(grid.dim)]
    axes_idx = []
    for i in range(grid.dim):
        lo, hi = margins[i], int(grid.points[i]) - 1 - margins[i]
        if hi <= lo:
            axes_idx.append(np.asarray([int(grid.points[i]) // 2]))
        else:
            axes_idx.append(np.unique(np.linspace(lo, hi, per_axis).astype(int)))
    mesh = np.meshgrid(*axes_idx, indexing="ij")
    multis = np.stack([m.reshape(-1) for m in mesh], axis=1)
    flats = np.asarray([grid.flat_index(mi) for mi in multis])
    region = None
    if policy is not None and policy.kind == "stop":
        region = policy.stop_flag
    elif policy is not None and policy.kind == "impulse":
        region = policy.act_flag
    if region is not None and np.any(region) and not np.all(region):
        edge = detect_region_edge(grid, region, exclude_near_boundary=False)
        edge_multi = np.asarray([grid.multi_index(int(e)) for e in edge])
        keep = []
        for k, mi in enumerate(multis):
            cheb = np.min(np.max(np.abs(edge_multi - mi), axis=1))
            if cheb > fb_margin_cells:
                keep.append(k)
        flats = flats[keep]
    nodes = grid.nodes()
    return nodes[flats]


def cmd_verify(args) -> int:
    cfg = _load_run_config(args.config)
    problem, grid = _problem_and_grid(cfg)
    vcfg = cfg.get("verify", {})
    out = _out_dir(args)
    try:
        v_art = read_artifact(out / "V.json")
        v = GridFunction.from_json_dict(v_art["field"])
        policy = None
        pol_path = out / "policy.json"
        if pol_path.exists():
            policy = FeedbackPolicy.from_json_dict(read_artifact(pol_path)["policy"])
    except FileNotFoundError as exc:
        raise UsageError(f"missing solve artifact: {exc}")
    except (KeyError, ValueError) as exc:
        raise UsageError(f"corrupted solve artifact: {exc}")
    if tuple(v.grid.points) != tuple(grid.points):
        raise UsageError("solved field grid does not match the problem config box")

    tau_rank = float(vcfg.get("tau_rank", 1e-8))
    tol_jump_factor = float(vcfg.get("tol_jump_factor", 5.0))
    if "probes" in vcfg:
        probes = np.atleast_2d(np.asarray(vcfg["probes"], dtype=float))
    else:
        probes = _default_probes(grid, policy, int(vcfg.get("n_probes_per_axis", 5)),
                                 int(vcfg.get("free_boundary_margin_cells", 6)))

    probe_rows = []
    range_violations = 0
    for x in probes:
        basis = range_basis(problem, x, tau_rank)
        if basis.trivial:
            continue
        reports = directional_smoothness(v, x, basis, tol_jump_factor,
                                         rng_seed=_seed(cfg, args))
        for rep in reports:
            if rep.classification == "kink" and rep.in_range:
                range_violations += 1
            probe_rows.append(rep)

    sf_reports = []
    if problem.problem_class is ProblemClass.OPTIMAL_STOPPING and policy is not None \
            and vcfg.get("smooth_fit", True):
        region = policy.stop_flag
        if np.any(region) and not np.all(region):
            sf_reports = smooth_fit_check(v, problem, region, tau_rank=tau_rank)
    sf_failed = [r for r in sf_reports if not r.passed]

    sc_cfg = vcfg.get("semiconvexity", {})
    cert = semiconvexity_constant(
        v,
        n_samples=int(sc_cfg.get("n_samples", 4000)),
        rng_seed=_seed(cfg, args),
    )

    bounds = None
    if "bounds" in vcfg:
        bcfg = vcfg["bounds"]
        p = float(bcfg.get("p", 2.0))
        M = bcfg.get("M")
        M = float(M) if M is not None else fit_bound_constant(v, p, rng_seed=_seed(cfg, args))
        bounds = check_value_bounds(v, M, p, n_samples=int(bcfg.get("n_samples", 10000)),
                                    rng_seed=_seed(cfg, args) + 1)

    write_artifact(
        out / "regularity_report.json",
        {
            "probes": [
                {
                    "x": [float(t) for t in r.x],
                    "direction": [float(t) for t in r.direction],
                    "in_range": bool(r.in_range),
                    "slope_plus": _j(r.slope_plus),
                    "slope_minus": _j(r.slope_minus),
                    "jump": _j(r.jump),
                    "tol_jump": _j(r.tol_jump),
                    "classification": r.classification,
                }
                for r in probe_rows
            ],
            "range_violations": range_violations,
        },
        cfg,
    )
    write_artifact(
        out / "smooth_fit.json",
        {
            "reports": [
                {
                    "x": [float(t) for t in r.x],
                    "value_gap": _j(r.value_gap),
                    "derivative_gaps": [_j(gp) for gp in r.derivative_gaps],
                    "kernel_slopes": [[_j(a), _j(b)] for a, b in r.kernel_slopes],
                    "passed": bool(r.passed),
                    "skipped": bool(r.skipped),
                }
                for r in sf_reports
            ]
        },
        cfg,
    )
    write_artifact(
        out / "semiconvexity.json",
        {
            "certificate": {
                "c_estimate": _j(cert.c_estimate),
                "kappa": _j(cert.kappa),
                "n_samples": cert.n_samples,
                "n_used": cert.n_used,
                "worst_triple": cert.worst_triple,
                "min_denominator": _j(cert.min_denominator),
            }
        },
        cfg,
    )
    if bounds is not None:
        write_artifact(
            out / "bounds.json",
            {
                "bounds": {
                    "M": _j(bounds.M),
                    "p": _j(bounds.p),
                    "growth_margin": _j(bounds.growth_margin),
                    "lipschitz_margin": _j(bounds.lipschitz_margin),
                    "semiconvexity_margin": _j(bounds.semiconvexity_margin),
                    "passed": list(bounds.passed),
                }
            },
            cfg,
        )
    if args.format == "csv":
        _write_probes_csv(out / "probes.csv", probe_rows, grid.dim)
        if sf_reports:
            _write_smooth_fit_csv(out / "smooth_fit.csv", sf_reports, grid.dim)
    if range_violations > 0 or sf_failed:
        print(
            f"verdict: FAIL ({range_violations} span-direction kinks, "
            f"{len(sf_failed)} smooth-fit failures)",
            file=sys.stderr,
        )
        return EXIT_VERDICT
    return EXIT_OK


def _j(x: float) -> float | None:
    return None if not np.isfinite(x) else float(x)


def _write_probes_csv(path: Path, rows, dim: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [f"x{i + 1}" for i in range(dim)]
            + [f"d{i + 1}" for i in range(dim)]
            + ["in_range", "slope_plus", "slope_minus", "jump", "tol_jump", "classification"]
        )
        for r in rows:
            writer.writerow(
                [repr(float(t)) for t in r.x]
                + [repr(float(t)) for t in r.direction]
                + [int(r.in_range), r.slope_plus, r.slope_minus, r.jump, r.tol_jump,
                   r.classification]
            )


def _write_smooth_fit_csv(path: Path, reports, dim: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [f"x{i + 1}" for i in range(dim)]
            + ["value_gap", "direction_index"]
            + [f"d{i + 1}" for i in range(dim)]
            + ["derivative_gap", "verdict"]
        )
        for r in reports:
            for k, (d, gp) in enumerate(zip(r.directions, r.derivative_gaps)):
                writer.writerow(
                    [repr(float(t)) for t in r.x]
                    + [r.value_gap, k]
                    + [repr(float(t)) for t in d]
                    + [gp, "pass" if r.passed else "fail"]
                )


# ---------------------------------------------------------------------------
# witness

def cmd_witness(args) -> int:
    cfg = _load_run_config(args.config)
    wcfg = cfg.get("witness", {})
    seed = _seed(cfg, args)
    out = _out_dir(args)
    j_list = [int(j) for j in wcfg.get("j_list", [1, 10, 100])]
    instances = []
    if "p1" in wcfg:
        instances.append(
            (
                np.asarray(wcfg["p1"], dtype=float),
                np.asarray(wcfg["p2"], dtype=float),
                float(wcfg.get("kappa", 0.0)),
                np.asarray(wcfg["sigma0"], dtype=float),
            )
        )
    rnd = wcfg.get("random")
    if rnd:
        rng = np.random.default_rng(seed)
        n, m = int(rnd.get("n", 3)), int(rnd.get("m", 2))
        for _ in range(int(rnd.get("count", 3))):
            while True:
                p1 = rng.standard_normal(n)
                p2 = rng.standard_normal(n)
                sigma0 = rng.standard_normal((n, m))
                kappa = abs(rng.standard_normal())
                if np.linalg.norm(sigma0.T @ (p1 - p2)) > 0.1:
                    break
            instances.append((p1, p2, kappa, sigma0))
    if not instances:
        raise UsageError("witness: provide p1/p2/sigma0 or a 'random' block")

    results = []
    all_ok = True
    try:
        for p1, p2, kappa, sigma0 in instances:
            w = kink_witness(p1, p2, kappa, sigma0, j_list=j_list)
            ok = w.trace_identity_ok and w.residual_strictly_increasing
            all_ok &= ok
            results.append(
                {
                    "p1": [float(t) for t in w.p1],
                    "p2": [float(t) for t in w.p2],
                    "kappa": w.kappa,
                    "sigma0": [[float(t) for t in row] for row in w.sigma0],
                    "j_list": list(w.j_list),
                    "lambda_list": [float(t) for t in w.lambda_list],
                    "residual_list": [float(t) for t in w.residual_list],
                    "trace_errors": [float(t) for t in w.trace_errors],
                    "bend_bound_max_ratio": w.bend_bound_max_ratio,
                    "bend_bound_radius": w.bend_bound_radius,
                    "ok": bool(ok),
                }
            )
    except DegenerateWitnessError as exc:
        raise UsageError(f"witness: {exc}")
    except RegularityError as exc:
        raise UsageError(f"witness: {exc}")
    write_artifact(out / "witness.json", {"witnesses": results}, cfg, seed)
    return EXIT_OK if all_ok else EXIT_VERDICT


# ---------------------------------------------------------------------------
# simulate

def cmd_simulate(args) -> int:
    cfg = _load_run_config(args.config)
    problem, grid = _problem_and_grid(cfg)
    seed = _seed(cfg, args)
    out = _out_dir(args)
    mcfg = cfg.get("simulate", {})
    n_paths = int(mcfg.get("n_paths", 2000))
    if n_paths <= 0:
        raise UsageError("simulate.n_paths: must be > 0")
    dt = _positive(mcfg, "simulate", "dt", 0.01)
    t_max = _positive(mcfg, "simulate", "t_max", 10.0)
    tail_tol = _positive(mcfg, "simulate", "tail_tol", 1e-3)
    allowance_c = float(mcfg.get("allowance_c", 10.0))
    x0_list = mcfg.get("x0")
    if not x0_list:
        raise UsageError("simulate.x0: provide at least one start point")

    try:
        v = GridFunction.from_json_dict(read_artifact(out / "V.json")["field"])
        policy = FeedbackPolicy.from_json_dict(read_artifact(out / "policy.json")["policy"])
    except FileNotFoundError as exc:
        raise UsageError(f"missing solve artifact: {exc}")
    except (KeyError, ValueError) as exc:
        raise UsageError(f"corrupted solve artifact: {exc}")

    try:
        gaps = verification_gap(v, problem, policy, x0_list, n_paths, dt, t_max,
                                seed=seed, tail_tol=tail_tol)
        adversarial = mcfg.get("adversarial")
        adv_gaps = []
        if adversarial == "never_act":
            adv_gaps = verification_gap(v, problem, never_act_policy(grid, problem),
                                        x0_list, n_paths, dt, t_max, seed=seed + 77,
                                        tail_tol=tail_tol)
        elif adversarial == "never_stop":
            adv_gaps = verification_gap(v, problem, never_stop_policy(grid),
                                        x0_list, n_paths, dt, t_max, seed=seed + 77,
                                        tail_tol=tail_tol)
        elif adversarial is not None:
            raise UsageError("simulate.adversarial: must be never_act or never_stop")
    except SynthesisError as exc:
        raise UsageError(f"simulate: {exc}")

    allowance = allowance_c * (dt + grid.max_spacing)
    payload = {
        "gaps": [_gap_dict(g) for g in gaps],
        "adversarial_gaps": [_gap_dict(g) for g in adv_gaps],
        "allowance": float(allowance),
    }
    write_artifact(out / "simulation.json", payload, cfg, seed)
    if args.format == "csv":
        _write_gaps_csv(out / "gaps.csv", gaps + adv_gaps, grid.dim)
    if any(g.significantly_negative(allowance) for g in gaps):
        print("verdict: FAIL (value does not dominate the policy payoff)", file=sys.stderr)
        return EXIT_VERDICT
    return EXIT_OK


def _gap_dict(g) -> dict:
    return {
        "x0": [float(t) for t in g.x0],
        "value": float(g.value),
        "mc_mean": float(g.mc_mean),
        "mc_stderr": float(g.mc_stderr),
        "gap": float(g.gap),
    }


def _write_gaps_csv(path: Path, gaps, dim: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(dim)]
                        + ["value", "mc_mean", "mc_stderr", "gap"])
        for g in gaps:
            writer.writerow([repr(float(t)) for t in g.x0]
                            + [g.value, g.mc_mean, g.mc_stderr, g.gap])


# ---------------------------------------------------------------------------
# report

def cmd_report(args) -> int:
    out = _out_dir(args)
    cfg = _load_run_config(args.config) if args.config else {}
    produced = []
    v_path = out / "V.json"
    if v_path.exists():
        v = GridFunction.from_json_dict(read_artifact(v_path)["field"])
        _write_field_csv(out / "field.csv", v)
        produced.append("field.csv")
    rr = out / "regularity_report.json"
    if rr.exists():
        obj = read_artifact(rr)
        dim = len(obj["probes"][0]["x"]) if obj["probes"] else 1
        with open(out / "probes.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                [f"x{i + 1}" for i in range(dim)] + [f"d{i + 1}" for i in range(dim)]
                + ["in_range", "slope_plus", "slope_minus", "jump", "tol_jump",
                   "classification"]
            )
            for r in obj["probes"]:
                writer.writerow(
                    [repr(float(t)) for t in r["x"]]
                    + [repr(float(t)) for t in r["direction"]]
                    + [int(r["in_range"]), r["slope_plus"], r["slope_minus"], r["jump"],
                       r["tol_jump"], r["classification"]]
                )
        produced.append("probes.csv")
    sim = out / "simulation.json"
    if sim.exists():
        obj = read_artifact(sim)
        rows = obj["gaps"] + obj.get("adversarial_gaps", [])
        if rows:
            dim = len(rows[0]["x0"])
            with open(out / "gaps.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow([f"x{i + 1}" for i in range(dim)]
                                + ["value", "mc_mean", "mc_stderr", "gap"])
                for g in rows:
                    writer.writerow([repr(float(t)) for t in g["x0"]]
                                    + [g["value"], g["mc_mean"], g["mc_stderr"], g["gap"]])
            produced.append("gaps.csv")
    if not produced:
        raise UsageError(f"no artifacts found under {out}")
    print("wrote: " + ", ".join(produced))
    _ = cfg
    return EXIT_OK


# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smoothfit",
        description="solve stationary control equations on grids and verify "
        "directional regularity of the solved fields",
    )
    parser.add_argument("--version", action="version", version=f"smoothfit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("solve", cmd_solve),
        ("verify", cmd_verify),
        ("witness", cmd_witness),
        ("simulate", cmd_simulate),
        ("report", cmd_report),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=(name != "report"), default=None)
        p.add_argument("--out", default="out")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--format", choices=("json", "csv"), default="json")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
