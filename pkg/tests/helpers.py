"""Shared test utilities."""

from smoothfit.problems import load_problem_config


def simple_problem(beta="0", sigma="0", g="0", rho="0", controls=((0.0,),), n=1, m=1,
                   **kw):
    """Build a small problem + grid from terse keyword overrides."""
    cfg = {
        "class": kw.pop("problem_class", "DriftControl"),
        "n": n,
        "m": m,
        "box": kw.pop("box", {"lower": [-1.0] * n, "upper": [1.0] * n, "points": [5] * n}),
        "coefficients": {
            "beta": [beta] * n if isinstance(beta, str) else beta,
            "sigma": [[sigma] * m for _ in range(n)] if isinstance(sigma, str) else sigma,
            "g": g,
            "rho": rho,
        },
        "control_set": {"points": [list(c) for c in controls]},
    }
    cfg.update(kw)
    return load_problem_config(cfg)
