"""Command line entry point: ``viable-mfg <subcommand> --config c.json ...``.

Exit codes: 0 ok, 2 invalid configuration, 3 solver or model error,
4 a check or certificate failed.  Every run writes a manifest JSON next to
its main output with the config hash, library versions, seed and wall time.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import config as cfgmod
from .errors import ConfigInvalid, ViableMFGError
from .fields import read_field, write_field, write_slices_csv
from .fp import mass_trace, solve_fp
from .hjb import max_principle_bound, solve_hjb
from .invariance import check_fp_invariance, check_generalized, check_hjb_invariance, check_sde_invariance
from .mfg import duality_gap, solve_mfg
from .models import hamiltonian_from_config
from .sde import feedback_drift, simulate, sweep_dt, write_paths

logger = logging.getLogger("viable_mfg")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _dump(path, payload) -> None:
    Path(path).write_text(json.dumps(_jsonable(payload), indent=2) + "\n")


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"package": pkg, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MFG_THREADS", "2")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# subcommands


def cmd_check_invariance(args, cfg) -> tuple[int, list]:
    built = cfgmod.build(cfg)
    block = cfg.get("invariance", {})
    cond = args.condition or block.get("condition", "hjb")
    delta = args.delta or block.get("delta", 0.1)
    C = args.C if args.C is not None else block.get("C", "auto")
    C = C if C == "auto" else float(C)
    if cond == "hjb":
        model = hamiltonian_from_config(cfg.get("hamiltonian", {"type": "quadratic"}), built.domain)
        rep = check_hjb_invariance(built.domain, built.a, model, delta, C)
    elif cond == "fp":
        rep = check_fp_invariance(built.domain, built.a, cfgmod.fp_drift_fn(cfg.get("dynamics"), built), delta, C,
                                  divergence_form=True)
    elif cond == "sde":
        v = cfgmod.velocity_fn(cfg.get("dynamics"), built.domain)
        rep = check_sde_invariance(built.domain, built.a.sigma, lambda t, x, al: v(t, x), delta, C)
    else:
        model = hamiltonian_from_config(cfg.get("hamiltonian", {"type": "quadratic"}), built.domain)
        rep = check_generalized(built.domain, built.a, model, delta, C, mode=args.mode or block.get("mode", "per_piece"))
    out = Path(args.out)
    _dump(out, rep.summary())
    written = [out]
    if args.csv:
        rep.to_csv(args.csv)
        written.append(Path(args.csv))
    if args.figures:
        from .plotting import plot_margins

        written.append(plot_margins(rep, out.with_suffix(".png")))
    print(f"verdict={rep.verdict} fitted_C={rep.fitted_C} min_margin={rep.min_margin}")
    return (EXIT_OK if rep.passed else EXIT_CHECK), written


def _hjb_inputs(cfg, built, scfg):
    problem = cfgmod.mfg_problem(cfg, built)
    mesh = scfg.mesh(built.domain)
    times = scfg.times()
    m0 = problem.m0(mesh.centers)
    m_path = np.tile(m0, (len(times), 1))
    return problem, problem.F.path(times, mesh, m_path), problem.G.evaluate(mesh, m0)


def cmd_solve_hjb(args, cfg) -> tuple[int, list]:
    built = cfgmod.build(cfg)
    scfg = cfgmod.hjb_config(cfg)
    problem, F, G = _hjb_inputs(cfg, built, scfg)
    u = solve_hjb(built.domain, built.a, problem.model, F, G, scfg)
    bound = max_principle_bound(F, G, problem.model, scfg.T)
    out = Path(args.out)
    write_field(out, u)
    written = [out]
    if args.csv:
        write_slices_csv(args.csv, u)
        written.append(Path(args.csv))
    if args.figures:
        from .plotting import plot_field

        written.append(plot_field(u, out.with_suffix(".png"), "u"))
    ok = u.sup_norm() <= bound + 1e-8
    print(f"sup|u|={u.sup_norm():.6g} bound={bound:.6g} cells={u.mesh.n} steps={u.n_steps}")
    return (EXIT_OK if ok else EXIT_CHECK), written


def cmd_solve_fp(args, cfg) -> tuple[int, list]:
    built = cfgmod.build(cfg)
    scfg = cfgmod.hjb_config(cfg)
    mesh = scfg.mesh(built.domain)
    if args.m0:
        src = read_field(args.m0)
        m0 = src.mesh.restrict(src.values[0], mesh)
    else:
        m0 = cfgmod.normalized_density(cfg.get("m0"), built.domain, mesh)
    m = solve_fp(built.domain, built.a, cfgmod.fp_drift_fn(cfg.get("dynamics"), built), m0, scfg)
    out = Path(args.out)
    write_field(out, m)
    written = [out]
    if args.csv:
        write_slices_csv(args.csv, m)
        written.append(Path(args.csv))
    if args.figures:
        from .plotting import plot_field

        written.append(plot_field(m, out.with_suffix(".png"), "m"))
    mass = mass_trace(m)
    print(f"mass(0)={mass[0]:.12g} max|mass(t)-mass(0)|={np.abs(mass - mass[0]).max():.3e}")
    return EXIT_OK, written


def cmd_solve_mfg(args, cfg) -> tuple[int, list]:
    problem = cfgmod.mfg_problem(cfg)
    sol = solve_mfg(problem, cfgmod.mfg_config(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_field(out / "u.field", sol.u)
    write_field(out / "m.field", sol.m)
    _dump(out / "diagnostics.json", sol.summary())
    hist = np.column_stack([np.arange(1, len(sol.residual_history) + 1), sol.residual_history])
    np.savetxt(out / "residuals.csv", hist, delimiter=",", header="iteration,residual", comments="", fmt="%.17g")
    written = [out / n for n in ("u.field", "m.field", "diagnostics.json", "residuals.csv")]
    if args.figures:
        from .plotting import plot_field, plot_residuals

        written += [plot_field(sol.u, out / "u.png", "u"), plot_field(sol.m, out / "m.png", "m"),
                    plot_residuals(sol.residual_history, out / "residuals.png")]
    print(f"iterations={sol.iterations} converged={sol.converged} residual={sol.residual_history[-1]:.3e}")
    return (EXIT_OK if sol.converged else EXIT_CHECK), written


def _sde_start(cfg, built):
    x0 = cfg.get("sde", {}).get("x0")
    if x0 is not None:
        return np.asarray(x0, dtype=float)
    mesh = cfgmod.hjb_config(cfg).mesh(built.domain) if "solver" in cfg else None
    if mesh is None:
        lo, hi = built.domain.bounding_box
        return (lo + hi) / 2
    return mesh, cfgmod.normalized_density(cfg.get("m0"), built.domain, mesh)(mesh.centers)


def cmd_simulate_sde(args, cfg) -> tuple[int, list]:
    built = cfgmod.build(cfg)
    scfg = cfgmod.sde_config(cfg)
    v = cfgmod.velocity_fn(cfg.get("dynamics"), built.domain)
    x0 = _sde_start(cfg, built)
    out = Path(args.out)
    written = [out]
    sweep = args.sweep_dt or cfg.get("sde", {}).get("sweep_dt")
    if sweep:
        dts = [float(s) for s in sweep.split(",")] if isinstance(sweep, str) else sweep
        stats = sweep_dt(built.domain, built.a, v, x0, built.T, scfg, dts)
    else:
        res = simulate(built.domain, built.a, v, x0, built.T, scfg, store_paths=bool(args.store_paths))
        stats = res.stats
        stats.table = [{"dt": stats.dt, "exit_fraction": stats.exit_fraction, "exit_se": stats.exit_se,
                        "lyapunov_slope": stats.lyapunov_slope}]
        if args.store_paths:
            write_paths(args.store_paths, res.paths)
            written.append(Path(args.store_paths))
    _dump(out, stats.summary())
    if args.figures:
        from .plotting import plot_exit_table

        written.append(plot_exit_table(stats.table, out.with_suffix(".png")))
    for row in stats.table:
        print(f"dt={row['dt']:.3g} exit_fraction={row['exit_fraction']:.5f} se={row['exit_se']:.2e}")
    return EXIT_OK, written


def cmd_certify(args, cfg) -> tuple[int, list]:
    built = cfgmod.build(cfg)
    problem = cfgmod.mfg_problem(cfg, built)
    mcfg = cfgmod.mfg_config(cfg)
    cert_block = cfg.get("certify", {})
    inv_block = cfg.get("invariance", {})
    delta = inv_block.get("delta", mcfg.invariance_delta)
    inv = check_hjb_invariance(built.domain, built.a, problem.model, delta, inv_block.get("C", "auto"))

    mesh = mcfg.solver(problem.T).mesh(built.domain)
    second = cfgmod.normalized_density({"kind": cert_block.get("second_guess", "bump")}, built.domain, mesh)
    guesses = [None, second]
    run_cfg = replace(mcfg, invariance="warn")
    with ThreadPoolExecutor(min(2, _threads())) as pool:
        sols = list(pool.map(lambda g: solve_mfg(problem, run_cfg, g), guesses))
    gap = duality_gap(sols[0], sols[1], problem)
    vol = mesh.cell_volume
    l1 = float((np.abs(sols[0].m.values - sols[1].m.values).sum(axis=1) * vol).max())
    mass = float(sols[0].m.mass()[0])
    F_sup = float(np.abs(problem.F.path(sols[0].m.times, mesh, sols[0].m.values)).max())
    scale = max(mass * F_sup * problem.T, np.finfo(float).tiny)
    gap_tol = cert_block.get("gap_tol", 1e-3)

    sde_block = cfg.get("sde", {})
    scfg = cfgmod.sde_config(cfg)
    if scfg.drift_mode == "feedback" or "dynamics" not in cfg:
        drift = feedback_drift(sols[0].u, problem.model)
    else:
        drift = cfgmod.velocity_fn(cfg.get("dynamics"), built.domain)
    x0 = sde_block.get("x0")
    x0 = np.asarray(x0) if x0 is not None else (mesh, problem.m0(mesh.centers))
    stats = sweep_dt(built.domain, built.a, drift, x0, problem.T, scfg, sde_block.get("sweep_dt", [1e-2, 1e-3]))
    exit_tol = cert_block.get("exit_tol", 0.02)
    fr = [r["exit_fraction"] for r in stats.table]
    se = [r["exit_se"] for r in stats.table]
    monotone = all(b <= a + 2 * s for a, b, s in zip(fr, fr[1:], se[1:]))

    checks = {
        "invariance": inv.passed,
        "converged": all(s.converged for s in sols),
        "uniqueness_l1": l1 <= 10 * mcfg.tol,
        "gap_terms_nonnegative": all(v >= -1e-10 for v in (gap.terminal, gap.running, gap.bregman_1, gap.bregman_2)),
        "gap_relative": gap.total <= gap_tol * scale,
        "exit_monotone": monotone,
        "exit_small": fr[-1] <= exit_tol,
    }
    cert = {
        "passed": all(checks.values()),
        "checks": checks,
        "invariance": inv.summary(),
        "mfg": {"iterations": [s.iterations for s in sols], "l1_distance": l1,
                "diagnostics": [s.summary() for s in sols]},
        "duality_gap": {**gap.terms(), "relative": gap.total / scale, "tolerance": gap_tol},
        "sde": stats.summary(),
    }
    out = Path(args.out)
    _dump(out, cert)
    written = [out]
    if args.figures:
        from .plotting import plot_exit_table, plot_residuals

        written += [plot_residuals(sols[0].residual_history, out.with_name(out.stem + "_residuals.png")),
                    plot_exit_table(stats.table, out.with_name(out.stem + "_exits.png"))]
    print(json.dumps(_jsonable(checks)))
    return (EXIT_OK if cert["passed"] else EXIT_CHECK), written


COMMANDS = {
    "check-invariance": cmd_check_invariance,
    "solve-hjb": cmd_solve_hjb,
    "solve-fp": cmd_solve_fp,
    "solve-mfg": cmd_solve_mfg,
    "simulate-sde": cmd_simulate_sde,
    "certify": cmd_certify,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viable-mfg", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--figures", action="store_true", help="also render PNG figures next to the outputs")

    sp = sub.add_parser("check-invariance", help="sample an invariance inequality on the boundary layer")
    common(sp, "report JSON")
    sp.add_argument("--condition", choices=["hjb", "fp", "sde", "generalized"])
    sp.add_argument("--delta", type=float)
    sp.add_argument("--C", default=None, help="'auto' or a nonnegative value")
    sp.add_argument("--mode", choices=["per_piece", "barrier"])
    sp.add_argument("--csv", help="per-sample margins")

    sp = sub.add_parser("solve-hjb", help="backward HJB solve")
    common(sp, "field file for u")
    sp.add_argument("--csv")

    sp = sub.add_parser("solve-fp", help="forward Fokker-Planck solve")
    common(sp, "field file for m")
    sp.add_argument("--m0", help="field file whose first slice is the initial density")
    sp.add_argument("--csv")

    sp = sub.add_parser("solve-mfg", help="coupled MFG solve")
    common(sp, "output directory")

    sp = sub.add_parser("simulate-sde", help="Monte Carlo viability statistics")
    common(sp, "stats JSON")
    sp.add_argument("--sweep-dt", help="comma separated list of time steps")
    sp.add_argument("--store-paths", help="binary paths file")

    sp = sub.add_parser("certify", help="invariance, two-start MFG, duality gap and SDE sweep")
    common(sp, "certificate JSON")
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    cfg, digest, written, status, error = None, None, [], EXIT_OK, None
    try:
        cfg, digest = cfgmod.load_config(args.config)
        if cfg.get("coupling_G", {}).get("relax_for_lipschitz_H"):
            logger.info("relax_for_lipschitz_H is accepted but has no effect")
        status, written = COMMANDS[args.command](args, cfg)
    except ConfigInvalid as exc:
        where = f" (field {exc.field}" + (f", line {exc.line}" if exc.line else "") + ")" if exc.field or exc.line else ""
        print(f"config error: {exc}{where}", file=sys.stderr)
        status, error = EXIT_CONFIG, str(exc)
    except (ViableMFGError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        status, error = EXIT_SOLVER, f"{type(exc).__name__}: {exc}"
    out = Path(args.out)
    manifest = {
        "command": args.command,
        "argv": argv,
        "config": str(args.config),
        "config_sha256": digest,
        "seed": (cfg or {}).get("seed", 0),
        "versions": _versions(),
        "wall_time_s": time.perf_counter() - t0,
        "exit_status": status,
        "error": error,
        "outputs": [str(p) for p in written],
    }
    if out.parent.exists():
        _dump(_manifest_path(out), manifest)
    return status


if __name__ == "__main__":
    sys.exit(main())
