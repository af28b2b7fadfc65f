"""Command-line front end.

Subcommands: forward | gradient | calibrate | ksweep | invert | design |
bench. Every run writes a metadata.json with the fully resolved
configuration; delimited outputs get a rendered figure next to them.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 resource budget exceeded.
"""

from __future__ import annotations

import argparse
import sys
import time as _time
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    RunConfig,
    build_fwi,
    build_material,
    build_sensors,
    build_sources,
    build_tato,
    parse_config,
)
from .fwi import invert
from .gradients import (
    SuperpositionConfig,
    BufferCounter,
    calibrate_k,
    gradient_reference,
    gradient_superposed,
    ksweep,
)
from .grids import ConfigError, MaterialModel, SourceSpec, TimeConfig, build_grid, cfl_report
from .io import dump_field, load_field, save_traces_csv, write_csv, write_metadata
from .optim import NumericalDivergenceError
from .solver import ResourceBudgetError, SolverInstabilityError, run_forward
from .tato import design_fields, optimize_design
from . import report


def _forward_material(rc, cfg):
    """Indicator for a plain forward run: explicit file, truth geometry, or
    the flavor's background state."""
    ptab = cfg.get("problem", {})
    if "gamma_file" in ptab:
        gamma, _ = load_field(ptab["gamma_file"])
        return build_material(cfg, rc.grid, gamma=gamma)
    if rc.kind == "fwi" and "truth" in cfg:
        from .config import build_truth_gamma

        material = build_material(cfg, rc.grid)
        return material.with_gamma(build_truth_gamma(cfg, rc.grid, material))
    return build_material(cfg, rc.grid)


def cmd_forward(rc: RunConfig, cfg, out: Path):
    material = _forward_material(rc, cfg)
    sources = build_sources(cfg)
    sensors = build_sensors(cfg, rc.grid)
    courant = cfl_report(rc.grid, material, rc.time.dt)
    snapshots = []
    interval = rc.dump_interval

    def on_step(n, u_new):
        if interval and (n + 1) % interval == 0:
            snapshots.append((n + 1, u_new.copy()))

    from .grids import precision_dtype

    result = run_forward(material, rc.time, sources, sensors,
                         dtype=precision_dtype(rc.precision), on_step=on_step)
    snapshots.append((rc.time.n_steps, result.window.u_cur.copy()))
    for step, values in snapshots:
        path = dump_field(out / f"field_{step:06d}.bin", values, rc.grid,
                          dt=rc.time.dt, step_index=step)
        if rc.plots:
            report.render_field(path.with_suffix(".png"), values, rc.grid.dx,
                                title=f"u at step {step}")
    artifacts = {"snapshots": len(snapshots), "courant": courant.courant,
                 "stable": courant.stable, "peak_abs": result.peak_abs}
    if sensors is not None:
        save_traces_csv(out / "traces.csv", result.traces)
        if rc.plots:
            report.render_traces(out / "traces.png", result.traces, rc.time.dt)
        artifacts["n_sensors"] = len(sensors)
    return artifacts


def _build_problem(rc, cfg):
    if rc.kind == "fwi":
        problem, _ = build_fwi(cfg, rc)
        return problem, problem.material
    if rc.kind == "tato":
        problem = build_tato(cfg, rc)
        _, _, g_bar = design_fields(problem, np.zeros(rc.grid.shape), 0)
        return problem, problem.material(g_bar)
    raise ConfigError(f"command needs a fwi or tato problem, got kind {rc.kind!r}")


def _resolve_k(rc, problem, material):
    if rc.method != "superposed":
        return None, None
    if rc.k == "auto" or rc.k is None:
        cal = calibrate_k(problem, material, k_start=rc.k_start)
        return cal.k, cal
    return float(rc.k), None


def cmd_gradient(rc: RunConfig, cfg, out: Path):
    problem, material = _build_problem(rc, cfg)
    k, cal = _resolve_k(rc, problem, material)
    if rc.method == "superposed":
        res = gradient_superposed(
            problem, material, SuperpositionConfig(k=k, precision=rc.precision))
    else:
        res = gradient_reference(problem, material, precision=rc.precision)
    path = dump_field(out / "gradient.bin", res.gradient, rc.grid, dt=rc.time.dt,
                      extra={"cost": res.cost, "method": rc.method, "k": k})
    if rc.plots:
        report.render_field(path.with_suffix(".png"), res.gradient, rc.grid.dx,
                            title=f"dC/dgamma ({rc.method})")
    return {"cost": res.cost, "k": k, "peak_field_buffers": res.counter.peak_fields}


def cmd_calibrate(rc: RunConfig, cfg, out: Path):
    problem, material = _build_problem(rc, cfg)
    cal = calibrate_k(problem, material, k_start=rc.k_start)
    write_csv(out / "calibration.csv",
              [{"k": k, "rel_diff_single_double": d} for k, d in cal.rows],
              ["k", "rel_diff_single_double"])
    if rc.plots:
        report.render_calibration(out / "calibration.png", cal.rows, 1e-2, cal.k)
    print(f"calibrated k = {cal.k:g}")
    return {"k": cal.k, "decades_tested": len(cal.rows),
            "diverged_at": cal.diverged_at}


def cmd_ksweep(rc: RunConfig, cfg, out: Path, k_list=None):
    problem, material = _build_problem(rc, cfg)
    if k_list is None:
        sweep = cfg.get("gradient", {}).get("k_list")
        if sweep:
            k_list = [float(k) for k in sweep]
        else:
            center = np.log10(rc.k_start)
            k_list = [10.0 ** (center + e) for e in range(-16, 6)]
    rows, _ = ksweep(problem, material, k_list)
    write_csv(out / "ksweep.csv",
              [{"k": k, "rel_error_single": s, "rel_error_double": d}
               for k, s, d in rows],
              ["k", "rel_error_single", "rel_error_double"])
    if rc.plots:
        report.render_ksweep(out / "ksweep.png", rows)
    return {"n_k": len(rows)}


def _write_run_outputs(out, rc, log, fields, header):
    write_csv(out / "log.csv", log, header)
    if rc.plots:
        report.render_cost_log(out / "cost.png", log)
    for name, values in fields.items():
        path = dump_field(out / f"{name}.bin", values, rc.grid, dt=rc.time.dt)
        if rc.plots:
            report.render_field(path.with_suffix(".png"), values, rc.grid.dx,
                                title=name, cmap="viridis", symmetric=False)


def cmd_invert(rc: RunConfig, cfg, out: Path):
    problem, material = _build_problem(rc, cfg)
    k, _ = _resolve_k(rc, problem, material)
    log = []
    try:
        res = invert(problem, method=rc.method, k=k, precision=rc.precision,
                     snapshot_every=rc.dump_interval or None,
                     progress=lambda row: log.append(row))
    except (SolverInstabilityError, NumericalDivergenceError):
        if log:
            write_csv(out / "log.csv", log,
                      ["iteration", "cost", "grad_norm", "wall_time"])
        raise
    _write_run_outputs(out, rc, res.log, {"gamma_final": res.gamma},
                       ["iteration", "cost", "grad_norm", "wall_time"])
    if rc.dump_interval:
        for i, g in enumerate(res.gamma_history):
            dump_field(out / f"gamma_{i:04d}.bin", g, rc.grid, dt=rc.time.dt)
    return {"k": k, "final_cost": res.log[-1]["cost"],
            "iterations": len(res.log) - 1}


def cmd_design(rc: RunConfig, cfg, out: Path):
    problem, material = _build_problem(rc, cfg)
    k, _ = _resolve_k(rc, problem, material)
    log = []
    try:
        res = optimize_design(problem, method=rc.method, k=k, precision=rc.precision,
                              snapshot_every=rc.dump_interval or 0,
                              progress=lambda row: log.append(row))
    except (SolverInstabilityError, NumericalDivergenceError):
        if log:
            write_csv(out / "log.csv", log,
                      ["iteration", "cost", "grad_norm", "beta", "wall_time"])
        raise
    _write_run_outputs(out, rc, res.log, {"design_final": res.design},
                       ["iteration", "cost", "grad_norm", "beta", "wall_time"])
    return {"k": k, "final_cost": res.log[-1]["cost"],
            "iterations": len(res.log) - 1}


def cmd_bench(rc: RunConfig, cfg, out: Path, sizes):
    """Forward and gradient wall time per step plus memory accounting over a
    family of square 2D problems."""
    rows = []
    n_steps = rc.time.n_steps
    for n in sizes:
        grid = build_grid((n, n), rc.grid.dx)
        material = MaterialModel.rho_scaled(np.ones(grid.shape), grid,
                                            rho0=2700.0, c0=6000.0)
        time_cfg = TimeConfig(n_steps=n_steps, dt=rc.time.dt)
        src = SourceSpec(node=(n // 2, n // 2), amplitude=1e12,
                         frequency=1.5e6, cycles=2)
        from .grids import SensorArray
        from .fwi import FwiProblem

        sensors = SensorArray(nodes=[(3, 3), (3, n - 4), (n - 4, 3), (n - 4, n - 4)])
        problem = FwiProblem(grid=grid, time=time_cfg, material=material,
                             sources=[src], sensors=sensors,
                             measured=np.zeros((1, 4, n_steps)))
        t0 = _time.perf_counter()
        run_forward(material, time_cfg, [src], sensors)
        fwd = (_time.perf_counter() - t0) / n_steps
        t0 = _time.perf_counter()
        res = gradient_superposed(problem, material,
                                  SuperpositionConfig(k=1e12, precision=rc.precision))
        grad = (_time.perf_counter() - t0) / n_steps
        hist = {}
        for label, steps in (("n", n_steps), ("2n", 2 * n_steps)):
            p2 = FwiProblem(grid=grid, time=TimeConfig(n_steps=steps, dt=rc.time.dt),
                            material=material, sources=[src], sensors=sensors,
                            measured=np.zeros((1, 4, steps)))
            ref = gradient_reference(p2, material)
            hist[label] = ref.counter.history_bytes
        rows.append({
            "dofs": grid.n_nodes,
            "forward_time_per_step": fwd,
            "gradient_time_per_step": grad,
            "peak_field_buffers": res.counter.peak_fields,
            "reference_history_bytes_n": hist["n"],
            "reference_history_bytes_2n": hist["2n"],
            "history_ratio": hist["2n"] / hist["n"],
        })
        print(f"  n={n}: forward {fwd * 1e6:.1f} us/step, gradient "
              f"{grad * 1e6:.1f} us/step, buffers {res.counter.peak_fields}")
    header = ["dofs", "forward_time_per_step", "gradient_time_per_step",
              "peak_field_buffers", "reference_history_bytes_n",
              "reference_history_bytes_2n", "history_ratio"]
    write_csv(out / "bench.csv", rows, header)
    if rc.plots:
        report.render_bench(out / "bench.png", rows)
    return {"sizes": list(sizes)}


COMMANDS = {
    "forward": cmd_forward,
    "gradient": cmd_gradient,
    "calibrate": cmd_calibrate,
    "ksweep": cmd_ksweep,
    "invert": cmd_invert,
    "design": cmd_design,
    "bench": cmd_bench,
}


def make_parser():
    parser = argparse.ArgumentParser(
        prog="waveopt",
        description="Time-domain wave-equation optimization with "
                    "memory-efficient superposed-field adjoint gradients.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--precision", choices=["single", "double"])
        p.add_argument("--method", choices=["reference", "superposed"])
        p.add_argument("--k", type=float, help="superposition scaling factor")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1,
                       help="cap on intra-step parallelism (1 = bitwise "
                            "reproducible; kernels are sequential either way)")
        if name == "bench":
            p.add_argument("--sizes", default="33,65,101",
                           help="comma-separated square grid sizes")
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        from .io import load_toml

        cfg = load_toml(args.config)
        overrides = {"precision": args.precision, "method": args.method,
                     "k": args.k, "seed": args.seed, "threads": args.threads}
        rc = parse_config(cfg, overrides)
        if rc.threads and rc.threads > 0:
            try:
                import numba

                numba.set_num_threads(max(1, min(rc.threads,
                                                 numba.config.NUMBA_NUM_THREADS)))
            except (ImportError, ValueError):
                pass
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        np.random.seed(rc.seed % 2**32)
        if args.command == "bench":
            sizes = [int(s) for s in args.sizes.split(",") if s]
            artifacts = cmd_bench(rc, cfg, out, sizes)
        else:
            artifacts = COMMANDS[args.command](rc, cfg, out)
        record = rc.resolved()
        record.update({"command": args.command, "version": __version__,
                       "artifacts": artifacts})
        write_metadata(out, record)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (SolverInstabilityError, NumericalDivergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ResourceBudgetError as exc:
        print(f"resource budget exceeded: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
