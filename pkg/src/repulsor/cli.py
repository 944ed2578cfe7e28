"""Command-line front end: ``repulsor run|consistency|validate <config>``.

Exit codes: 0 on completion, 1 on configuration errors, 2 on solver failures.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from .barnes_hut import BhParams
from .config import (
    ConfigError,
    SceneConfig,
    build_constraints,
    build_mesh,
    build_penalties,
    load_config,
    serialize_config,
)
from .consistency import consistency_study, format_report
from .constraints import Barycenter, Pin, normalized_residual
from .flow import FlowError, FlowOptions, FlowState, flow_step
from .mesh import MeshError, save_obj, validate_mesh
from .penalties import PenaltyError
from .tpe import EnergyParams

log = logging.getLogger("repulsor")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2
EFFECTIVE_CONFIG = "config.effective.yaml"


def thread_count(cfg: SceneConfig) -> int | None:
    """``REPULSOR_THREADS`` overrides the config; deterministic runs use one thread."""
    env = os.environ.get("REPULSOR_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"REPULSOR_THREADS: expected an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("REPULSOR_THREADS: must be at least 1")
        return n
    if cfg.deterministic:
        return 1
    return cfg.threads


def _constraint_label(c) -> str:
    if isinstance(c, Barycenter):
        return f"barycenter_{c.component}"
    if isinstance(c, Pin):
        return f"pin_{c.vertex}"
    return "total_area" if type(c).__name__ == "TotalArea" else "total_volume"


def _setup(cfg: SceneConfig) -> FlowState:
    mesh = build_mesh(cfg)
    validate_mesh(mesh)
    options = FlowOptions(
        metric=cfg.metric, chi=cfg.chi, leaf_size=cfg.leaf_size, free_barycenter=cfg.free_barycenter,
        disable_low_order=cfg.disable_low_order, stop_tol=cfg.tolerance, remesh=cfg.remesh,
    )
    return FlowState(
        mesh, energy=EnergyParams(cfg.p, cfg.subcritical), bh=BhParams(cfg.theta),
        constraints=build_constraints(cfg), penalties=build_penalties(cfg), options=options,
    )


def _write_summary(path: Path, summary: dict):
    path.write_text(yaml.safe_dump(summary, sort_keys=False), encoding="utf-8")


def cmd_run(config_path: str) -> int:
    try:
        cfg = load_config(config_path)
        threads = thread_count(cfg)
        with threadpool_limits(limits=threads):
            state = _setup(cfg)
    except (ConfigError, MeshError, PenaltyError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / EFFECTIVE_CONFIG).write_text(serialize_config(cfg), encoding="utf-8")

    labels = [_constraint_label(c) for c in state.constraints]
    penalty_names = list(dict.fromkeys(p.name for p in state.penalties))
    header = (["step", "energy", "objective"] + penalty_names + [f"residual_{x}" for x in labels]
              + ["tau", "iterations", "seconds"])
    save_obj(state.mesh, out / "frame_000000.obj")
    status, message, code = "completed", "", EXIT_OK
    t0 = time.perf_counter()
    with open(out / "energies.csv", "w", newline="", encoding="utf-8") as fh, threadpool_limits(limits=threads):
        writer = csv.writer(fh)
        writer.writerow(header)
        for _ in range(cfg.max_steps):
            try:
                flow_step(state)
            except FlowError as exc:
                status, message, code = "solver failure", str(exc), EXIT_SOLVER
                log.error("%s", exc)
                break
            if state.converged:
                status = "converged"
                break
            rec = state.history[-1]
            res = np.abs(normalized_residual(state.constraints, state.mesh))
            per = []
            k = 0
            for c in state.constraints:
                per.append(float(res[k:k + c.size].max()))
                k += c.size
            seconds = 0.0 if cfg.deterministic else rec.seconds
            writer.writerow([rec.step + 1, repr(rec.energy), repr(rec.objective)]
                            + [repr(rec.penalties.get(n, 0.0)) for n in penalty_names]
                            + [repr(v) for v in per] + [repr(rec.tau), rec.iterations, repr(seconds)])
            fh.flush()
            if state.step % cfg.stride == 0:
                save_obj(state.mesh, out / f"frame_{state.step:06d}.obj")
    if state.step % cfg.stride != 0:
        save_obj(state.mesh, out / f"frame_{state.step:06d}.obj")
    last = state.history[-1] if state.history else None
    summary = {
        "status": status,
        "steps": state.step,
        "initial_objective": float(state.initial_objective),
        "final_objective": float(last.objective) if last else float(state.initial_objective),
        "final_energy": float(last.energy) if last else None,
        "max_residual": max((float(r.residual) for r in state.history), default=0.0),
        "vertices": int(state.mesh.n_vertices),
        "faces": int(state.mesh.n_faces),
        "seconds": 0.0 if cfg.deterministic else round(time.perf_counter() - t0, 3),
    }
    if message:
        summary["error"] = message
    _write_summary(out / "summary.yaml", summary)
    print(yaml.safe_dump(summary, sort_keys=False), end="")
    return code


def cmd_consistency(config_path: str) -> int:
    try:
        cfg = load_config(config_path)
        threads = thread_count(cfg)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    c = cfg.consistency
    try:
        with threadpool_limits(limits=threads):
            report = consistency_study(c.surface, tuple(c.levels), tuple(c.thetas), cfg.p, c.radius, c.major,
                                       c.minor, leaf_size=cfg.leaf_size)
    except (ValueError, MeshError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / EFFECTIVE_CONFIG).write_text(serialize_config(cfg), encoding="utf-8")
    with open(out / "consistency.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "level_or_theta", "faces", "h", "energy", "rel_error"])
        for r in report.levels:
            w.writerow(["level", r.level, r.n_faces, repr(r.h), repr(r.energy), repr(r.rel_error)])
        for r in report.thetas:
            w.writerow(["theta", r.theta, report.sweep_faces, "", repr(r.energy), repr(r.deviation)])
        w.writerow(["rate_h", "", "", "", "", repr(report.rate)])
        w.writerow(["rate_theta", "", "", "", "", repr(report.theta_rate)])
    print(format_report(report))
    return EXIT_OK


def cmd_validate(config_path: str) -> int:
    try:
        cfg = load_config(config_path)
        if cfg.mesh is not None:
            mesh = build_mesh(cfg)
            validate_mesh(mesh)
            build_penalties(cfg).initialize(mesh, cfg.p)
            print(f"mesh: {mesh.n_vertices} vertices, {mesh.n_faces} faces, {mesh.n_components} component(s)")
    except (ConfigError, MeshError, PenaltyError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(serialize_config(cfg), end="")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="repulsor", description="Tangent-point energy flows on triangle meshes.")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (("run", "run a flow"), ("consistency", "run a consistency study"),
                      ("validate", "check a config and echo the effective settings")):
        p = sub.add_parser(name, help=doc)
        p.add_argument("config", help="YAML scene configuration")
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    command = {"run": cmd_run, "consistency": cmd_consistency, "validate": cmd_validate}[args.command]
    return command(args.config)


if __name__ == "__main__":
    sys.exit(main())
