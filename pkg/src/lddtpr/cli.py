"""Command-line entry point: ``lddtpr {run,check,list-scenarios,mesh-info}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .geometry import GeometryError, triangulate
from .ldd import SolverParams, check_conditions, subdomain_constants
from .linalg import LinearSolveError
from .verify import PRESETS, Scenario, emit_report, preset, run_scenario, scenario_from_dict

log = logging.getLogger("lddtpr")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2

_TOP_KEYS = {"preset", "scenario", "resolution", "steps", "out", "threads", "verbose",
             "tau", "eps_s", "max_iters", "gravity", "gravity_coupling", "M_estimate", "s_range"}
_TOP_SOLVER = {"tau": "tau", "eps_s": "eps_s", "max_iters": "max_iters", "gravity": "gravity_on",
               "gravity_coupling": "gravity_coupling", "M_estimate": "M_estimate"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: Scenario
    resolution: int
    steps: int
    out: str | None = None
    threads: int | None = None
    verbose: bool = False
    s_range: tuple = (0.05, 1.0)


def _apply_dotted(solver: SolverParams, key: str, value) -> SolverParams:
    parts = key.split(".")[1:]
    if not parts:
        raise ConfigError(f"unknown key {key!r}")
    name = "lam" if parts[0] == "lambda" else parts[0]
    names = {f.name for f in dataclasses.fields(SolverParams)}
    if name not in names:
        raise ConfigError(f"unknown key {key!r}")
    if name == "L":
        if len(parts) != 3:
            raise ConfigError(f"{key!r}: expected solver.L.<phase>.<subdomain>")
        phase, sub = parts[1], parts[2]
        table = {p: dict(v) for p, v in solver.L.items()}
        try:
            table.setdefault(phase, {})[int(sub)] = value
        except ValueError:
            raise ConfigError(f"{key!r}: subdomain must be an integer") from None
        return dataclasses.replace(solver, L=table)
    if name == "lam":
        if len(parts) != 2:
            raise ConfigError(f"{key!r}: expected solver.lambda.<phase>")
        table = dict(solver.lam)
        table[parts[1]] = value
        return dataclasses.replace(solver, lam=table)
    if len(parts) != 1:
        raise ConfigError(f"unknown key {key!r}")
    return dataclasses.replace(solver, **{name: value})


def parse_config(source, *, steps=None, resolution=None, out=None, threads=None,
                 verbose=False, preset_name=None) -> RunConfig:
    """Validate a JSON config (path, JSON text already loaded as dict, or ``None``).

    Command-line values override config values.
    """
    if source is None:
        data = {}
    elif isinstance(source, dict):
        data = dict(source)
    else:
        path = Path(source)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    if preset_name is not None:
        if "scenario" in data:
            raise ConfigError("give either 'preset' or 'scenario', not both")
        data["preset"] = preset_name

    for key in data:
        if key not in _TOP_KEYS and not key.startswith("solver."):
            raise ConfigError(f"unknown key {key!r}")
    if ("preset" in data) == ("scenario" in data):
        raise ConfigError("exactly one of 'preset' and 'scenario' is required")

    try:
        if "preset" in data:
            scenario = preset(data["preset"])
        else:
            if not isinstance(data["scenario"], dict):
                raise ConfigError("'scenario' must be an object")
            scenario = scenario_from_dict(data["scenario"])
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
    except (ValueError, TypeError, GeometryError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid scenario: {exc}") from None

    solver = scenario.solver
    for key, value in data.items():
        try:
            if key in _TOP_SOLVER:
                solver = dataclasses.replace(solver, **{_TOP_SOLVER[key]: value})
            elif key.startswith("solver."):
                solver = _apply_dotted(solver, key, value)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid value for {key!r}: {exc}") from None

    def pick(cli_value, key, default):
        return cli_value if cli_value is not None else data.get(key, default)

    n_steps = pick(steps, "steps", solver.steps)
    res = pick(resolution, "resolution", scenario.resolution)
    n_threads = pick(threads, "threads", None)
    for key, value, lo in (("steps", n_steps, 0), ("resolution", res, 1)):
        if isinstance(value, bool) or not isinstance(value, int) or value < lo:
            raise ConfigError(f"invalid value for {key!r}: {value!r}")
    if n_threads is not None and (isinstance(n_threads, bool) or not isinstance(n_threads, int)
                                  or n_threads < 1):
        raise ConfigError(f"invalid value for 'threads': {n_threads!r}")
    try:
        solver = dataclasses.replace(solver, steps=n_steps)
    except ValueError as exc:
        raise ConfigError(f"invalid value for 'steps': {exc}") from None
    s_range = tuple(data.get("s_range", (0.05, 1.0)))
    scenario = dataclasses.replace(scenario, solver=solver, resolution=res)
    return RunConfig(scenario, res, n_steps, pick(out, "out", None), n_threads,
                     bool(verbose or data.get("verbose", False)), s_range)


def _output_dir(cfg: RunConfig, cli_out: str | None) -> Path:
    if cli_out is not None:
        return Path(cli_out)
    target = Path(cfg.out) if cfg.out else Path(cfg.scenario.name)
    if target.is_absolute():
        return target
    return Path(os.environ.get("LDD_OUT_DIR", ".")) / target


def _cmd_run(args, cfg: RunConfig) -> int:
    part = cfg.scenario.partition()
    n_equations = len(part.ids) + len(part.two_phase_ids)
    threads = cfg.threads or max(1, min(n_equations, os.cpu_count() or 1))
    out = _output_dir(cfg, args.out)
    try:
        report = run_scenario(cfg.scenario, resolution=cfg.resolution, steps=cfg.steps,
                              threads=threads, keep_subsequent=cfg.verbose)
    except (LinearSolveError, ValueError, ArithmeticError) as exc:
        print(f"error: solver failed: {exc}", file=sys.stderr)
        return EXIT_ERROR
    try:
        emit_report(report, out, write_subsequent=cfg.verbose)
    except OSError as exc:
        print(f"error: cannot write reports to {out}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    failed = [s.step for s in report.steps if not s.converged]
    print(f"{cfg.scenario.name}: {len(report.steps)} steps, {report.total_iterations} LDD iterations, "
          f"{report.linear_solves} linear solves, {report.wall_time:.2f} s -> {out}")
    if report.steps:
        last = report.steps[-1]
        print("final relative errors: " + ", ".join(
            f"{p}_{l}={e:.3e}" for (p, l), e in last.rel_errors.items()))
    if failed:
        print(f"warning: {len(failed)} step(s) did not reach eps_s (first: {failed[0]})", file=sys.stderr)
        if args.strict:
            return EXIT_NOT_CONVERGED
    return EXIT_OK


def _cmd_check(args, cfg: RunConfig) -> int:
    sc = cfg.scenario
    part = sc.partition()
    models = {l: part.model(l) for l in part.ids}
    consts = subdomain_constants(sc.materials, sc.curves, models, cfg.s_range)
    report = check_conditions(sc.solver, consts)
    print(f"{sc.name}: convergence conditions (advisory), saturation range {cfg.s_range}")
    for l, c in sorted(consts.items()):
        cc = c.constants
        print(f"subdomain {l} ({c.model.value}): L_S={cc.L_S:.6g} L_kw={cc.L_kw:.6g} "
              f"L_knw={cc.L_knw:.6g} m_w={cc.m_w:.6g} m_nw={cc.m_nw:.6g}")
    for line in report.lines():
        print(line)
    return EXIT_OK


def _cmd_mesh_info(args, cfg: RunConfig) -> int:
    mesh = triangulate(cfg.scenario.partition(), cfg.resolution)
    print(f"resolution {cfg.resolution}: {len(mesh.vertices)} vertices, {len(mesh.cells)} cells, "
          f"h = {mesh.h:.6g}")
    for l, sub in sorted(mesh.submeshes.items()):
        print(f"subdomain {l} ({sub.model.value}): h = {sub.h:.6g}, dofs = {sub.n_dofs}, "
              f"cells = {len(sub.cells)}")
    for (l, k), iface in sorted(mesh.interfaces.items()):
        print(f"interface {l}-{k}: {len(iface.facets)} facets")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lddtpr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--preset", help="preset scenario name (instead of a config file)")
        p.add_argument("--resolution", type=int, help="cells per unit length")
        p.add_argument("--steps", type=int, help="number of time steps")
        p.add_argument("--verbose", action="store_true", help="log progress, write subsequent errors")

    p_run = sub.add_parser("run", help="simulate and write CSV reports")
    common(p_run)
    p_run.add_argument("--out", help="output directory")
    p_run.add_argument("--threads", type=int, help="worker threads for subdomain solves")
    p_run.add_argument("--strict", action="store_true", help="exit 2 if any step did not converge")
    common(sub.add_parser("check", help="evaluate the convergence conditions"))
    common(sub.add_parser("mesh-info", help="mesh sizes and dof counts"))
    sub.add_parser("list-scenarios", help="list preset scenarios")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "list-scenarios":
        for name in PRESETS:
            print(f"{name:20s} {preset(name).description}")
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.config is None and args.preset is None:
        print("error: --config or --preset is required", file=sys.stderr)
        return EXIT_ERROR
    try:
        cfg = parse_config(args.config, steps=args.steps, resolution=args.resolution,
                           out=getattr(args, "out", None), threads=getattr(args, "threads", None),
                           verbose=args.verbose, preset_name=args.preset)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    try:
        return {"run": _cmd_run, "check": _cmd_check, "mesh-info": _cmd_mesh_info}[args.command](args, cfg)
    except (GeometryError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
