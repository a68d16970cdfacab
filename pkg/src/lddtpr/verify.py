"""Manufactured solutions, scenario presets, verification runs and report files."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .constitutive import (Fluid, MaterialParams, PowerLawCurves, curves_from_config,
                           d_mobility, mobility)
from .geometry import Model, build_partition, triangulate
from .ldd import Problem, RunReport, SolverParams, run_simulation

# -- polynomials in (t, x, y) ------------------------------------------------

_VARS = {"t": 1, "x": 2, "y": 3}


@dataclass(frozen=True)
class Polynomial:
    """Sum of ``coef * t**a * x**b * y**c`` terms, stored as ``(coef, a, b, c)``."""

    terms: tuple = ()

    def __call__(self, x, y, t):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.broadcast(x, y).shape)
        for coef, a, b, c in self.terms:
            out = out + coef * (t ** a) * x ** b * y ** c
        return out

    def d(self, var: str) -> "Polynomial":
        i = _VARS[var]
        out = []
        for term in self.terms:
            power = term[i]
            if power == 0:
                continue
            new = list(term)
            new[0] = term[0] * power
            new[i] = power - 1
            out.append(tuple(new))
        return Polynomial(tuple(out))

    @classmethod
    def parse(cls, *terms) -> "Polynomial":
        return cls(tuple((float(c), int(a), int(b), int(e)) for c, a, b, e in terms))


ZERO = Polynomial()

# -7 - (1 + t^2)(1 + x^2 + y^2)
_PW_RICHARDS = Polynomial.parse((-8, 0, 0, 0), (-1, 0, 2, 0), (-1, 0, 0, 2),
                                (-1, 2, 0, 0), (-1, 2, 2, 0), (-1, 2, 0, 2))
# -7 - (1 + t^2)(1 + x^2)
_PW_TWO_PHASE = Polynomial.parse((-8, 0, 0, 0), (-1, 0, 2, 0), (-1, 2, 0, 0), (-1, 2, 2, 0))
# (-2 - t(1.1 + y + x^2)) y^2
_PNW_TWO_DOMAIN = Polynomial.parse((-2, 0, 0, 2), (-1.1, 1, 0, 2), (-1, 1, 0, 3), (-1, 1, 2, 2))
# (-3 - t(1 + y + x^2) - t^2) y^2
_PNW_FIVE_DOMAIN = Polynomial.parse((-3, 0, 0, 2), (-1, 1, 0, 2), (-1, 1, 0, 3), (-1, 1, 2, 2),
                                    (-1, 2, 0, 2))


@dataclass(frozen=True)
class ManufacturedSolution:
    """Exact pressures keyed by ``(phase, subdomain)``; missing entries are zero."""

    name: str
    pressures: Mapping

    def pressure(self, phase: str, l: int) -> Polynomial:
        return self.pressures.get((phase, l), ZERO)

    def has(self, phase: str, l: int) -> bool:
        return (phase, l) in self.pressures


SOLUTIONS = {
    "two-domain": ManufacturedSolution("two-domain", {
        ("w", 1): _PW_RICHARDS, ("w", 2): _PW_TWO_PHASE, ("nw", 2): _PNW_TWO_DOMAIN}),
    "two-domain-tptp": ManufacturedSolution("two-domain-tptp", {
        ("w", 1): _PW_RICHARDS, ("nw", 1): ZERO, ("w", 2): _PW_TWO_PHASE, ("nw", 2): _PNW_TWO_DOMAIN}),
    "five-domain": ManufacturedSolution("five-domain", {
        ("w", 1): _PW_RICHARDS, ("w", 5): _PW_RICHARDS,
        **{("w", j): _PW_TWO_PHASE for j in (2, 3, 4)},
        **{("nw", j): _PNW_FIVE_DOMAIN for j in (2, 3, 4)}}),
}


def get_solution(name: str) -> ManufacturedSolution:
    try:
        return SOLUTIONS[name]
    except KeyError:
        raise KeyError(f"unknown manufactured solution {name!r}; known: {sorted(SOLUTIONS)}") from None


def exact_pressure(solution: str | ManufacturedSolution, phase: str, l: int, x, y, t):
    """Exact pressure; the nonwetting pressure of a Richards subdomain is zero."""
    sol = get_solution(solution) if isinstance(solution, str) else solution
    if not sol.has("w", l):
        raise KeyError(f"solution {sol.name} has no subdomain {l}")
    return sol.pressure(phase, l)(x, y, t)


def source_term(solution: str | ManufacturedSolution, phase: str, l: int, model: Model,
                params: MaterialParams, curves: PowerLawCurves, gravity_on: bool, x, y, t):
    """Volumetric source making the exact pressures solve the flow equations.

    ``f_w = phi dS/dt - div(k_w grad(p_w + z_w))`` and
    ``f_nw = -phi dS/dt - div(k_nw grad(p_nw + z_nw))`` with ``S = S(p_nw - p_w)``;
    the divergence is expanded by the chain rule through ``S``.
    """
    sol = get_solution(solution) if isinstance(solution, str) else solution
    if phase == "nw" and model is Model.RICHARDS:
        raise ValueError(f"subdomain {l} carries no nonwetting equation")
    pw = sol.pressure("w", l)
    pnw = sol.pressure("nw", l) if model is Model.TWO_PHASE else ZERO
    pc = pnw(x, y, t) - pw(x, y, t)
    s = curves.saturation(pc)
    ds = curves.d_saturation(pc)
    pc_t = pnw.d("t")(x, y, t) - pw.d("t")(x, y, t)
    pc_x = pnw.d("x")(x, y, t) - pw.d("x")(x, y, t)
    pc_y = pnw.d("y")(x, y, t) - pw.d("y")(x, y, t)

    p = pw if phase == "w" else pnw
    grad_z = params.gravity_gradient(phase, gravity_on)
    px = p.d("x")(x, y, t) + grad_z[0]
    py = p.d("y")(x, y, t) + grad_z[1]
    lap = p.d("x").d("x")(x, y, t) + p.d("y").d("y")(x, y, t)
    k = mobility(params, curves, phase, s)
    dk = d_mobility(params, curves, phase, s)
    div_flux = dk * ds * (pc_x * px + pc_y * py) + k * lap
    sign = 1.0 if phase == "w" else -1.0
    return sign * params.porosity * ds * pc_t - div_flux


# -- scenarios ---------------------------------------------------------------

WATER = Fluid(viscosity=1.0, density=997.0)
AIR = Fluid(viscosity=1.0 / 50.0, density=1.225)


def _soil(porosity: float, permeability: float, gravity: float = 9.81) -> MaterialParams:
    return MaterialParams(porosity, permeability, {"w": WATER, "nw": AIR}, gravity)


@dataclass
class Scenario:
    name: str
    geometry: object
    materials: dict
    curves: dict
    solution: str
    solver: SolverParams
    resolution: int = 20
    description: str = ""

    def __post_init__(self):
        partition = build_partition(self.geometry)
        sol = get_solution(self.solution)
        for l in partition.ids:
            if l not in self.materials or l not in self.curves:
                raise ValueError(f"scenario {self.name}: subdomain {l} lacks material or curves")
            if not sol.has("w", l):
                raise ValueError(f"scenario {self.name}: solution {sol.name} has no subdomain {l}")
            for phase in ("w", "nw") if partition.model(l) is Model.TWO_PHASE else ("w",):
                self.solver.L_of(phase, l)

    def partition(self):
        return build_partition(self.geometry)

    def with_solver(self, **changes) -> "Scenario":
        return dataclasses.replace(self, solver=dataclasses.replace(self.solver, **changes))

    def build_problem(self, resolution: int | None = None, quad_degree: int = 4) -> Problem:
        partition = self.partition()
        mesh = triangulate(partition, resolution or self.resolution)
        sol = get_solution(self.solution)
        gravity = self.solver.gravity_on

        def source(phase, l, t):
            args = (sol, phase, l, partition.model(l), self.materials[l], self.curves[l], gravity)
            return lambda x, y: source_term(*args, x, y, t)

        def boundary(phase, l, t):
            poly = sol.pressure(phase, l)
            return lambda x, y: poly(x, y, t)

        return Problem(mesh, self.materials, self.curves, source, boundary, quad_degree)

    def exact(self, phase: str, l: int, t: float):
        poly = get_solution(self.solution).pressure(phase, l)
        return lambda x, y: poly(x, y, t)

    def initial_fields(self, problem: Problem, t0: float = 0.0) -> dict:
        return {(phase, l): problem.spaces[l].interpolate(self.exact(phase, l, t0))
                for phase, l in problem.fields()}


def _two_domain_solver(**kw) -> SolverParams:
    base = dict(tau=1e-3, steps=1500, eps_s=2e-6, max_iters=1000, gravity_on=False)
    base.update(kw)
    return SolverParams(**base)


def _fig3() -> Scenario:
    return Scenario(
        "fig3-homogeneous", "two-domain", {1: _soil(0.22, 0.01), 2: _soil(0.22, 0.01)},
        {1: PowerLawCurves.power(2), 2: PowerLawCurves.power(3)}, "two-domain",
        _two_domain_solver(L={"w": {1: 0.007, 2: 0.005}, "nw": {2: 0.005}},
                           lam={"w": 0.75, "nw": 0.75}),
        description="Richards over two-phase, equal soils")


def _fig3_tptp() -> Scenario:
    return Scenario(
        "fig3-tptp", "two-domain-tptp", {1: _soil(0.22, 0.01), 2: _soil(0.22, 0.01)},
        {1: PowerLawCurves.power(2), 2: PowerLawCurves.power(3)}, "two-domain-tptp",
        _two_domain_solver(L={"w": {1: 0.007, 2: 0.005}, "nw": {1: 0.007, 2: 0.005}},
                           lam={"w": 0.75, "nw": 0.75}),
        description="fig3 setup with the two-phase model on both subdomains")


def _fig4() -> Scenario:
    return Scenario(
        "fig4-heterogeneous", "two-domain", {1: _soil(0.22, 0.01), 2: _soil(0.022, 1e-4)},
        {1: PowerLawCurves.power(2), 2: PowerLawCurves.power(3)}, "two-domain",
        _two_domain_solver(L={"w": {1: 0.007, 2: 0.0005}, "nw": {2: 0.0005}},
                           lam={"w": 0.5, "nw": 0.5}),
        description="Richards over two-phase, contrasting soils")


def _fig5() -> Scenario:
    s = _fig4().with_solver(tau=1e-2)
    s.name, s.description = "fig5-coarse-tau", "fig4 with a ten times larger time step"
    return s


def _fig6() -> Scenario:
    s = _fig4().with_solver(L={"w": {1: 0.025, 2: 0.05}, "nw": {2: 0.025}},
                            lam={"w": 4.0, "nw": 4.0}, eps_s=3e-6, steps=800)
    s.name, s.description = "fig6-bad-params", "fig4 with poorly tuned weights"
    return s


def _five_domain(name, L_w, L_nw, lam_w, lam_nw, eps_s, gravity, description) -> Scenario:
    soils = {l: _soil(0.2, 0.01) for l in range(1, 6)}
    curves = {l: PowerLawCurves.power(2 if l in (1, 5) else 3) for l in range(1, 6)}
    solver = SolverParams(
        tau=1e-3, steps=1000, eps_s=eps_s, max_iters=1000, gravity_on=gravity,
        gravity_coupling="include",
        L={"w": {l: L_w for l in range(1, 6)}, "nw": {l: L_nw for l in (2, 3, 4)}},
        lam={"w": lam_w, "nw": lam_nw})
    return Scenario(name, "five-domain", soils, curves, "five-domain", solver,
                    description=description)


PRESETS = {
    "fig3-homogeneous": _fig3,
    "fig3-tptp": _fig3_tptp,
    "fig4-heterogeneous": _fig4,
    "fig5-coarse-tau": _fig5,
    "fig6-bad-params": _fig6,
    "fig8-fivedomain": lambda: _five_domain("fig8-fivedomain", 0.01, 0.004, 1.0, 0.25, 1e-6, False,
                                            "five subdomains with an inner two-phase region"),
    "fig9-gravity": lambda: _five_domain("fig9-gravity", 0.5, 0.5, 4.0, 4.0, 5e-6, True,
                                         "five subdomains including gravity"),
}


def preset(name: str) -> Scenario:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; known: {sorted(PRESETS)}") from None


_SCENARIO_KEYS = {"name", "geometry", "materials", "fluids", "gravity", "curves", "solution",
                  "solver", "resolution", "description"}
_SOLVER_KEYS = {f.name for f in dataclasses.fields(SolverParams)} | {"lambda"}


def _int_keys(d):
    return {int(k): v for k, v in d.items()}


def scenario_from_dict(d: Mapping) -> Scenario:
    """Inline scenario description.

    Keys: ``geometry`` (name or polygon descriptor), ``materials``
    (``{id: {porosity, permeability}}``), optional ``fluids``
    (``{phase: {viscosity, density}}``) and ``gravity``, ``curves``
    (``{id: {family, exponent}}``), ``solution`` and ``solver``.
    """
    unknown = set(d) - _SCENARIO_KEYS
    if unknown:
        raise ValueError(f"unknown scenario key(s): {', '.join(sorted(unknown))}")
    for key in ("geometry", "materials", "curves", "solution", "solver"):
        if key not in d:
            raise ValueError(f"scenario is missing {key!r}")
    fluids = {"w": WATER, "nw": AIR}
    for phase, fl in d.get("fluids", {}).items():
        fluids[phase] = Fluid(float(fl["viscosity"]), float(fl["density"]))
    gravity = float(d.get("gravity", 9.81))
    materials = {l: MaterialParams(float(m["porosity"]), float(m["permeability"]), fluids, gravity)
                 for l, m in _int_keys(d["materials"]).items()}
    curves = {l: curves_from_config(c) for l, c in _int_keys(d["curves"]).items()}
    solver = dict(d["solver"])
    unknown = set(solver) - _SOLVER_KEYS
    if unknown:
        raise ValueError(f"unknown solver key(s): {', '.join(sorted(unknown))}")
    if "lambda" in solver:
        solver["lam"] = solver.pop("lambda")
    solver["L"] = {phase: _int_keys(v) for phase, v in solver["L"].items()}
    return Scenario(d.get("name", "inline"), d["geometry"], materials, curves, d["solution"],
                    SolverParams(**solver), int(d.get("resolution", 20)), d.get("description", ""))


def run_scenario(scenario: Scenario, resolution: int | None = None,
                 steps: int | None = None, threads: int | None = None,
                 keep_subsequent: bool = True) -> RunReport:
    """Mesh, initialise from the exact solution at ``t = 0`` and simulate."""
    if steps is not None or threads is not None:
        changes = {}
        if steps is not None:
            changes["steps"] = steps
        if threads is not None:
            changes["threads"] = threads
        scenario = scenario.with_solver(**changes)
    problem = scenario.build_problem(resolution)
    return run_simulation(problem, scenario.solver, scenario.initial_fields(problem),
                          exact=scenario.exact, keep_subsequent=keep_subsequent)


# -- reports -----------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".12e")


def field_label(f) -> str:
    return f"{f[0]}_{f[1]}"


def emit_report(report: RunReport, out_dir, write_subsequent: bool = True) -> list[Path]:
    """Write ``errors.csv``, ``iterations.csv``, ``subsequent_errors.csv`` and ``plot.gp``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = [field_label(f) for f in report.fields]
    written = []

    path = out / "errors.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "time", "iters"] + [f"rel_err_{s}" for s in labels])
        for rec in report.steps:
            w.writerow([rec.step, _fmt(rec.time), rec.iterations]
                       + [_fmt(rec.rel_errors[f]) if f in rec.rel_errors else "" for f in report.fields])
    written.append(path)

    path = out / "iterations.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "time", "iters", "status"])
        for rec in report.steps:
            w.writerow([rec.step, _fmt(rec.time), rec.iterations,
                        "converged" if rec.converged else "not_converged"])
    written.append(path)

    if write_subsequent:
        path = out / "subsequent_errors.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "iter", "field", "value"])
            for rec in report.steps:
                for i, errs in enumerate(rec.subsequent_errors, start=1):
                    for f in report.fields:
                        w.writerow([rec.step, i, field_label(f), _fmt(errs[f])])
        written.append(path)

    path = out / "plot.gp"
    path.write_text(_plot_script(labels, write_subsequent, report.steps[-1].step if report.steps else 0))
    written.append(path)
    return written


def _plot_script(labels, with_subsequent: bool, last_step: int) -> str:
    lines = [
        "# gnuplot script; run from this directory: gnuplot plot.gp",
        "set datafile separator ','",
        "set terminal pngcairo size 900,600",
        "set logscale y",
        "set key outside",
        "set output 'errors.png'",
        "set xlabel 't'",
        "set ylabel 'relative L2 error'",
    ]
    plots = [f"'errors.csv' using 2:{4 + i} with lines title '{lab}'" for i, lab in enumerate(labels)]
    lines.append("plot " + ", \\\n     ".join(plots) if plots else "# no fields")
    if with_subsequent and last_step:
        lines += [
            "set output 'subsequent_errors.png'",
            "set xlabel 'iteration'",
            "set ylabel 'subsequent error'",
        ]
        plots = [f"'subsequent_errors.csv' using (($1=={last_step} && strcol(3) eq '{lab}') ? $2 : 1/0):4 "
                 f"with linespoints title '{lab}'" for lab in labels]
        lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


__all__ = [
    "Polynomial", "ManufacturedSolution", "SOLUTIONS", "get_solution", "exact_pressure",
    "source_term", "Scenario", "PRESETS", "preset", "scenario_from_dict", "run_scenario",
    "emit_report", "RunReport",
]
