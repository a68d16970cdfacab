"""Linearised domain-decomposition iteration for hybrid two-phase/Richards flow.

Every subdomain carries a wetting pressure; two-phase subdomains also carry
a nonwetting pressure. Subdomains exchange Robin data (``g``-terms) over
their interfaces. One iteration solves all subdomain problems from the
previous iteration's snapshot, so the solves are independent and may run
concurrently.
"""

from __future__ import annotations

import dataclasses
import logging
import time as _time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .constitutive import ConstantsReport, MaterialParams, PowerLawCurves, constants_report
from .fem import (SubdomainSpace, TraceFieldDG1, assemble_subdomain_system, l2_error,
                  l2_norm, reconstruct_interface_flux)
from .geometry import Model, MultiDomainMesh
from .linalg import LinearSolveError, solve

log = logging.getLogger(__name__)

Field = tuple  # (phase, subdomain id)
GKey = tuple   # (phase, owner l, neighbour k)

COUPLINGS = ("include", "exclude")
NORMS = ("l2", "euclidean")


def _positive(name, value):
    if not (isinstance(value, (int, float, np.floating)) and np.isfinite(value) and value > 0):
        raise ValueError(f"{name} must be a positive number, got {value!r}")


@dataclass
class SolverParams:
    """Time stepping, L-scheme and Robin weights, stopping rule.

    ``L`` maps phase -> subdomain -> weight. ``lam`` maps phase to either a
    single weight for every interface or to ``{(l, k): weight}``; a pair may
    be given in either order but both orders must agree.
    """

    tau: float
    steps: int
    L: Mapping[str, Mapping[int, float]]
    lam: Mapping[str, object]
    eps_s: float = 2e-6
    max_iters: int = 1000
    gravity_on: bool = False
    gravity_coupling: str = "include"
    M_estimate: Optional[float] = None
    norm: str = "l2"
    linear_method: str = "gmres"
    linear_rtol: float = 1e-10
    restart: int = 30
    linear_max_iters: int = 2000
    threads: int = 1

    def __post_init__(self):
        _positive("tau", self.tau)
        _positive("eps_s", self.eps_s)
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError(f"steps must be a nonnegative integer, got {self.steps!r}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ValueError(f"max_iters must be a positive integer, got {self.max_iters!r}")
        if self.gravity_coupling not in COUPLINGS:
            raise ValueError(f"gravity_coupling must be one of {COUPLINGS}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.M_estimate is not None:
            _positive("M_estimate", self.M_estimate)
        if int(self.threads) != self.threads or self.threads < 1:
            raise ValueError("threads must be a positive integer")
        for phase, per_sub in self.L.items():
            for l, v in per_sub.items():
                _positive(f"L.{phase}.{l}", v)
        lam = {}
        for phase, v in self.lam.items():
            if isinstance(v, Mapping):
                table = {}
                for (a, b), w in v.items():
                    _positive(f"lambda.{phase}.{a}-{b}", w)
                    key = (min(a, b), max(a, b))
                    if key in table and table[key] != w:
                        raise ValueError(f"lambda.{phase} not symmetric on interface {key}")
                    table[key] = float(w)
                lam[phase] = table
            else:
                _positive(f"lambda.{phase}", v)
                lam[phase] = float(v)
        self.lam = lam

    def L_of(self, phase: str, l: int) -> float:
        try:
            return float(self.L[phase][l])
        except KeyError:
            raise KeyError(f"no L weight for phase {phase} on subdomain {l}") from None

    def lam_of(self, phase: str, l: int, k: int) -> float:
        v = self.lam[phase]
        if isinstance(v, dict):
            try:
                return v[(min(l, k), max(l, k))]
            except KeyError:
                raise KeyError(f"no lambda for phase {phase} on interface {l}-{k}") from None
        return v


class Problem:
    """Mesh, per-subdomain data and the time-dependent source/boundary data.

    ``source(phase, l, t)`` and ``boundary(phase, l, t)`` return vectorised
    callables ``(x, y) -> value`` (or ``None`` for no source / homogeneous
    Dirichlet data).
    """

    def __init__(self, mesh: MultiDomainMesh, materials: Mapping[int, MaterialParams],
                 curves: Mapping[int, PowerLawCurves], source: Callable | None = None,
                 boundary: Callable | None = None, quad_degree: int = 4):
        self.mesh = mesh
        self.partition = mesh.partition
        missing = [l for l in self.partition.ids if l not in materials or l not in curves]
        if missing:
            raise ValueError(f"subdomains without material or curves: {missing}")
        self.materials = dict(materials)
        self.curves = dict(curves)
        self.source = source
        self.boundary = boundary
        self.spaces = {l: SubdomainSpace(mesh, l, quad_degree) for l in self.partition.ids}

    def fields(self) -> list[Field]:
        out = [("w", l) for l in self.partition.ids]
        out += [("nw", l) for l in self.partition.ids if self.model(l) is Model.TWO_PHASE]
        return out

    def model(self, l: int) -> Model:
        return self.partition.model(l)

    def g_keys(self) -> list[GKey]:
        keys = []
        for l in self.partition.ids:
            for k in self.spaces[l].neighbours:
                keys.append(("w", l, k))
                if self.model(l) is Model.TWO_PHASE or self.model(k) is Model.TWO_PHASE:
                    keys.append(("nw", l, k))
        return keys

    def gravity_gradient(self, phase: str, l: int, params: SolverParams) -> np.ndarray:
        return self.materials[l].gravity_gradient(phase, params.gravity_on)


def _phase_fields(fields: Mapping[Field, np.ndarray], l: int) -> dict:
    out = {"w": fields[("w", l)]}
    if ("nw", l) in fields:
        out["nw"] = fields[("nw", l)]
    return out


@dataclass
class IterationState:
    """Iterates, time-level data and double-buffered interface terms of one time step."""

    step: int
    time: float
    time_level: dict                      # p^{n-1}
    current: dict                         # p^{n,i}
    previous: dict                        # p^{n,i-1}
    g_current: dict                       # g^i, keyed (phase, l, k)
    g_previous: dict                      # g^{i-1}
    iteration: int = 0
    subsequent_errors: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    linear_solves: int = 0
    linear_iterations: int = 0


def init_time_step(problem: Problem, params: SolverParams, prev_fields: Mapping[Field, np.ndarray],
                   step: int, t: float) -> IterationState:
    """Initial iterates: previous time level as pressures, fluxes plus Robin traces as g."""
    missing = [f for f in problem.fields() if f not in prev_fields]
    if missing:
        raise KeyError(f"missing previous time-level fields {missing}")
    prev = {f: np.asarray(prev_fields[f], dtype=float).copy() for f in problem.fields()}
    g0 = {}
    for phase, l, k in problem.g_keys():
        space = problem.spaces[l]
        mat, cur = problem.materials[l], problem.curves[l]
        grad_z = problem.gravity_gradient(phase, l, params)
        sat = _phase_fields(prev, l)
        if (phase, l) in prev:
            flux = reconstruct_interface_flux(space, k, prev[(phase, l)], sat, mat, cur, phase, grad_z)
            trace = prev[(phase, l)][space.traces[k].local_dofs]
            g0[(phase, l, k)] = TraceFieldDG1(l, k, flux.values - params.lam_of(phase, l, k) * trace)
        elif params.gravity_on and params.gravity_coupling == "include":
            # nonwetting flux of a Richards subdomain is carried by gravity alone
            down = reconstruct_interface_flux(space, k, np.zeros(space.n), sat, mat, cur, phase, grad_z)
            g0[(phase, l, k)] = TraceFieldDG1(l, k, -down.values)
        else:
            g0[(phase, l, k)] = TraceFieldDG1(l, k, np.zeros((space.traces[k].n_facets, 2)))
    return IterationState(step=step, time=t, time_level=prev,
                          current={f: v.copy() for f, v in prev.items()},
                          previous={f: v.copy() for f, v in prev.items()},
                          g_current=g0, g_previous=dict(g0))


def update_g_terms(problem: Problem, params: SolverParams, fields: Mapping[Field, np.ndarray],
                   g_prev: Mapping[GKey, TraceFieldDG1]) -> dict:
    """Robin data for the next iteration from the neighbours' previous iterates."""
    out = {}
    for phase, l, k in problem.g_keys():
        tm = problem.spaces[l].traces[k]
        incoming = g_prev[(phase, k, l)].values
        if phase == "nw" and problem.model(l) is Model.TWO_PHASE and problem.model(k) is Model.RICHARDS:
            vals = -incoming
        else:
            p_k = fields[(phase, k)][tm.neighbour_dofs]
            vals = -2.0 * params.lam_of(phase, l, k) * p_k - incoming
        out[(phase, l, k)] = TraceFieldDG1(l, k, vals)
    return out


def _solve_field(problem: Problem, params: SolverParams, state: IterationState,
                 g_new: Mapping[GKey, TraceFieldDG1], phase: str, l: int):
    space = problem.spaces[l]
    t = state.time
    src = problem.source(phase, l, t) if problem.source is not None else None
    if problem.boundary is not None:
        fn = problem.boundary(phase, l, t)
        pts = space.points[space.boundary_dofs]
        dvals = np.asarray(fn(pts[:, 0], pts[:, 1]), dtype=float) * np.ones(len(pts))
    else:
        dvals = np.zeros(len(space.boundary_dofs))
    system = assemble_subdomain_system(
        space, phase,
        prev_iterate=_phase_fields(state.current, l),
        prev_time=_phase_fields(state.time_level, l),
        g_terms={k: g_new[(phase, l, k)] for k in space.neighbours},
        params=problem.materials[l], curves=problem.curves[l],
        L=params.L_of(phase, l),
        lam={k: params.lam_of(phase, l, k) for k in space.neighbours},
        tau=params.tau, source=src, dirichlet_values=dvals,
        gravity_gradient=problem.gravity_gradient(phase, l, params))
    A, b = system.constrained()
    try:
        res = solve(A, b, method=params.linear_method, rel_tol=params.linear_rtol,
                    restart=params.restart, max_iters=params.linear_max_iters,
                    x0=state.current[(phase, l)])
    except LinearSolveError as exc:
        raise LinearSolveError(f"phase {phase}, subdomain {l}, step {state.step}, "
                               f"iteration {state.iteration + 1}: {exc}") from exc
    return res.x, res.iterations


def field_norm(problem: Problem, params: SolverParams, l: int, v: np.ndarray) -> float:
    if params.norm == "euclidean":
        return float(np.linalg.norm(v))
    return l2_norm(problem.spaces[l], v)


def ldd_iteration(state: IterationState, problem: Problem, params: SolverParams,
                  executor: Executor | None = None, order: list | None = None) -> dict:
    """One iteration: new g-terms from the snapshot, all subdomain solves, swap.

    Returns the subsequent errors ``||p^i - p^{i-1}||`` per field.
    """
    g_new = update_g_terms(problem, params, state.current, state.g_current)
    fields = problem.fields() if order is None else list(order)
    if sorted(fields) != sorted(problem.fields()):
        raise ValueError("solve order must be a permutation of the problem fields")
    if executor is None:
        results = {f: _solve_field(problem, params, state, g_new, *f) for f in fields}
    else:
        futures = {f: executor.submit(_solve_field, problem, params, state, g_new, *f) for f in fields}
        results = {f: fut.result() for f, fut in futures.items()}

    errors = {}
    new = {}
    for f in problem.fields():
        x, its = results[f]
        new[f] = x
        errors[f] = field_norm(problem, params, f[1], x - state.current[f])
        state.linear_solves += 1
        state.linear_iterations += its
        state.diagnostics.append((state.step, state.iteration + 1, f[0], f[1], errors[f], its))
    state.previous, state.current = state.current, new
    state.g_previous, state.g_current = state.g_current, g_new
    state.iteration += 1
    state.subsequent_errors.append(errors)
    return errors


@dataclass
class StepResult:
    fields: dict
    iterations: int
    converged: bool
    subsequent_errors: list


def run_time_step(state: IterationState, problem: Problem, params: SolverParams,
                  executor: Executor | None = None) -> StepResult:
    """Iterate until every field's subsequent error is below ``eps_s``."""
    converged = False
    while state.iteration < params.max_iters:
        errors = ldd_iteration(state, problem, params, executor)
        if all(e < params.eps_s for e in errors.values()):
            converged = True
            break
    if not converged:
        log.warning("step %d: no convergence within %d iterations (last errors %s)",
                    state.step, params.max_iters,
                    {f"{p}{l}": f"{e:.2e}" for (p, l), e in state.subsequent_errors[-1].items()})
    return StepResult(state.current, state.iteration, converged, state.subsequent_errors)


@dataclass
class StepRecord:
    step: int
    time: float
    iterations: int
    converged: bool
    rel_errors: dict
    subsequent_errors: list


@dataclass
class RunReport:
    """Per-step outcome of a simulation."""

    fields: list
    steps: list = field(default_factory=list)
    final_fields: dict = field(default_factory=dict)
    linear_solves: int = 0
    linear_iterations: int = 0
    wall_time: float = 0.0
    diagnostics: list = field(default_factory=list)

    @property
    def all_converged(self) -> bool:
        return all(s.converged for s in self.steps)

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.steps)


def relative_error(space: SubdomainSpace, values: np.ndarray, exact: Callable) -> float:
    """``||p_h - p_e|| / ||p_e||``; the absolute error when ``p_e`` vanishes."""
    err = l2_error(space, values, exact)
    ref = l2_error(space, np.zeros_like(values), exact)
    return err / ref if ref > 1e-14 else err


def default_threads(problem: Problem) -> int:
    import os
    return max(1, min(len(problem.fields()), os.cpu_count() or 1))


def run_simulation(problem: Problem, params: SolverParams, initial: Mapping[Field, np.ndarray],
                   exact: Callable | None = None, t0: float = 0.0,
                   keep_subsequent: bool = True) -> RunReport:
    """Backward-Euler time loop driving one LDD solve per step.

    ``exact(phase, l, t)`` (optional) returns the reference pressure used for
    relative errors.
    """
    report = RunReport(fields=problem.fields(), final_fields=dict(initial))
    fields = dict(initial)
    executor = ThreadPoolExecutor(params.threads) if params.threads > 1 else None
    start = _time.perf_counter()
    try:
        for n in range(1, params.steps + 1):
            t = t0 + n * params.tau
            state = init_time_step(problem, params, fields, n, t)
            result = run_time_step(state, problem, params, executor)
            fields = result.fields
            rel = {}
            if exact is not None:
                for phase, l in problem.fields():
                    rel[(phase, l)] = relative_error(problem.spaces[l], fields[(phase, l)],
                                                     exact(phase, l, t))
            report.steps.append(StepRecord(n, t, result.iterations, result.converged, rel,
                                           result.subsequent_errors if keep_subsequent else []))
            report.linear_solves += state.linear_solves
            report.linear_iterations += state.linear_iterations
            if keep_subsequent:
                report.diagnostics.extend(state.diagnostics)
    finally:
        if executor is not None:
            executor.shutdown()
    report.wall_time = _time.perf_counter() - start
    report.final_fields = fields
    return report


# -- parameter conditions ------------------------------------------------------

@dataclass(frozen=True)
class SubdomainConstants:
    model: Model
    porosity: float
    constants: ConstantsReport


@dataclass
class ConditionReport:
    """Sufficient convergence conditions evaluated per subdomain.

    ``parameter_margins`` are the L-weight conditions, ``time_margins`` the
    same with the time-step penalty subtracted (``None`` when the mobility
    floor or ``M`` is unavailable), ``tau_max`` the explicit bound.
    """

    parameter_margins: dict
    time_margins: dict
    tau_bounds: dict
    tau_max: Optional[float]
    tau: float

    @property
    def parameters_satisfied(self) -> bool:
        return all(m > 0 for m in self.parameter_margins.values())

    @property
    def satisfied(self) -> bool:
        return (self.parameters_satisfied
                and all(m is not None and m > 0 for m in self.time_margins.values()))

    def lines(self) -> list[str]:
        out = []
        for l, m in sorted(self.parameter_margins.items()):
            status = "ok" if m > 0 else "VIOLATED"
            out.append(f"subdomain {l}: L-weight margin {m:.6g} {status}")
        for l, m in sorted(self.time_margins.items()):
            if m is None:
                out.append(f"subdomain {l}: time-step margin unavailable")
            else:
                out.append(f"subdomain {l}: time-step margin {m:.6g} {'ok' if m > 0 else 'VIOLATED'}")
        out.append("tau_max: unavailable" if self.tau_max is None
                   else f"tau_max: {self.tau_max:.6g} (tau = {self.tau:g})")
        out.append(f"overall: {'satisfied' if self.satisfied else 'VIOLATED'}")
        return out


def check_conditions(params: SolverParams, subdomains: Mapping[int, SubdomainConstants],
                     M_estimate: float | None = None) -> ConditionReport:
    """Evaluate the sufficient conditions on ``L``, ``tau`` and the constitutive constants.

    For a Richards subdomain the margin is ``1/(L_S phi) - 1/(2 L_w)``; a
    two-phase subdomain subtracts ``1/(2 L_alpha)`` for both phases. The
    time-step penalty is ``tau sum_alpha L_k_alpha^2 M^2 / (2 m phi^2)``.
    """
    M = M_estimate if M_estimate is not None else params.M_estimate
    margins, time_margins, bounds = {}, {}, {}
    for l, sc in subdomains.items():
        c = sc.constants
        phases = ("w",) if sc.model is Model.RICHARDS else ("w", "nw")
        margin = 1.0 / (c.L_S * sc.porosity) - sum(1.0 / (2.0 * params.L_of(a, l)) for a in phases)
        margins[l] = margin
        m = c.m_w if sc.model is Model.RICHARDS else min(c.m_w, c.m_nw)
        lk = {"w": c.L_kw, "nw": c.L_knw}
        if M is None or m <= 0.0:
            time_margins[l] = None
            bounds[l] = None
            continue
        penalty = sum(lk[a] ** 2 * M ** 2 / (2.0 * m * sc.porosity ** 2) for a in phases)
        time_margins[l] = margin - params.tau * penalty
        bounds[l] = margin / penalty if penalty > 0 else np.inf
    available = [b for b in bounds.values() if b is not None]
    tau_max = min(available) if available and len(available) == len(bounds) else None
    return ConditionReport(margins, time_margins, bounds, tau_max, params.tau)


def subdomain_constants(materials: Mapping[int, MaterialParams],
                        curves: Mapping[int, PowerLawCurves], models: Mapping[int, Model],
                        s_range=(0.05, 1.0)) -> dict:
    """Sampled constants per subdomain, raised to the analytic bounds where those are larger."""
    out = {}
    for l, model in models.items():
        mat, cur = materials[l], curves[l]
        c = constants_report(mat, cur, s_range)
        declared = {phase: mat.permeability * cur.lipschitz_rel_perm(phase) / mat.fluids[phase].viscosity
                    for phase in ("w", "nw")}
        c = dataclasses.replace(
            c, L_S=max(c.L_S, cur.lipschitz_saturation),
            L_kw=max(c.L_kw, declared["w"]) if np.isfinite(declared["w"]) else c.L_kw,
            L_knw=max(c.L_knw, declared["nw"]) if np.isfinite(declared["nw"]) else c.L_knw)
        out[l] = SubdomainConstants(model, mat.porosity, c)
    return out


__all__ = [
    "SolverParams", "Problem", "IterationState", "init_time_step", "update_g_terms",
    "ldd_iteration", "run_time_step", "run_simulation", "RunReport", "StepRecord",
    "ConditionReport", "SubdomainConstants", "check_conditions", "subdomain_constants",
    "relative_error",
]
