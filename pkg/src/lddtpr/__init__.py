"""Hybrid two-phase/Richards flow on partitioned domains with a linearised
domain-decomposition solver and a manufactured-solution verification harness."""

from .constitutive import Fluid, MaterialParams, PowerLawCurves, constants_report, mobility, saturation
from .geometry import Model, build_partition, interface_trace_map, triangulate
from .ldd import (Problem, RunReport, SolverParams, check_conditions, init_time_step,
                  ldd_iteration, run_simulation, run_time_step)
from .verify import Scenario, emit_report, exact_pressure, preset, run_scenario, source_term

__version__ = "0.1.0"
