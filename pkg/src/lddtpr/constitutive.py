"""Material parameters and saturation/relative-permeability laws."""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

PHASES = ("w", "nw")

_clamp_lock = threading.Lock()
_clamp_events = 0


def clamp_events() -> int:
    """Number of saturation values clamped into [0, 1] so far."""
    return _clamp_events


def _clamp_unit(s):
    global _clamp_events
    s = np.asarray(s, dtype=float)
    bad = (s < 0.0) | (s > 1.0)
    if np.any(bad):
        with _clamp_lock:
            _clamp_events += int(np.count_nonzero(bad))
        s = np.clip(s, 0.0, 1.0)
    return s


@dataclass(frozen=True)
class Fluid:
    viscosity: float
    density: float


@dataclass(frozen=True)
class MaterialParams:
    """Per-subdomain soil data plus the two fluids and gravity magnitude."""

    porosity: float
    permeability: float
    fluids: dict
    gravity: float = 9.81

    def __post_init__(self):
        if not 0.0 < self.porosity < 1.0:
            raise ValueError(f"porosity must lie in (0, 1), got {self.porosity}")
        if self.permeability <= 0.0:
            raise ValueError("intrinsic permeability must be positive")
        for name, fl in self.fluids.items():
            if fl.viscosity <= 0.0 or fl.density <= 0.0:
                raise ValueError(f"fluid {name}: viscosity and density must be positive")
        if self.gravity < 0.0:
            raise ValueError("gravity magnitude must be nonnegative")

    def gravity_gradient(self, phase: str, enabled: bool = True) -> np.ndarray:
        """Gradient of ``z = rho g y``."""
        if not enabled:
            return np.zeros(2)
        return np.array([0.0, self.fluids[phase].density * self.gravity])


@dataclass(frozen=True)
class PowerLawCurves:
    """``k_w = s^a``, ``k_nw = (1-s)^b`` and ``S = (1+p_c)^(-1/c)`` for ``p_c >= 0``.

    Both relative permeabilities take the wetting saturation as argument.
    """

    kw_exponent: float
    knw_exponent: float
    s_exponent: float

    @classmethod
    def power(cls, n: float) -> "PowerLawCurves":
        return cls(n, n, n)

    def rel_perm_w(self, s):
        return _clamp_unit(s) ** self.kw_exponent

    def rel_perm_nw(self, s):
        return (1.0 - _clamp_unit(s)) ** self.knw_exponent

    def d_rel_perm_w(self, s):
        s = _clamp_unit(s)
        return self.kw_exponent * s ** (self.kw_exponent - 1.0)

    def d_rel_perm_nw(self, s):
        s = _clamp_unit(s)
        return -self.knw_exponent * (1.0 - s) ** (self.knw_exponent - 1.0)

    def saturation(self, pc):
        pc = np.asarray(pc, dtype=float)
        return np.where(pc >= 0.0, (1.0 + np.maximum(pc, 0.0)) ** (-1.0 / self.s_exponent), 1.0)

    def d_saturation(self, pc):
        pc = np.asarray(pc, dtype=float)
        c = self.s_exponent
        return np.where(pc >= 0.0, -(1.0 / c) * (1.0 + np.maximum(pc, 0.0)) ** (-1.0 / c - 1.0), 0.0)

    def capillary_pressure(self, s):
        """Inverse of :meth:`saturation` on ``(0, 1]``."""
        s = np.asarray(s, dtype=float)
        return s ** (-self.s_exponent) - 1.0

    # analytic Lipschitz bounds on [0, 1] / p_c >= 0
    @property
    def lipschitz_saturation(self) -> float:
        return 1.0 / self.s_exponent

    def lipschitz_rel_perm(self, phase: str) -> float:
        a = self.kw_exponent if phase == "w" else self.knw_exponent
        return float(a) if a >= 1.0 else np.inf


CURVE_FAMILIES = {"power"}


def curves_from_config(cfg) -> PowerLawCurves:
    """Build curves from ``{"family": "power", "exponent": n}`` or explicit exponents."""
    family = cfg.get("family", "power")
    if family not in CURVE_FAMILIES:
        raise ValueError(f"unknown curve family {family!r}")
    if "exponent" in cfg:
        return PowerLawCurves.power(float(cfg["exponent"]))
    return PowerLawCurves(float(cfg["kw_exponent"]), float(cfg["knw_exponent"]),
                          float(cfg["s_exponent"]))


def saturation(curves: PowerLawCurves, pc):
    return curves.saturation(pc)


def mobility(params: MaterialParams, curves: PowerLawCurves, phase: str, s):
    """``k_i k_alpha(s) / mu_alpha`` with ``s`` the wetting saturation."""
    kr = curves.rel_perm_w(s) if phase == "w" else curves.rel_perm_nw(s)
    return params.permeability * kr / params.fluids[phase].viscosity


def d_mobility(params: MaterialParams, curves: PowerLawCurves, phase: str, s):
    dkr = curves.d_rel_perm_w(s) if phase == "w" else curves.d_rel_perm_nw(s)
    return params.permeability * dkr / params.fluids[phase].viscosity


@dataclass(frozen=True)
class ConstantsReport:
    L_S: float
    L_kw: float
    L_knw: float
    m_floor: float
    m_floor_full: float
    s_range: tuple
    m_w: float = 0.0
    m_nw: float = 0.0


def constants_report(params: MaterialParams, curves: PowerLawCurves,
                     s_range=(0.05, 1.0), n: int = 20001) -> ConstantsReport:
    """Sampled Lipschitz constants and mobility floor over ``s_range``.

    ``L_S`` is the largest slope of ``S(p_c)`` over the capillary pressures
    mapping into ``s_range``; the mobility constants are slopes in ``s``.
    ``m_floor`` is the minimum of both mobilities over ``s_range``,
    ``m_floor_full`` the same over ``[0, 1]``; ``m_w`` and ``m_nw`` are the
    per-phase floors (a Richards subdomain only needs ``m_w``).
    """
    s_min, s_max = s_range
    if not 0.0 <= s_min < s_max <= 1.0:
        raise ValueError("need 0 <= s_min < s_max <= 1")
    s = np.linspace(s_min, s_max, n)

    def max_slope(x, y):
        return float(np.max(np.abs(np.diff(y) / np.diff(x))))

    pc_lo = float(curves.capillary_pressure(s_max))
    pc_hi = float(curves.capillary_pressure(max(s_min, 1e-6)))
    # geometric spacing resolves the steep end near p_c = pc_lo
    pc = pc_lo + np.expm1(np.linspace(0.0, np.log1p(pc_hi - pc_lo), n))
    pc = np.union1d(pc, np.linspace(pc_lo, min(pc_hi, pc_lo + 1.0), n))

    L_S = max_slope(pc, curves.saturation(pc))
    L_kw = max_slope(s, mobility(params, curves, "w", s))
    L_knw = max_slope(s, mobility(params, curves, "nw", s))
    m_w = float(mobility(params, curves, "w", s).min())
    m_nw = float(mobility(params, curves, "nw", s).min())
    m_floor = min(m_w, m_nw)
    full = np.linspace(0.0, 1.0, n)
    m_full = float(min(mobility(params, curves, "w", full).min(),
                       mobility(params, curves, "nw", full).min()))
    return ConstantsReport(L_S, L_kw, L_knw, m_floor, m_full, (s_min, s_max), m_w, m_nw)
