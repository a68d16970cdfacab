"""P1 finite elements on subdomain meshes.

Assembly of the per-iteration subdomain systems, facet-wise flux
reconstruction into DG1 interface traces, nodal projection of those traces
back to P1, and L2 norms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp

from .constitutive import MaterialParams, PowerLawCurves, mobility
from .geometry import Model, MultiDomainMesh, TraceMap, interface_trace_map
from .linalg import SparseMatrix

# Symmetric Gauss rules on the reference triangle (Dunavant), barycentric
# points and weights summing to one.
_A4, _B4 = 0.445948490915965, 0.091576213509771
_D6 = (0.053145049844817, 0.310352451033784, 0.636502499121399)
TRIANGLE_RULES = {
    4: (
        np.array([[1 - 2 * _A4, _A4, _A4], [_A4, 1 - 2 * _A4, _A4], [_A4, _A4, 1 - 2 * _A4],
                  [1 - 2 * _B4, _B4, _B4], [_B4, 1 - 2 * _B4, _B4], [_B4, _B4, 1 - 2 * _B4]]),
        np.array([0.223381589678011] * 3 + [0.109951743655322] * 3),
    ),
    6: (
        np.array(
            [[0.501426509658179, 0.249286745170910, 0.249286745170910],
             [0.249286745170910, 0.501426509658179, 0.249286745170910],
             [0.249286745170910, 0.249286745170910, 0.501426509658179],
             [0.873821971016996, 0.063089014491502, 0.063089014491502],
             [0.063089014491502, 0.873821971016996, 0.063089014491502],
             [0.063089014491502, 0.063089014491502, 0.873821971016996]]
            + [[_D6[i], _D6[j], _D6[k]] for i, j, k in
               ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))]),
        np.array([0.116786275726379] * 3 + [0.050844906370207] * 3 + [0.082851075618374] * 6),
    ),
}


@dataclass(frozen=True)
class TraceFieldDG1:
    """Facet-endpoint values on the interface ``(l, k)``, shape ``(m, 2)``."""

    l: int
    k: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ValueError("DG1 trace needs two values per facet")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class AssembledSystem:
    """Subdomain system before Dirichlet constraints are applied."""

    matrix: SparseMatrix
    rhs: np.ndarray
    dirichlet_dofs: np.ndarray
    dirichlet_values: np.ndarray

    def constrained(self) -> tuple[SparseMatrix, np.ndarray]:
        """Symmetric elimination of the Dirichlet dofs.

        Constrained rows and columns are zeroed and the diagonal set to the
        mean diagonal of the free rows, so that a relative residual test on
        the whole system is not dominated by the boundary rows.
        """
        A = self.matrix
        n = A.shape[0]
        fixed = np.zeros(n, dtype=bool)
        fixed[self.dirichlet_dofs] = True
        if not fixed.any():
            return A, self.rhs.copy()
        diag = A.diagonal()
        scale = float(np.mean(np.abs(diag[~fixed]))) if (~fixed).any() else 1.0
        xd = np.zeros(n)
        xd[self.dirichlet_dofs] = self.dirichlet_values
        b = self.rhs - A @ xd
        b[fixed] = scale * xd[fixed]
        rows = np.repeat(np.arange(n), np.diff(A.indptr))
        data = A.data.copy()
        data[fixed[rows] | fixed[A.indices]] = 0.0
        data[fixed[rows] & (rows == A.indices)] = scale
        return SparseMatrix(A.indptr, A.indices, data, A.shape), b


class SubdomainSpace:
    """P1 space on one submesh with precomputed geometry and sparsity pattern."""

    def __init__(self, mesh: MultiDomainMesh, l: int, quad_degree: int = 4):
        sub = mesh.submeshes[l]
        self.id = l
        self.model = sub.model
        self.points = sub.points
        self.cells = sub.cells
        self.n = sub.n_dofs
        self.boundary_dofs = sub.boundary_dofs
        self.h = sub.h
        P = self.points[self.cells]
        e1, e2 = P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        self.area = 0.5 * np.abs(det)
        # gradients of the three hat functions per cell
        inv = np.empty((len(det), 2, 2))
        inv[:, 0, 0], inv[:, 0, 1] = e2[:, 1] / det, -e2[:, 0] / det
        inv[:, 1, 0], inv[:, 1, 1] = -e1[:, 1] / det, e1[:, 0] / det
        ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        self.grads = np.einsum("ij,cjk->cik", ref, inv)

        self.set_quadrature(quad_degree)

        n, nc = self.n, len(self.cells)
        rows = np.repeat(self.cells, 3, axis=1).ravel()
        cols = np.tile(self.cells, (1, 3)).ravel()
        keys = rows * n + cols
        uniq, self._scatter = np.unique(keys, return_inverse=True)
        self._pat_rows = uniq // n
        self._pat_cols = uniq % n
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(self._pat_rows, minlength=n))])
        self.nnz = len(uniq)

        local_mass = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
        self._mass_data = self._scatter_local(self.area[:, None, None] * local_mass)
        self._stiff_unit = np.einsum("cik,cjk->cij", self.grads, self.grads) * self.area[:, None, None]
        self.mass = self.matrix(self._mass_data)

        self.neighbours = tuple(mesh.partition.neighbours[l])
        self.traces: dict[int, TraceMap] = {k: interface_trace_map(mesh, l, k) for k in self.neighbours}
        self._facet_mass_data: dict[int, np.ndarray] = {}
        self.facet_mass: dict[int, SparseMatrix] = {}
        for k, tm in self.traces.items():
            loc = (tm.lengths / 6.0)[:, None, None] * np.array([[2.0, 1.0], [1.0, 2.0]])
            r = np.repeat(tm.local_dofs, 2, axis=1).ravel()
            c = np.tile(tm.local_dofs, (1, 2)).ravel()
            pos = np.searchsorted(uniq, r * n + c)
            if not np.array_equal(uniq[pos], r * n + c):
                raise ValueError("interface facet is not an edge of the submesh")
            self._facet_mass_data[k] = np.bincount(pos, weights=loc.ravel(), minlength=self.nnz)
            self.facet_mass[k] = self.matrix(self._facet_mass_data[k])

    # -- helpers ----------------------------------------------------------
    def set_quadrature(self, degree: int) -> None:
        bary, w = TRIANGLE_RULES[degree]
        self.quad_degree = degree
        self._bary = bary
        self.qpoints = np.einsum("qi,cik->cqk", bary, self.points[self.cells])
        self.qweights = self.area[:, None] * w[None, :]

    def _scatter_local(self, local: np.ndarray) -> np.ndarray:
        return np.bincount(self._scatter, weights=local.ravel(), minlength=self.nnz)

    def matrix(self, data: np.ndarray) -> SparseMatrix:
        return SparseMatrix(self.indptr, self._pat_cols, data, (self.n, self.n))

    def at_quadrature(self, values: np.ndarray) -> np.ndarray:
        return values[self.cells] @ self._bary.T

    def load(self, fq: np.ndarray) -> np.ndarray:
        """``<f, phi_i>`` for ``f`` sampled at quadrature points."""
        local = (self.qweights * fq) @ self._bary
        return np.bincount(self.cells.ravel(), weights=local.ravel(), minlength=self.n)

    def cell_gradients(self, values: np.ndarray) -> np.ndarray:
        return np.einsum("ci,cik->ck", values[self.cells], self.grads)

    def saturation_at_quadrature(self, curves: PowerLawCurves, p_w, p_nw=None):
        pc = -self.at_quadrature(p_w)
        if p_nw is not None:
            pc = pc + self.at_quadrature(p_nw)
        return curves.saturation(pc)

    def stiffness(self, k_cell: np.ndarray) -> SparseMatrix:
        return self.matrix(self._scatter_local(k_cell[:, None, None] * self._stiff_unit))

    def interpolate(self, fn: Callable) -> np.ndarray:
        return np.asarray(fn(self.points[:, 0], self.points[:, 1]), dtype=float) * np.ones(self.n)


def _saturation_fields(space: SubdomainSpace, fields: Mapping[str, np.ndarray]):
    return fields["w"], (fields.get("nw") if space.model is Model.TWO_PHASE else None)


def assemble_subdomain_system(
    space: SubdomainSpace,
    phase: str,
    prev_iterate: Mapping[str, np.ndarray],
    prev_time: Mapping[str, np.ndarray],
    g_terms: Mapping[int, TraceFieldDG1],
    params: MaterialParams,
    curves: PowerLawCurves,
    L: float,
    lam: Mapping[int, float],
    tau: float,
    source: Callable | None = None,
    dirichlet_values: np.ndarray | None = None,
    gravity_gradient: np.ndarray | None = None,
) -> AssembledSystem:
    """Assemble one linearised subdomain problem for ``phase``.

    Left-hand side ``L M + tau K(k^{i-1}) + tau sum_k lam_k M_Gamma_k``;
    right-hand side ``L M p^{i-1} -+ <phi (S^{i-1} - S^{n-1}), .>
    + tau <f, .> - tau <k^{i-1} grad z, grad .> - tau sum_k M_Gamma_k Pi g_k``,
    with the minus sign on the saturation increment for the wetting phase.
    """
    if phase == "nw" and space.model is not Model.TWO_PHASE:
        raise ValueError(f"subdomain {space.id} has no nonwetting equation")
    missing = [k for k in space.neighbours if k not in g_terms]
    if missing:
        raise KeyError(f"subdomain {space.id}: missing g-term buffer for neighbours {missing}")

    pw_i, pnw_i = _saturation_fields(space, prev_iterate)
    pw_n, pnw_n = _saturation_fields(space, prev_time)
    s_iter = space.saturation_at_quadrature(curves, pw_i, pnw_i)
    s_prev = space.saturation_at_quadrature(curves, pw_n, pnw_n)
    k_q = mobility(params, curves, phase, s_iter)
    k_cell = np.einsum("cq,cq->c", space.qweights, k_q)      # integral of k over each cell

    data = L * space._mass_data
    data = data + tau * space._scatter_local(
        (k_cell / space.area)[:, None, None] * space._stiff_unit)
    for k in space.neighbours:
        data = data + (tau * lam[k]) * space._facet_mass_data[k]
    A = space.matrix(data)

    p_prev = prev_iterate[phase]
    sign = -1.0 if phase == "w" else 1.0
    rhs = L * (space.mass @ p_prev)
    rhs += sign * space.load(params.porosity * (s_iter - s_prev))
    if source is not None:
        rhs += tau * space.load(source(space.qpoints[..., 0], space.qpoints[..., 1]))
    if gravity_gradient is not None and np.any(gravity_gradient):
        flux = k_cell[:, None] * gravity_gradient[None, :]
        local = np.einsum("ck,cik->ci", flux, space.grads)
        rhs -= tau * np.bincount(space.cells.ravel(), weights=local.ravel(), minlength=space.n)
    for k in space.neighbours:
        rhs -= tau * (space.facet_mass[k] @ project_trace(space, g_terms[k]))

    if dirichlet_values is None:
        dofs = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0)
    else:
        dofs = space.boundary_dofs
        vals = np.asarray(dirichlet_values, dtype=float)
        if vals.shape != dofs.shape:
            raise ValueError("one Dirichlet value per boundary dof expected")
    return AssembledSystem(A, rhs, dofs, vals)


def reconstruct_interface_flux(
    space: SubdomainSpace,
    k: int,
    p: np.ndarray,
    saturation_fields: Mapping[str, np.ndarray],
    params: MaterialParams,
    curves: PowerLawCurves,
    phase: str,
    gravity_gradient: np.ndarray | None = None,
) -> TraceFieldDG1:
    """Normal flux ``-k(S) (grad p + grad z) . n_lk`` at facet endpoints.

    The gradient is the constant gradient of the subdomain's own cell
    adjacent to each facet; the mobility is evaluated from the saturation at
    each endpoint.
    """
    if k not in space.traces:
        raise ValueError(f"subdomain {k} is not a neighbour of {space.id}")
    tm = space.traces[k]
    if len(tm.local_cells) and tm.local_cells.min() < 0:
        raise ValueError("interface facet without adjacent cell")
    pw, pnw = _saturation_fields(space, saturation_fields)
    pc = -pw[tm.local_dofs]
    if pnw is not None:
        pc = pc + pnw[tm.local_dofs]
    kmob = mobility(params, curves, phase, curves.saturation(pc))
    grad = np.einsum("ci,cik->ck", p[space.cells[tm.local_cells]], space.grads[tm.local_cells])
    if gravity_gradient is not None:
        grad = grad + gravity_gradient[None, :]
    flux_n = np.einsum("fk,fk->f", grad, tm.normals)
    return TraceFieldDG1(space.id, k, -kmob * flux_n[:, None])


def trace_values(space: SubdomainSpace, k: int, p: np.ndarray) -> np.ndarray:
    """P1 field restricted to the facet endpoints of ``Gamma_lk``, shape ``(m, 2)``."""
    return p[space.traces[k].local_dofs]


def project_trace(space: SubdomainSpace, g: TraceFieldDG1) -> np.ndarray:
    """Nodal average of DG1 endpoint values, returned as a full P1 vector.

    Entries away from the interface are zero.
    """
    tm = space.traces[g.k]
    idx = tm.local_dofs.ravel()
    sums = np.bincount(idx, weights=g.values.ravel(), minlength=space.n)
    counts = np.bincount(idx, minlength=space.n)
    out = np.zeros(space.n)
    hit = counts > 0
    out[hit] = sums[hit] / counts[hit]
    return out


def l2_norm(space: SubdomainSpace, values: np.ndarray) -> float:
    u = space.at_quadrature(values)
    return float(np.sqrt(np.sum(space.qweights * u * u)))


def l2_error(space: SubdomainSpace, values: np.ndarray, exact: Callable) -> float:
    u = space.at_quadrature(values) - exact(space.qpoints[..., 0], space.qpoints[..., 1])
    return float(np.sqrt(np.sum(space.qweights * u * u)))


def interface_l2_norm(space: SubdomainSpace, k: int, endpoint_values: np.ndarray) -> float:
    """L2(Gamma_lk) norm of a facet-wise linear function given at facet endpoints."""
    tm = space.traces[k]
    a, b = endpoint_values[:, 0], endpoint_values[:, 1]
    return float(np.sqrt(np.sum(tm.lengths * (a * a + a * b + b * b) / 3.0)))


def dump_matrix(A: SparseMatrix, path) -> None:
    """Coordinate text dump ``row col value``, one entry per line."""
    coo = sp.coo_matrix(A.scipy())
    with open(path, "w") as fh:
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {float(v)!r}\n")
