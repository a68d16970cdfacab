"""Partitioned polygonal domains, matching triangular submeshes and interfaces.

Subdomains are simple polygons tagged with the flow model they carry. The
mesher builds a conforming global triangulation from a rectilinear tensor
grid whose lines pass through every polygon vertex, so each interface lies
on mesh edges and submeshes share vertices bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np
import shapely
from shapely.geometry import Polygon
from shapely.ops import unary_union


class Model(str, Enum):
    RICHARDS = "richards"
    TWO_PHASE = "two-phase"


class GeometryError(ValueError):
    """Invalid partition: overlap, gap, degenerate or non-simple polygon."""


class MeshResolutionError(ValueError):
    """Requested resolution is too coarse to resolve the partition."""


_AREA_RTOL = 1e-12


@dataclass(frozen=True)
class Subdomain:
    id: int
    polygon: np.ndarray
    model: Model

    @property
    def area(self) -> float:
        return Polygon(self.polygon).area


@dataclass(frozen=True)
class Partition:
    subdomains: tuple[Subdomain, ...]
    global_polygon: np.ndarray
    neighbours: Mapping[int, tuple[int, ...]]

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(s.id for s in self.subdomains)

    @property
    def richards_ids(self) -> tuple[int, ...]:
        return tuple(s.id for s in self.subdomains if s.model is Model.RICHARDS)

    @property
    def two_phase_ids(self) -> tuple[int, ...]:
        return tuple(s.id for s in self.subdomains if s.model is Model.TWO_PHASE)

    def subdomain(self, l: int) -> Subdomain:
        for s in self.subdomains:
            if s.id == l:
                return s
        raise KeyError(f"no subdomain {l}")

    def model(self, l: int) -> Model:
        return self.subdomain(l).model

    def interfaces(self) -> list[tuple[int, int]]:
        """Unordered interface pairs as ``(l, k)`` with ``l < k``."""
        return sorted({(min(l, k), max(l, k)) for l, ks in self.neighbours.items() for k in ks})


# -- named geometries ---------------------------------------------------------

def _rect(x0, y0, x1, y1):
    return [[x0, y0], [x1, y0], [x1, y1], [x0, y1]]


def two_domain_descriptor(top: str = "richards", bottom: str = "two-phase") -> dict:
    return {
        "subdomains": [
            {"id": 1, "polygon": _rect(0.0, 0.0, 1.0, 1.0), "model": top},
            {"id": 2, "polygon": _rect(0.0, -1.0, 1.0, 0.0), "model": bottom},
        ]
    }


def five_domain_descriptor() -> dict:
    left = [[0.0, -1.0], [0.5, -1.0], [0.5, -0.75], [0.25, -0.75],
            [0.25, -0.25], [0.5, -0.25], [0.5, 0.0], [0.0, 0.0]]
    right = [[0.5, -1.0], [1.0, -1.0], [1.0, 0.0], [0.5, 0.0],
             [0.5, -0.25], [0.75, -0.25], [0.75, -0.75], [0.5, -0.75]]
    return {
        "subdomains": [
            {"id": 1, "polygon": _rect(0.0, 0.0, 0.5, 1.0), "model": "richards"},
            {"id": 2, "polygon": left, "model": "two-phase"},
            {"id": 3, "polygon": _rect(0.25, -0.75, 0.75, -0.25), "model": "two-phase"},
            {"id": 4, "polygon": right, "model": "two-phase"},
            {"id": 5, "polygon": _rect(0.5, 0.0, 1.0, 1.0), "model": "richards"},
        ]
    }


NAMED_GEOMETRIES = {
    "two-domain": two_domain_descriptor,
    "two-domain-tptp": lambda: two_domain_descriptor("two-phase", "two-phase"),
    "five-domain": five_domain_descriptor,
    "unit-square": lambda: {
        "subdomains": [{"id": 1, "polygon": _rect(0.0, 0.0, 1.0, 1.0), "model": "richards"}]
    },
}


def build_partition(descriptor: str | Mapping) -> Partition:
    """Validate a geometry descriptor and compute the neighbour sets.

    ``descriptor`` is either a name from :data:`NAMED_GEOMETRIES` or a mapping
    with a ``subdomains`` list (``id``, ``polygon``, ``model``) and an optional
    ``global_polygon``. Raises :class:`GeometryError` on overlaps, gaps or
    degenerate polygons.
    """
    if isinstance(descriptor, str):
        try:
            descriptor = NAMED_GEOMETRIES[descriptor]()
        except KeyError:
            raise GeometryError(f"unknown geometry {descriptor!r}") from None

    entries = descriptor.get("subdomains") or []
    if not entries:
        raise GeometryError("partition has no subdomains")

    subdomains = []
    shapes = {}
    for entry in entries:
        l = int(entry["id"])
        if l in shapes:
            raise GeometryError(f"duplicate subdomain id {l}")
        coords = np.asarray(entry["polygon"], dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2 or len(coords) < 3:
            raise GeometryError(f"subdomain {l}: polygon needs >= 3 vertices in 2D")
        poly = Polygon(coords)
        if not poly.is_valid or not poly.exterior.is_simple:
            raise GeometryError(f"subdomain {l}: polygon is not simple")
        if poly.area <= 0.0:
            raise GeometryError(f"subdomain {l}: empty interior")
        try:
            model = Model(entry["model"])
        except (KeyError, ValueError):
            raise GeometryError(f"subdomain {l}: model must be one of "
                                f"{[m.value for m in Model]}") from None
        # store counter-clockwise
        if not poly.exterior.is_ccw:
            coords = coords[::-1].copy()
        subdomains.append(Subdomain(l, coords, model))
        shapes[l] = Polygon(coords)

    ids = sorted(shapes)
    total = sum(p.area for p in shapes.values())
    for a_pos, a in enumerate(ids):
        for b in ids[a_pos + 1:]:
            if shapes[a].intersection(shapes[b]).area > _AREA_RTOL * total:
                raise GeometryError(f"subdomains {a} and {b} overlap")

    union = unary_union(list(shapes.values()))
    if "global_polygon" in descriptor:
        glob = Polygon(np.asarray(descriptor["global_polygon"], dtype=float))
        if glob.symmetric_difference(union).area > 1e-10 * glob.area:
            raise GeometryError("subdomains do not cover the global polygon")
    else:
        if union.geom_type != "Polygon" or len(union.interiors) > 0:
            raise GeometryError("gap in coverage: union of subdomains is not a simple polygon")
        glob = union
    global_coords = np.asarray(shapely.normalize(glob).exterior.coords, dtype=float)[:-1]

    neighbours: dict[int, list[int]] = {l: [] for l in ids}
    for a_pos, a in enumerate(ids):
        for b in ids[a_pos + 1:]:
            shared = shapes[a].boundary.intersection(shapes[b].boundary)
            if shared.length > 1e-12:
                neighbours[a].append(b)
                neighbours[b].append(a)

    subdomains.sort(key=lambda s: s.id)
    return Partition(tuple(subdomains), global_coords,
                     {l: tuple(sorted(ks)) for l, ks in neighbours.items()})


# -- meshes -------------------------------------------------------------------

@dataclass(frozen=True)
class Submesh:
    """Cells of one subdomain, referencing global vertex coordinates."""

    id: int
    model: Model
    vertex_ids: np.ndarray       # local dof -> global vertex
    cells: np.ndarray            # (n_cells, 3) local dofs, counter-clockwise
    global_cells: np.ndarray     # indices into MultiDomainMesh.cells
    points: np.ndarray           # (n_dofs, 2), copies of global coordinates
    boundary_dofs: np.ndarray    # local dofs on the outer boundary
    h: float

    @property
    def n_dofs(self) -> int:
        return len(self.vertex_ids)


@dataclass(frozen=True)
class Interface:
    """Facets shared by subdomains ``l < k``; normals point from ``l`` into ``k``."""

    l: int
    k: int
    facets: np.ndarray           # (m, 2) global vertex ids
    normals: np.ndarray          # (m, 2) n_lk
    cells_l: np.ndarray          # (m,) local cell index in submesh l
    cells_k: np.ndarray          # (m,) local cell index in submesh k
    lengths: np.ndarray


@dataclass(frozen=True)
class TraceMap:
    """Facet-wise correspondence between the traces of ``l`` and ``k``.

    Records are aligned with the facet order of the shared interface, so a
    DG1 trace field indexed ``[facet, endpoint]`` has the same layout on both
    sides.
    """

    l: int
    k: int
    local_dofs: np.ndarray       # (m, 2) dofs of submesh l at facet endpoints
    neighbour_dofs: np.ndarray   # (m, 2) dofs of submesh k at the same endpoints
    local_cells: np.ndarray      # (m,) cell of submesh l owning each facet
    normals: np.ndarray          # (m, 2) n_lk
    lengths: np.ndarray

    @property
    def n_facets(self) -> int:
        return len(self.lengths)

    def vertex_dofs(self) -> np.ndarray:
        return np.unique(self.local_dofs)


@dataclass(frozen=True)
class MultiDomainMesh:
    partition: Partition
    vertices: np.ndarray
    cells: np.ndarray
    cell_subdomain: np.ndarray
    submeshes: Mapping[int, Submesh]
    interfaces: Mapping[tuple[int, int], Interface]
    resolution: int
    _global_to_local: Mapping[int, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def h(self) -> float:
        return max(s.h for s in self.submeshes.values())

    def local_dofs(self, l: int, global_ids: np.ndarray) -> np.ndarray:
        out = self._global_to_local[l][global_ids]
        if np.any(out < 0):
            raise ValueError(f"vertex not in submesh {l}")
        return out

    def interface(self, l: int, k: int) -> Interface:
        return self.interfaces[(min(l, k), max(l, k))]


def _breakpoints(values: Iterable[float], resolution: int) -> np.ndarray:
    bps = np.unique(np.asarray(list(values), dtype=float))
    target = 1.0 / resolution
    pieces = []
    for a, b in zip(bps[:-1], bps[1:]):
        if b - a < target * (1.0 - 1e-9):
            raise MeshResolutionError(
                f"polygon feature of length {b - a:g} is shorter than the target "
                f"edge length {target:g}; increase the resolution")
        n = int(np.ceil((b - a) * resolution - 1e-9))
        seg = np.linspace(a, b, n + 1)
        seg[0], seg[-1] = a, b
        pieces.append(seg[:-1])
    pieces.append(bps[-1:])
    return np.concatenate(pieces)


def _circumdiameter(p: np.ndarray) -> np.ndarray:
    a = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    b = np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    return a * b * c / (2.0 * area)


def triangulate(partition: Partition, resolution: int) -> MultiDomainMesh:
    """Mesh the partition conformingly with target edge length ``1/resolution``.

    All polygon edges must be axis-parallel. The rectangle cells of the
    tensor grid are split along their rising diagonal; ``resolution = r``
    yields ``h = sqrt(2)/r`` on unit-length features.
    """
    if int(resolution) != resolution or resolution < 1:
        raise ValueError("resolution must be a positive integer")
    resolution = int(resolution)
    for s in partition.subdomains:
        edges = np.roll(s.polygon, -1, axis=0) - s.polygon
        if np.any((edges[:, 0] != 0.0) & (edges[:, 1] != 0.0)):
            raise GeometryError(f"subdomain {s.id}: only axis-parallel polygon edges are supported")

    all_pts = np.vstack([s.polygon for s in partition.subdomains])
    xs = _breakpoints(all_pts[:, 0], resolution)
    ys = _breakpoints(all_pts[:, 1], resolution)
    nx, ny = len(xs) - 1, len(ys) - 1

    cx = 0.5 * (xs[:-1] + xs[1:])
    cy = 0.5 * (ys[:-1] + ys[1:])
    CX, CY = np.meshgrid(cx, cy)                   # (ny, nx)
    owner = np.zeros(CX.shape, dtype=int)
    for s in partition.subdomains:
        inside = shapely.contains_xy(Polygon(s.polygon), CX, CY)
        owner[inside] = s.id

    vid = lambda i, j: j * (nx + 1) + i
    J, I = np.nonzero(owner)
    v00, v10, v11, v01 = vid(I, J), vid(I + 1, J), vid(I + 1, J + 1), vid(I, J + 1)
    tri = np.empty((2 * len(I), 3), dtype=np.int64)
    tri[0::2] = np.column_stack([v00, v10, v11])
    tri[1::2] = np.column_stack([v00, v11, v01])
    cell_sub = np.repeat(owner[J, I], 2)

    X, Y = np.meshgrid(xs, ys)
    grid_pts = np.column_stack([X.ravel(), Y.ravel()])
    used, cells = np.unique(tri, return_inverse=True)
    cells = cells.reshape(tri.shape)
    vertices = grid_pts[used]

    # global edges: boundary edges belong to one cell only
    edges = np.sort(np.concatenate([cells[:, [0, 1]], cells[:, [1, 2]], cells[:, [2, 0]]]), axis=1)
    edge_cell = np.tile(np.arange(len(cells)), 3)
    keys = edges[:, 0] * len(vertices) + edges[:, 1]
    order = np.argsort(keys, kind="stable")
    keys_s, edges_s, cells_s = keys[order], edges[order], edge_cell[order]
    uniq, start, counts = np.unique(keys_s, return_index=True, return_counts=True)
    boundary_edges = edges_s[start[counts == 1]]
    boundary_vertex = np.zeros(len(vertices), dtype=bool)
    boundary_vertex[boundary_edges.ravel()] = True
    boundary_edge_cells = cells_s[start[counts == 1]]

    submeshes: dict[int, Submesh] = {}
    g2l: dict[int, np.ndarray] = {}
    global_cell_to_local = np.full(len(cells), -1, dtype=np.int64)
    for s in partition.subdomains:
        gcells = np.nonzero(cell_sub == s.id)[0]
        if len(gcells) == 0:
            raise MeshResolutionError(f"subdomain {s.id} received no cells")
        global_cell_to_local[gcells] = np.arange(len(gcells))
        vids = np.unique(cells[gcells])
        lookup = np.full(len(vertices), -1, dtype=np.int64)
        lookup[vids] = np.arange(len(vids))
        local_cells = lookup[cells[gcells]]
        mine = cell_sub[boundary_edge_cells] == s.id
        bdofs = np.unique(lookup[boundary_edges[mine].ravel()])
        pts = vertices[vids].copy()
        submeshes[s.id] = Submesh(
            id=s.id, model=s.model, vertex_ids=vids, cells=local_cells, global_cells=gcells,
            points=pts, boundary_dofs=bdofs, h=float(_circumdiameter(pts[local_cells]).max()))
        g2l[s.id] = lookup

    # interior edges shared by cells of different subdomains
    pair = counts == 2
    e_pairs = edges_s[start[pair]]
    c_a = cells_s[start[pair]]
    c_b = cells_s[start[pair] + 1]
    s_a, s_b = cell_sub[c_a], cell_sub[c_b]
    cross = s_a != s_b
    interfaces: dict[tuple[int, int], Interface] = {}
    for l, k in partition.interfaces():
        sel = cross & (((s_a == l) & (s_b == k)) | ((s_a == k) & (s_b == l)))
        if not np.any(sel):
            raise MeshResolutionError(f"interface {l}-{k} not resolved by the mesh")
        fac = e_pairs[sel]
        cl = np.where(s_a[sel] == l, c_a[sel], c_b[sel])
        ck = np.where(s_a[sel] == l, c_b[sel], c_a[sel])
        mid = 0.5 * (vertices[fac[:, 0]] + vertices[fac[:, 1]])
        order = np.lexsort((mid[:, 1], mid[:, 0]))
        fac, cl, ck = fac[order], cl[order], ck[order]
        p0, p1 = vertices[fac[:, 0]], vertices[fac[:, 1]]
        tangent = p1 - p0
        lengths = np.linalg.norm(tangent, axis=1)
        normal = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / lengths[:, None]
        # third vertex of the l-side cell tells which way is outward
        tri_l = cells[cl]
        third = tri_l.sum(axis=1) - fac.sum(axis=1)
        inward = np.einsum("ij,ij->i", normal, vertices[third] - p0) > 0
        normal[inward] *= -1.0
        interfaces[(l, k)] = Interface(
            l=l, k=k, facets=fac, normals=normal,
            cells_l=global_cell_to_local[cl], cells_k=global_cell_to_local[ck], lengths=lengths)

    return MultiDomainMesh(partition=partition, vertices=vertices, cells=cells,
                           cell_subdomain=cell_sub, submeshes=submeshes,
                           interfaces=interfaces, resolution=resolution, _global_to_local=g2l)


def interface_trace_map(mesh: MultiDomainMesh, l: int, k: int) -> TraceMap:
    """Trace correspondence of interface ``Gamma_lk`` seen from subdomain ``l``."""
    if k not in mesh.partition.neighbours.get(l, ()):
        raise ValueError(f"subdomain {k} is not a neighbour of {l}")
    iface = mesh.interface(l, k)
    own_first = iface.l == l
    return TraceMap(
        l=l, k=k,
        local_dofs=mesh.local_dofs(l, iface.facets),
        neighbour_dofs=mesh.local_dofs(k, iface.facets),
        local_cells=iface.cells_l if own_first else iface.cells_k,
        normals=iface.normals if own_first else -iface.normals,
        lengths=iface.lengths,
    )


def write_mesh(mesh: MultiDomainMesh, path) -> None:
    """Plain-text dump: one record per line (vertex, cell, facet)."""
    with open(path, "w") as fh:
        fh.write(f"# vertices {len(mesh.vertices)} cells {len(mesh.cells)}\n")
        for i, (x, y) in enumerate(mesh.vertices):
            fh.write(f"vertex {i} {float(x)!r} {float(y)!r}\n")
        for c, (tri, sub) in enumerate(zip(mesh.cells, mesh.cell_subdomain)):
            fh.write(f"cell {c} {sub} {tri[0]} {tri[1]} {tri[2]}\n")
        for (l, k), iface in mesh.interfaces.items():
            for (a, b), (nx_, ny_) in zip(iface.facets, iface.normals):
                fh.write(f"facet {l} {k} {a} {b} {float(nx_)!r} {float(ny_)!r}\n")
