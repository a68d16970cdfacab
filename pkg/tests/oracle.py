"""Dense reference implementation of the two-domain iteration.

Works in global vertex numbering, finds the interface by coordinates and
assembles every subdomain system element by element into dense arrays. It
shares no assembly, trace-map or exchange code with the package, only the
constitutive laws and the closed-form data.
"""

import numpy as np

from lddtpr.verify import source_term

# degree-4 symmetric rule on the reference triangle (barycentric, weights sum to 1)
_A, _B = 0.445948490915965, 0.091576213509771
RULE_POINTS = np.array([[1 - 2 * _A, _A, _A], [_A, 1 - 2 * _A, _A], [_A, _A, 1 - 2 * _A],
                        [1 - 2 * _B, _B, _B], [_B, 1 - 2 * _B, _B], [_B, _B, 1 - 2 * _B]])
RULE_WEIGHTS = np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)


class TwoDomainOracle:
    def __init__(self, mesh, scenario, solver):
        self.mesh = mesh
        self.sc = scenario
        self.solver = solver
        self.V = mesh.vertices
        self.model_tags = {l: scenario.partition().model(l) for l in (1, 2)}
        self.models = {l: m.value for l, m in self.model_tags.items()}
        self.cells = {l: mesh.cells[mesh.cell_subdomain == l] for l in (1, 2)}
        self.dofs = {l: np.unique(self.cells[l]) for l in (1, 2)}
        # interface facets: edges on y = 0 owned by cells on both sides
        edges = {}
        for l in (1, 2):
            for ci, c in enumerate(self.cells[l]):
                for a, b in ((c[0], c[1]), (c[1], c[2]), (c[2], c[0])):
                    if self.V[a, 1] == 0.0 and self.V[b, 1] == 0.0:
                        edges.setdefault(tuple(sorted((a, b))), {})[l] = ci
        self.facets = [(e, owners) for e, owners in sorted(edges.items()) if len(owners) == 2]
        self.normal = {1: np.array([0.0, -1.0]), 2: np.array([0.0, 1.0])}
        self.boundary = {}
        for l in (1, 2):
            d = self.dofs[l]
            x, y = self.V[d, 0], self.V[d, 1]
            outer = (np.isclose(x, 0) | np.isclose(x, 1) | np.isclose(y, 1) | np.isclose(y, -1))
            self.boundary[l] = d[outer]

    # -- element quantities ------------------------------------------------
    def _grads(self, c):
        P = self.V[c]
        T = np.array([P[1] - P[0], P[2] - P[0]]).T          # columns: edge vectors
        area = 0.5 * abs(np.linalg.det(T))
        ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        return ref @ np.linalg.inv(T), area

    def fields(self, l):
        return ("w", "nw") if self.models[l] == "two-phase" else ("w",)

    def saturation(self, l, p, x_bary, c):
        pw = x_bary @ p[("w", l)][c]
        pnw = x_bary @ p[("nw", l)][c] if ("nw", l) in p else 0.0 * pw
        return self.sc.curves[l].saturation(pnw - pw)

    def mobility(self, l, phase, s):
        mat, cur = self.sc.materials[l], self.sc.curves[l]
        kr = cur.rel_perm_w(s) if phase == "w" else cur.rel_perm_nw(s)
        return mat.permeability * kr / mat.fluids[phase].viscosity

    def gravity(self, l, phase):
        return self.sc.materials[l].gravity_gradient(phase, self.solver.gravity_on)

    # -- Robin data -------------------------------------------------------
    def initial_g(self, p_prev):
        """Per (phase, l): dict facet -> {vertex: value}."""
        g = {}
        lam = self.solver.lam
        for l in (1, 2):
            k = 3 - l
            for phase in ("w", "nw"):
                if ("nw", l) not in p_prev and phase == "nw" and self.models[k] != "two-phase":
                    continue
                vals = {}
                for (a, b), owners in self.facets:
                    c = self.cells[l][owners[l]]
                    G, _ = self._grads(c)
                    entry = {}
                    for v in (a, b):
                        pw = p_prev[("w", l)][v]
                        pnw = p_prev[("nw", l)][v] if ("nw", l) in p_prev else 0.0
                        s = self.sc.curves[l].saturation(pnw - pw)
                        kk = self.mobility(l, phase, s)
                        if (phase, l) in p_prev:
                            grad = p_prev[(phase, l)][c] @ G + self.gravity(l, phase)
                            entry[v] = -kk * grad @ self.normal[l] - _lam(lam, phase) * p_prev[(phase, l)][v]
                        elif self.solver.gravity_on and self.solver.gravity_coupling == "include":
                            entry[v] = kk * self.gravity(l, phase) @ self.normal[l]
                        else:
                            entry[v] = 0.0
                    vals[(a, b)] = entry
                g[(phase, l)] = vals
        return g

    def update_g(self, p, g_prev):
        out = {}
        for (phase, l), vals in g_prev.items():
            k = 3 - l
            new = {}
            for facet, entry in vals.items():
                inc = g_prev[(phase, k)][facet]
                if phase == "nw" and self.models[l] == "two-phase" and self.models[k] == "richards":
                    new[facet] = {v: -inc[v] for v in entry}
                else:
                    pk = p[(phase, k)] if (phase, k) in p else np.zeros(len(self.V))
                    new[facet] = {v: -2 * _lam(self.solver.lam, phase) * pk[v] - inc[v] for v in entry}
            out[(phase, l)] = new
        return out

    # -- one subdomain solve ----------------------------------------------
    def solve_field(self, phase, l, p_iter, p_time, g, t):
        sv = self.solver
        N = len(self.V)
        A = np.zeros((N, N))
        b = np.zeros(N)
        L = sv.L_of(phase, l)
        tau = sv.tau
        mat = self.sc.materials[l]

        def src(x, y):
            return source_term(self.sc.solution, phase, l, self.model_tags[l], mat,
                               self.sc.curves[l], sv.gravity_on, x, y, t)
        sign = -1.0 if phase == "w" else 1.0
        for c in self.cells[l]:
            G, area = self._grads(c)
            Mloc = area / 12.0 * np.array([[2.0, 1, 1], [1, 2, 1], [1, 1, 2]])
            xq = RULE_POINTS @ self.V[c]
            wq = area * RULE_WEIGHTS
            s_i = self.saturation(l, p_iter, RULE_POINTS, c)
            s_n = self.saturation(l, p_time, RULE_POINTS, c)
            kint = np.sum(wq * self.mobility(l, phase, s_i))
            Kloc = kint * G @ G.T
            A[np.ix_(c, c)] += L * Mloc + tau * Kloc
            b[c] += L * Mloc @ p_iter[(phase, l)][c]
            b[c] += sign * RULE_POINTS.T @ (wq * mat.porosity * (s_i - s_n))
            b[c] += tau * RULE_POINTS.T @ (wq * src(xq[:, 0], xq[:, 1]))
            b[c] -= tau * G @ (kint * self.gravity(l, phase))
        # interface: Robin mass and projected g (nodal mean of endpoint values)
        lam = _lam(sv.lam, phase)
        sums, counts = {}, {}
        for (a, bb), _ in self.facets:
            for v in (a, bb):
                sums[v] = sums.get(v, 0.0) + g[(phase, l)][(a, bb)][v]
                counts[v] = counts.get(v, 0) + 1
        gp = np.zeros(N)
        for v in sums:
            gp[v] = sums[v] / counts[v]
        for (a, bb), _ in self.facets:
            h = np.linalg.norm(self.V[a] - self.V[bb])
            Mf = h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
            idx = [a, bb]
            A[np.ix_(idx, idx)] += tau * lam * Mf
            b[idx] -= tau * Mf @ gp[idx]
        # Dirichlet data from the exact solution, eliminated
        d = self.dofs[l]
        fixed = self.boundary[l]
        free = np.setdiff1d(d, fixed)
        exact = self.sc.exact(phase, l, t)
        x = np.zeros(N)
        x[fixed] = exact(self.V[fixed, 0], self.V[fixed, 1])
        rhs = b[free] - A[np.ix_(free, fixed)] @ x[fixed]
        x[free] = np.linalg.solve(A[np.ix_(free, free)], rhs)
        return x

    def iterate(self, p_time, t, n_iter):
        p = {f: v.copy() for f, v in p_time.items()}
        g = self.initial_g(p_time)
        history = []
        for _ in range(n_iter):
            g = self.update_g(p, g)
            p = {(phase, l): self.solve_field(phase, l, p, p_time, g, t)
                 for l in (1, 2) for phase in self.fields(l)}
            history.append({f: v.copy() for f, v in p.items()})
        return history

    def to_global(self, problem, fields):
        """Scatter the package's local vectors into global vertex numbering."""
        out = {}
        for (phase, l), v in fields.items():
            g = np.zeros(len(self.V))
            g[self.mesh.submeshes[l].vertex_ids] = v
            out[(phase, l)] = g
        return out


def _lam(lam, phase):
    v = lam[phase]
    return v if not isinstance(v, dict) else next(iter(v.values()))
