"""Maxwell wall reflection on the velocity grid.

For every boundary edge the velocity nodes split into outgoing (n.v > 0) and incoming
(n.v < 0) sets; nodes with n.v = 0 carry no flux and belong to neither. The incoming
trace is a linear function of the outgoing one,

    g_in = (1 - alpha) * specular(g_out) + alpha * diffuse(g_out) + correction,

where the correction adds a few Maxwellian-weighted modes so that the discrete mass flux
(and, on purely specular edges, the energy and tangential-momentum fluxes) vanish exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .geometry import Mesh
from .velocity import VelocityGrid

FLUX_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class EdgeOperator:
    normal: np.ndarray
    alpha: float
    out_idx: np.ndarray
    in_idx: np.ndarray
    out_flux: np.ndarray    # w * (n.v) on outgoing nodes (positive)
    in_flux: np.ndarray     # w * |n.v| on incoming nodes (positive)
    c_mu: float
    specular: np.ndarray    # (n_in, n_out) acting on outgoing values
    exact: bool             # every incoming node hit a grid node exactly
    raw: np.ndarray         # (n_in, n_out) reflection before correction
    modes: np.ndarray       # (n_in, n_modes) correction modes
    test_in: np.ndarray     # (n_modes, n_in) flux functionals of the conserved quantities
    test_out: np.ndarray    # (n_modes, n_out)
    coeff_map: np.ndarray   # (n_modes, n_out) correction coefficients as a map of g_out
    reflect: np.ndarray     # (n_in, n_out) corrected reflection

    @property
    def tangent(self) -> np.ndarray:
        return np.array([-self.normal[1], self.normal[0]])


def _split(normal: np.ndarray, grid: VelocityGrid):
    vn = grid.nodes @ normal
    tol = FLUX_TOL * grid.v_max
    out_idx = np.flatnonzero(vn > tol)
    in_idx = np.flatnonzero(vn < -tol)
    if len(out_idx) == 0 or len(in_idx) == 0:
        raise ValueError("empty outgoing or incoming velocity set")
    return vn, out_idx, in_idx


def specular_map(normal, grid: VelocityGrid, method: str = "isometric"):
    """Matrix approximating g(R v) on incoming nodes from outgoing values g.

    Returns (in_idx, out_idx, matrix, exact). Incoming nodes whose mirror image is a grid
    node map to it exactly; when that holds for every node the matrix is a permutation.
    Otherwise

    * ``bilinear``: g / mu is interpolated over the four surrounding outgoing nodes,
      renormalized to reproduce constants.
    * ``isometric``: the isometry (for the flux-weighted trace norms) closest to the
      bilinear map among those that reflect mu, (t.v) mu and |v|^2 mu exactly. It conserves
      the mass, tangential momentum and energy fluxes and, like the continuous reflection,
      preserves the trace norm.
    """
    normal = np.asarray(normal, dtype=float)
    vn, out_idx, in_idx = _split(normal, grid)
    mirrored = grid.nodes[in_idx] - 2.0 * np.outer(vn[in_idx], normal)
    pos = -np.ones(grid.size, dtype=int)
    pos[out_idx] = np.arange(len(out_idx))
    x = grid.axis_nodes
    n = grid.n_per_axis
    ia = np.abs(mirrored[:, :1] - x[None, :]).argmin(axis=1)
    ib = np.abs(mirrored[:, 1:] - x[None, :]).argmin(axis=1)
    near = ia * n + ib
    hit = (np.hypot(*(grid.nodes[near] - mirrored).T) <= 1e-10 * (x[-1] - x[0])) & (pos[near] >= 0)
    exact = bool(hit.all())
    mu_i, mu_o = grid.mu[in_idx], grid.mu[out_idx]
    if exact:
        stencil = np.zeros((len(in_idx), len(out_idx)))
        stencil[np.arange(len(in_idx)), pos[near]] = 1.0
        return in_idx, out_idx, mu_i[:, None] * stencil / mu_o[None, :], True
    if method not in ("bilinear", "isometric"):
        raise ValueError(f"unknown specular method {method!r}")
    stencil = np.array([_bilinear_row(r, grid, pos, out_idx) for r in mirrored])
    matrix = mu_i[:, None] * stencil / mu_o[None, :]
    if method == "isometric":
        matrix = _nearest_isometry(matrix, normal, grid, vn, in_idx, out_idx)
    return in_idx, out_idx, matrix, False


def _nearest_isometry(matrix, normal, grid, vn, in_idx, out_idx) -> np.ndarray:
    mu_i, mu_o = grid.mu[in_idx], grid.mu[out_idx]
    s_in = np.sqrt(grid.weights[in_idx] * -vn[in_idx] / mu_i)
    s_out = np.sqrt(grid.weights[out_idx] * vn[out_idx] / mu_o)
    M = s_in[:, None] * matrix / s_out[None, :]
    tangent = np.array([-normal[1], normal[0]])

    def invariants(v, m, s):
        return np.column_stack([s * m, s * m * (v @ tangent), s * m * np.sum(v * v, axis=1)])

    X = invariants(grid.nodes[in_idx], mu_i, s_in)
    Y = invariants(grid.nodes[out_idx], mu_o, s_out)
    # both sides have the same Gram matrix (velocity symmetry and exact quadrature)
    L = np.linalg.cholesky(Y.T @ Y)
    Ex = np.linalg.solve(L, X.T).T
    Ey = np.linalg.solve(L, Y.T).T
    Cx = _complement(Ex)
    Cy = _complement(Ey)
    U, _, Vt = np.linalg.svd(Cx.T @ M @ Cy)
    Q = Ex @ Ey.T + Cx @ (U @ Vt) @ Cy.T
    return Q / s_in[:, None] * s_out[None, :]


def _complement(E: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of the columns of E."""
    q, _ = np.linalg.qr(np.hstack([E, np.eye(E.shape[0])]))
    return q[:, E.shape[1]:E.shape[0]]


def _bilinear_row(rv, grid, pos, out_idx) -> np.ndarray:
    x = grid.axis_nodes
    n = grid.n_per_axis
    corners = []
    for c in rv:
        if c <= x[0]:
            corners.append(((0, 1.0),))
        elif c >= x[-1]:
            corners.append(((n - 1, 1.0),))
        else:
            i1 = int(np.searchsorted(x, c))
            t = (c - x[i1 - 1]) / (x[i1] - x[i1 - 1])
            corners.append(((i1 - 1, 1.0 - t), (i1, t)))
    row = np.zeros(len(out_idx))
    for a, wa in corners[0]:
        for b, wb in corners[1]:
            j = a * n + b
            if pos[j] >= 0 and wa * wb > 0:
                row[pos[j]] += wa * wb
    if row.sum() <= 1e-14:
        row[:] = 0.0
        row[int(np.argmin(np.hypot(*(grid.nodes[out_idx] - rv).T)))] = 1.0
    return row / row.sum()


def edge_operator(normal, alpha: float, grid: VelocityGrid, method: str = "isometric") -> EdgeOperator:
    normal = np.asarray(normal, dtype=float)
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("accommodation coefficient outside [0, 1]")
    vn, out_idx, in_idx = _split(normal, grid)
    _, _, specular, exact = specular_map(normal, grid, method)
    mu_o, mu_i = grid.mu[out_idx], grid.mu[in_idx]
    out_flux = grid.weights[out_idx] * vn[out_idx]
    in_flux = -grid.weights[in_idx] * vn[in_idx]
    c_mu = 1.0 / float(out_flux @ mu_o)
    diffuse = c_mu * np.outer(mu_i, out_flux)
    raw = (1.0 - alpha) * specular + alpha * diffuse

    v_in = grid.nodes[in_idx]
    v_out = grid.nodes[out_idx]
    tangent = np.array([-normal[1], normal[0]])
    tests_in = [np.ones(len(in_idx))]
    tests_out = [np.ones(len(out_idx))]
    modes = [mu_i]
    if alpha == 0.0:
        s2_in = np.sum(v_in**2, axis=1)
        beta = float(in_flux @ (s2_in * mu_i)) / float(in_flux @ mu_i)
        tests_in += [v_in @ tangent, s2_in]
        tests_out += [v_out @ tangent, np.sum(v_out**2, axis=1)]
        modes += [(v_in @ tangent) * mu_i, (s2_in - beta) * mu_i]
    Phi_in = np.array(tests_in) * in_flux          # (n_t, n_in)
    Phi_out = np.array(tests_out) * out_flux       # (n_t, n_out)
    modes = np.array(modes).T                      # (n_in, n_m)
    system = Phi_in @ modes
    if np.linalg.cond(system) > 1e12:
        raise ValueError("singular flux-correction system")
    coeff_map = np.linalg.solve(system, Phi_out - Phi_in @ raw)
    reflect = raw + modes @ coeff_map
    return EdgeOperator(normal, alpha, out_idx, in_idx, out_flux, in_flux, c_mu, specular, exact,
                         raw, modes, Phi_in, Phi_out, coeff_map, reflect)


def diffusive_apply(op: EdgeOperator, g_out: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """c_mu mu(v) times the outgoing flux integral, on incoming nodes."""
    return op.c_mu * grid.mu[op.in_idx] * (np.asarray(g_out) @ op.out_flux)


def flux_correction(op: EdgeOperator, g_in_raw: np.ndarray, g_out: np.ndarray):
    """Add correction modes so the conserved fluxes balance; returns (g_in, coefficients)."""
    system = op.test_in @ op.modes
    rhs = np.asarray(g_out) @ op.test_out.T - np.asarray(g_in_raw) @ op.test_in.T
    coeffs = np.linalg.solve(system, rhs.T).T
    return g_in_raw + coeffs @ op.modes.T, coeffs


def maxwell_reflect(op: EdgeOperator, g_out: np.ndarray) -> np.ndarray:
    """Incoming trace from outgoing trace (last axis indexes outgoing nodes)."""
    return np.asarray(g_out) @ op.reflect.T


@dataclass(frozen=True, eq=False)
class BoundaryOperator:
    """Edge operators for every boundary edge of a mesh, in mesh boundary order."""

    mesh: Mesh
    grid: VelocityGrid
    edges: tuple

    @property
    def alpha_is_zero(self) -> bool:
        return self.mesh.alpha_is_zero


def build_boundary(mesh: Mesh, grid: VelocityGrid, method: str = "isometric") -> BoundaryOperator:
    cache = {}
    ops = []
    for n, a in zip(mesh.boundary_normals, mesh.boundary_alpha):
        key = (round(float(n[0]), 14), round(float(n[1]), 14), float(a))
        if key not in cache:
            cache[key] = edge_operator(n, a, grid, method)
        ops.append(cache[key])
    return BoundaryOperator(mesh, grid, tuple(ops))


def outgoing_traces(boundary: BoundaryOperator, f: np.ndarray):
    """Yield (edge index, operator, outgoing trace) using the upwind cell value."""
    cells = boundary.mesh.boundary_cells
    for e, op in enumerate(boundary.edges):
        yield e, op, f[cells[e], op.out_idx]


def dperp_boundary_norm(boundary: BoundaryOperator, f: np.ndarray) -> float:
    """sum over edges of length * alpha(2 - alpha) * sum_out w (f - D f)^2 / mu (n.v)."""
    grid = boundary.grid
    lengths = boundary.mesh.boundary_lengths
    total = 0.0
    for e, op, g in outgoing_traces(boundary, np.asarray(f)):
        if op.alpha == 0.0:
            continue
        mu_o = grid.mu[op.out_idx]
        d = g - op.c_mu * mu_o * (g @ op.out_flux)
        total += lengths[e] * op.alpha * (2 - op.alpha) * float(np.sum(op.out_flux * d * d / mu_o))
    return total


def correction_magnitude(boundary: BoundaryOperator, f: np.ndarray) -> float:
    """Largest flux-correction coefficient over all edges for the current trace."""
    worst = 0.0
    for _, op, g in outgoing_traces(boundary, np.asarray(f)):
        worst = max(worst, float(np.abs(op.coeff_map @ g).max()))
    return worst


def edge_fluxes(op: EdgeOperator, g_out: np.ndarray, g_in: np.ndarray, grid: VelocityGrid,
                phi: np.ndarray) -> float:
    """Net outward flux of the velocity function phi (values on all nodes) across one edge."""
    return float(np.sum(op.out_flux * phi[op.out_idx] * g_out) - np.sum(op.in_flux * phi[op.in_idx] * g_in))


def boundary_invariants(boundary: BoundaryOperator, tol: float = 1e-10) -> dict:
    """Worst-case flux balance, equilibrium preservation and trace contraction over the edges."""
    grid = boundary.grid
    flux = equilibrium = norm = 0.0
    alpha_ok = True
    for op in {id(op): op for op in boundary.edges}.values():
        alpha_ok &= 0.0 <= op.alpha <= 1.0
        flux = max(flux, float(np.abs(op.test_in @ op.reflect - op.test_out).max()))
        mu_o, mu_i = grid.mu[op.out_idx], grid.mu[op.in_idx]
        equilibrium = max(equilibrium, float(np.abs(op.reflect @ mu_o - mu_i).max()))
        # operator norm between the flux-weighted trace spaces
        scaled = np.sqrt(op.in_flux / mu_i)[:, None] * op.reflect / np.sqrt(op.out_flux / mu_o)[None, :]
        norm = max(norm, float(np.linalg.norm(scaled, 2)))
    return {"flux_balance": flux, "equilibrium": equilibrium, "trace_norm": norm,
            "alpha_in_range": bool(alpha_ok),
            "ok": bool(alpha_ok and flux <= tol and equilibrium <= tol and norm <= 1.0 + tol)}
