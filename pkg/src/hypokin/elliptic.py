"""P1 finite elements for the auxiliary Poisson and Lame problems.

Poisson:  -lap u = xi,  (2 - alpha) du/dn + alpha u = 0, with the weak form
    a(u, w) = int grad u . grad w + int_dOmega alpha / (2 - alpha) u w.
Lame:     -div(sym grad U) = Xi,  U . n = 0, tangential Robin condition, with
    A(U, W) = int sym grad U : sym grad W + int_dOmega alpha / (2 - alpha) U . W.

Sources are cellwise constants (one value per triangle) or nodal values. For alpha = 0
the Poisson problem carries a mean-zero constraint and, on rotation-invariant domains, the
Lame problem carries a constraint on the mean rotation of U.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Mesh, RigidFieldBasis, rigid_fields

RTOL = 1e-10
REFINEMENTS = 3
CORNER_ANGLE = math.pi / 4   # boundary normal jump above which a vertex counts as a corner


class CompatibilityError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


# -- element matrices ---------------------------------------------------------------------

def _p1_gradients(mesh: Mesh) -> np.ndarray:
    """(cells, 3, 2) gradients of the barycentric basis functions."""
    p = mesh.vertices[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    inv = np.empty((len(p), 2, 2))
    inv[:, 0, 0] = d2[:, 1] / det
    inv[:, 0, 1] = -d2[:, 0] / det
    inv[:, 1, 0] = -d1[:, 1] / det
    inv[:, 1, 1] = d1[:, 0] / det
    ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    return np.einsum("aj,cjk->cak", ref, inv)


def _scatter(mesh: Mesh, local: np.ndarray, dofs: np.ndarray, n: int) -> sp.csr_matrix:
    rows = np.repeat(dofs, dofs.shape[1], axis=1).ravel()
    cols = np.tile(dofs, (1, dofs.shape[1])).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _edge_weights(mesh: Mesh, alpha) -> np.ndarray:
    a = mesh.boundary_alpha if alpha is None else np.broadcast_to(
        np.asarray(alpha, dtype=float), mesh.boundary_alpha.shape)
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("accommodation coefficient outside [0, 1]")
    return a / (2.0 - a)


def _boundary_mass(mesh: Mesh, weights: np.ndarray) -> sp.csr_matrix:
    """int_dOmega c u w with c constant per edge (its midpoint value), exact for P1."""
    L = mesh.boundary_lengths * weights
    local = (L / 6.0)[:, None, None] * np.array([[2.0, 1.0], [1.0, 2.0]])
    return _scatter(mesh, local, mesh.boundary_edges, mesh.n_vertices)


@dataclass(frozen=True, eq=False)
class FEOperators:
    """Scalar P1 matrices on a mesh."""

    mesh: Mesh

    @cached_property
    def gradients(self) -> np.ndarray:
        return _p1_gradients(self.mesh)

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        G = self.gradients
        local = self.mesh.cell_areas[:, None, None] * np.einsum("cak,cbk->cab", G, G)
        return _scatter(self.mesh, local, self.mesh.triangles, self.mesh.n_vertices)

    @cached_property
    def mass(self) -> sp.csr_matrix:
        ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
        local = self.mesh.cell_areas[:, None, None] * ref
        return _scatter(self.mesh, local, self.mesh.triangles, self.mesh.n_vertices)

    @cached_property
    def cell_to_node(self) -> sp.csr_matrix:
        """Load-vector map: (b)_i = int xi phi_i for cellwise constant xi."""
        m = self.mesh
        rows = m.triangles.ravel()
        cols = np.repeat(np.arange(m.n_cells), 3)
        vals = np.repeat(m.cell_areas / 3.0, 3)
        return sp.coo_matrix((vals, (rows, cols)), shape=(m.n_vertices, m.n_cells)).tocsr()

    def load(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if xi.shape[0] == self.mesh.n_cells:
            return self.cell_to_node @ xi
        if xi.shape[0] == self.mesh.n_vertices:
            return self.mass @ xi
        raise ValueError("source must have one value per cell or per vertex")

    def cell_gradient(self, u: np.ndarray) -> np.ndarray:
        """(cells, 2) or (cells, c, 2) gradient of a nodal field, constant on each cell."""
        return np.einsum("cak,ca...->c...k", self.gradients, u[self.mesh.triangles])

    def mean(self, u: np.ndarray) -> float:
        return float(np.sum(self.mass @ u))

    def l2_norm(self, u: np.ndarray) -> float:
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            return math.sqrt(max(float(u @ (self.mass @ u)), 0.0))
        return math.sqrt(sum(max(float(c @ (self.mass @ c)), 0.0) for c in u.T))

    def h1_seminorm(self, u: np.ndarray) -> float:
        g = self.cell_gradient(np.asarray(u, dtype=float))
        return math.sqrt(float(np.sum(self.mesh.cell_areas * g.reshape(len(g), -1).T**2)))

    def h1_norm(self, u: np.ndarray) -> float:
        return math.hypot(self.l2_norm(u), self.h1_seminorm(u))

    def recovered_gradient(self, u: np.ndarray) -> np.ndarray:
        """Nodal gradient by area-weighted averaging of the cell gradients."""
        g = self.cell_gradient(u)
        flat = g.reshape(len(g), -1)
        acc = np.zeros((self.mesh.n_vertices, flat.shape[1]))
        wsum = np.zeros(self.mesh.n_vertices)
        for a in range(3):
            np.add.at(acc, self.mesh.triangles[:, a], self.mesh.cell_areas[:, None] * flat)
            np.add.at(wsum, self.mesh.triangles[:, a], self.mesh.cell_areas)
        return (acc / wsum[:, None]).reshape((self.mesh.n_vertices,) + g.shape[1:])

    def h2_proxy(self, u: np.ndarray) -> float:
        """||u||_H1 plus the L2 norm of the gradient of the recovered gradient."""
        G = self.recovered_gradient(u)
        second = self.cell_gradient(G)
        s = math.sqrt(float(np.sum(self.mesh.cell_areas * second.reshape(len(second), -1).T**2)))
        return math.hypot(self.h1_norm(u), s)

    def cell_average(self, u: np.ndarray) -> np.ndarray:
        return np.mean(np.asarray(u)[self.mesh.triangles], axis=1)


# -- systems --------------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LinearSystem:
    """Symmetric positive semidefinite matrix on reduced unknowns, plus constraint rows.

    Nodal unknowns are ``prolongation @ x``; each constraint row c requires c . x = 0.
    """

    matrix: sp.csr_matrix
    constraints: np.ndarray                  # (k, n_reduced)
    prolongation: sp.csr_matrix
    problem: str
    info: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def symmetry_residual(self) -> float:
        d = self.matrix - self.matrix.T
        return float(abs(d).max() / max(abs(self.matrix).max(), 1.0)) if d.nnz else 0.0

    def saddle_matrix(self) -> sp.csr_matrix:
        k = len(self.constraints)
        C = sp.csr_matrix(self.constraints)
        return sp.bmat([[self.matrix, C.T], [C, sp.csr_matrix((k, k))]]).tocsr()

    def dump(self, path) -> None:
        """Write the (saddle) matrix in Matrix Market coordinate format."""
        scipy.io.mmwrite(str(path), self.saddle_matrix() if len(self.constraints) else self.matrix,
                         symmetry="symmetric")

    def solve(self, rhs: np.ndarray, rtol: float = RTOL, indefinite: bool = False,
              check: bool = True) -> tuple[np.ndarray, int]:
        """Solve on the reduced unknowns; returns (x, iterations).

        CG for unconstrained positive definite systems, MINRES otherwise.
        """
        rhs = np.asarray(rhs, dtype=float)
        bnorm = float(np.linalg.norm(rhs))
        if bnorm == 0.0:
            return np.zeros(self.size), 0
        count = [0]

        def cb(_):
            count[0] += 1

        maxiter = 20 * (self.size + len(self.constraints)) + 100
        k = len(self.constraints)
        if k == 0 and not indefinite:
            A = self.matrix
            full = rhs
            M = sp.diags(1.0 / A.diagonal())

            def krylov(b):
                return spla.cg(A, b, rtol=rtol, atol=0.0, maxiter=maxiter, M=M, callback=cb)
        else:
            A = self.saddle_matrix()
            full = np.concatenate([rhs, np.zeros(k)])
            d = np.abs(np.concatenate([self.matrix.diagonal(), np.ones(k)]))
            M = sp.diags(1.0 / np.where(d > 0, d, 1.0))

            def krylov(b):
                return spla.minres(A, b, rtol=rtol * 1e-2, maxiter=maxiter, M=M, callback=cb)
        sol, flag = krylov(full)
        res = np.linalg.norm(A @ sol - full) / bnorm
        # restarts on the true residual (iterative refinement) when the recursive residual drifted
        for _ in range(REFINEMENTS):
            if flag != 0 or res <= rtol or not np.all(np.isfinite(sol)):
                break
            corr, flag = krylov(full - A @ sol)
            sol = sol + corr
            res = np.linalg.norm(A @ sol - full) / bnorm
        x = sol[: self.size]
        if not np.all(np.isfinite(x)) or (check and (flag != 0 or res > 10 * rtol)):
            raise SolverError(f"{self.problem}: iterative solve failed (flag {flag}, residual {res:.2e})")
        return x, count[0]

    @cached_property
    def _lu(self):
        S = self.saddle_matrix() if len(self.constraints) else self.matrix
        return spla.splu(S.tocsc())

    def direct_solve(self, rhs: np.ndarray) -> np.ndarray:
        """Sparse LU solve on the (saddle) system; rhs may hold several columns."""
        rhs = np.asarray(rhs, dtype=float)
        k = len(self.constraints)
        pad = np.zeros((k,) + rhs.shape[1:])
        sol = self._lu.solve(np.concatenate([rhs, pad]))
        return sol[: self.size]


@dataclass
class ScalarField:
    values: np.ndarray   # nodal
    problem: str
    h1_norm: float = float("nan")
    h2_proxy: float = float("nan")
    source_norm: float = float("nan")
    iterations: int = 0


@dataclass
class VectorField:
    values: np.ndarray   # (nodes, 2)
    problem: str
    h1_norm: float = float("nan")
    h2_proxy: float = float("nan")
    source_norm: float = float("nan")
    iterations: int = 0


def _source_norm(fe: FEOperators, xi: np.ndarray) -> float:
    xi = np.asarray(xi, dtype=float)
    if xi.shape[0] == fe.mesh.n_cells:
        a = fe.mesh.cell_areas
        return math.sqrt(float(np.sum(a * xi.reshape(len(a), -1).T**2)))
    return fe.l2_norm(xi)


# -- Poisson ----------------------------------------------------------------------------------

def assemble_poisson(mesh: Mesh, alpha=None) -> LinearSystem:
    """a_alpha on P1; a mean-zero constraint row when alpha vanishes identically."""
    fe = FEOperators(mesh)
    w = _edge_weights(mesh, alpha)
    A = (fe.stiffness + _boundary_mass(mesh, w)).tocsr()
    n = mesh.n_vertices
    neumann = bool(np.all(w == 0.0))
    constraints = (fe.mass @ np.ones(n))[None, :] if neumann else np.zeros((0, n))
    return LinearSystem(A, constraints, sp.identity(n, format="csr"),
                        "neumann" if neumann else "robin", {"edge_weights": w})


class PoissonSolver:
    """Reusable solver for a fixed mesh and accommodation profile."""

    def __init__(self, mesh: Mesh, alpha=None):
        self.mesh = mesh
        self.fe = FEOperators(mesh)
        self.system = assemble_poisson(mesh, alpha)

    @property
    def neumann(self) -> bool:
        return self.system.problem == "neumann"

    def solve(self, xi, diagnostics: bool = True) -> ScalarField:
        b = self.fe.load(xi)
        if self.neumann:
            total = float(np.sum(b))
            scale = max(float(np.sum(np.abs(b))), 1.0)
            if abs(total) > 1e-10 * scale:
                raise CompatibilityError(f"Neumann source has nonzero mean {total:.3e}")
            b = b - self.fe.mass @ np.full(self.mesh.n_vertices, total)
        u, it = self.system.solve(b)
        if self.neumann:
            u = u - self.fe.mean(u)
        field_ = ScalarField(u, self.system.problem, iterations=it)
        if diagnostics:
            field_.h1_norm = self.fe.h1_norm(u)
            field_.h2_proxy = self.fe.h2_proxy(u)
            field_.source_norm = _source_norm(self.fe, xi)
        return field_

    def solution_operator(self) -> np.ndarray:
        """Dense (vertices, cells) map from cellwise sources to nodal solutions.

        In the Neumann case the source mean is removed first, so the map agrees with
        ``solve`` on compatible sources.
        """
        ones = self.fe.mass @ np.ones(self.mesh.n_vertices)
        B = self.fe.cell_to_node.toarray()
        if self.neumann:
            B = B - ones[:, None] * self.mesh.cell_areas[None, :]
        U = self.system.direct_solve(B)
        if self.neumann:
            U = U - ones @ U
        return U

    def galerkin_residual(self, u: np.ndarray, xi) -> float:
        """max_i |a(u, phi_i) - (xi, phi_i)| relative to the load size (modulo constants)."""
        r = self.system.matrix @ u - self.fe.load(xi)
        if self.neumann:
            r = r - self.fe.mass @ np.full(len(u), np.sum(r))
        return float(np.abs(r).max() / max(np.abs(self.fe.load(xi)).max(), 1e-300))


def solve_neumann(mesh: Mesh, xi) -> ScalarField:
    """Pure Neumann problem with mean-zero solution."""
    return PoissonSolver(mesh.with_alpha(0.0)).solve(xi)


def solve_poisson(mesh: Mesh, xi, alpha=None) -> ScalarField:
    a = mesh.boundary_alpha if alpha is None else alpha
    if np.all(np.asarray(a) == 0.0):
        return solve_neumann(mesh, xi)
    return PoissonSolver(mesh, a).solve(xi)


# -- Lame ---------------------------------------------------------------------------------------

def vertex_normals(mesh: Mesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(boundary vertex ids, unit vertex normals, corner flags).

    A vertex normal is the normalized mean of its two edge normals; a vertex whose edge
    normals differ by more than CORNER_ANGLE is a corner.
    """
    ids = mesh.boundary_vertex_ids
    pos = {int(v): i for i, v in enumerate(ids)}
    acc = np.zeros((len(ids), 2))
    seen = [[] for _ in ids]
    for (a, b), n in zip(mesh.boundary_edges, mesh.boundary_normals):
        for v in (a, b):
            acc[pos[int(v)]] += n
            seen[pos[int(v)]].append(n)
    corner = np.zeros(len(ids), dtype=bool)
    for i, ns in enumerate(seen):
        if len(ns) != 2:
            corner[i] = True
            continue
        c = float(np.clip(ns[0] @ ns[1], -1.0, 1.0))
        corner[i] = math.acos(c) > CORNER_ANGLE
    norms = np.hypot(acc[:, 0], acc[:, 1])
    norms[norms == 0] = 1.0
    return ids, acc / norms[:, None], corner


def tangential_prolongation(mesh: Mesh) -> sp.csr_matrix:
    """Map reduced unknowns to nodal (x, y) pairs with U . n = 0 at boundary vertices.

    Interior vertices keep both components, smooth boundary vertices keep the tangential
    one, corners keep none.
    """
    ids, normals, corner = vertex_normals(mesh)
    bpos = -np.ones(mesh.n_vertices, dtype=int)
    bpos[ids] = np.arange(len(ids))
    rows, cols, vals = [], [], []
    col = 0
    for v in range(mesh.n_vertices):
        b = bpos[v]
        if b < 0:
            rows += [2 * v, 2 * v + 1]
            cols += [col, col + 1]
            vals += [1.0, 1.0]
            col += 2
        elif not corner[b]:
            n = normals[b]
            rows += [2 * v, 2 * v + 1]
            cols += [col, col]
            vals += [-n[1], n[0]]
            col += 1
    return sp.coo_matrix((vals, (rows, cols)), shape=(2 * mesh.n_vertices, col)).tocsr()


@dataclass(frozen=True, eq=False)
class VectorFE:
    mesh: Mesh

    @cached_property
    def fe(self) -> FEOperators:
        return FEOperators(self.mesh)

    @cached_property
    def dofs(self) -> np.ndarray:
        t = self.mesh.triangles
        return np.stack([2 * t[:, 0], 2 * t[:, 0] + 1, 2 * t[:, 1], 2 * t[:, 1] + 1,
                         2 * t[:, 2], 2 * t[:, 2] + 1], axis=1)

    @cached_property
    def strain_matrices(self) -> np.ndarray:
        """(cells, 3, 6): (e11, e22, e12) of the symmetric gradient from element DOFs."""
        G = self.fe.gradients
        B = np.zeros((len(G), 3, 6))
        B[:, 0, 0::2] = G[:, :, 0]
        B[:, 1, 1::2] = G[:, :, 1]
        B[:, 2, 0::2] = 0.5 * G[:, :, 1]
        B[:, 2, 1::2] = 0.5 * G[:, :, 0]
        return B

    @cached_property
    def strain_stiffness(self) -> sp.csr_matrix:
        B = self.strain_matrices
        D = np.array([1.0, 1.0, 2.0])
        local = self.mesh.cell_areas[:, None, None] * np.einsum("cia,i,cib->cab", B, D, B)
        return _scatter(self.mesh, local, self.dofs, 2 * self.mesh.n_vertices)

    @cached_property
    def gradient_stiffness(self) -> sp.csr_matrix:
        """int grad U : grad W."""
        return sp.kron(self.fe.stiffness, sp.identity(2)).tocsr()

    @cached_property
    def mass(self) -> sp.csr_matrix:
        return sp.kron(self.fe.mass, sp.identity(2)).tocsr()

    def boundary_mass(self, weights: np.ndarray) -> sp.csr_matrix:
        return sp.kron(_boundary_mass(self.mesh, weights), sp.identity(2)).tocsr()

    def rotation_row(self, A: np.ndarray) -> np.ndarray:
        """Row r with r . U = int grad^a U : A (U as interleaved nodal vector)."""
        G = self.fe.gradients      # d phi_a / d x_k
        skew = 0.5 * (A - A.T)
        # grad U_ij = dU_i/dx_j = sum_a U_{a,i} G_{a,j}; contract with skew_ij
        coef = np.einsum("caj,ij->cai", G, skew) * self.mesh.cell_areas[:, None, None]
        r = np.zeros(2 * self.mesh.n_vertices)
        np.add.at(r, self.dofs.reshape(-1, 3, 2)[:, :, 0].ravel(), coef[:, :, 0].ravel())
        np.add.at(r, self.dofs.reshape(-1, 3, 2)[:, :, 1].ravel(), coef[:, :, 1].ravel())
        return r

    def load(self, Xi) -> np.ndarray:
        Xi = np.asarray(Xi, dtype=float)
        b = np.column_stack([self.fe.load(Xi[:, 0]), self.fe.load(Xi[:, 1])])
        return b.ravel()

    def sym_gradient(self, U: np.ndarray) -> np.ndarray:
        """(cells, 2, 2) symmetric gradient of a nodal vector field."""
        g = self.fe.cell_gradient(U)          # (cells, 2 comps, 2 derivs): dU_i/dx_j
        return 0.5 * (g + np.swapaxes(g, 1, 2))


def assemble_lame(mesh: Mesh, alpha=None, rigid: RigidFieldBasis | None = None) -> LinearSystem:
    vfe = VectorFE(mesh)
    w = _edge_weights(mesh, alpha)
    A = vfe.strain_stiffness + vfe.boundary_mass(w)
    P = tangential_prolongation(mesh)
    Ar = (P.T @ A @ P).tocsr()
    Ar = (0.5 * (Ar + Ar.T)).tocsr()
    specular = bool(np.all(w == 0.0))
    if rigid is None:
        rigid = rigid_fields(mesh)
    rows = [vfe.rotation_row(Am) @ P for Am in rigid.basis] if specular else []
    constraints = np.array(rows).reshape(len(rows), P.shape[1])
    return LinearSystem(Ar, constraints, P, "lame", {"edge_weights": w, "rigid": rigid})


class LameSolver:
    def __init__(self, mesh: Mesh, alpha=None):
        self.mesh = mesh
        self.vfe = VectorFE(mesh)
        self.fe = self.vfe.fe
        self.system = assemble_lame(mesh, alpha)
        self.rigid: RigidFieldBasis = self.system.info["rigid"]

    def check_compatibility(self, Xi) -> None:
        if len(self.system.constraints) == 0:
            return
        b = self.vfe.load(Xi)
        x = self.mesh.vertices
        scale = max(float(np.sum(np.abs(b))), 1.0)
        for A in self.rigid.basis:
            ax = (x @ A.T).ravel()
            if abs(float(b @ ax)) > 1e-10 * scale:
                raise CompatibilityError(f"source not orthogonal to rigid rotation ({float(b @ ax):.3e})")

    def solve(self, Xi, diagnostics: bool = True) -> VectorField:
        self.check_compatibility(Xi)
        P = self.system.prolongation
        x, it = self.system.solve(P.T @ self.vfe.load(Xi))
        U = (P @ x).reshape(-1, 2)
        out = VectorField(U, "lame", iterations=it)
        if diagnostics:
            out.h1_norm = self.fe.h1_norm(U)
            out.h2_proxy = self.fe.h2_proxy(U)
            out.source_norm = _source_norm(self.fe, Xi)
        return out

    def solution_operator(self) -> np.ndarray:
        """Dense map from cellwise sources (cells, 2) to nodal U (vertices, 2), both raveled.

        Sources are first made orthogonal to the rigid rotations, matching ``solve`` on
        compatible data.
        """
        n_c = self.mesh.n_cells
        cn = self.fe.cell_to_node.toarray()
        B = np.zeros((2 * self.mesh.n_vertices, 2 * n_c))
        for i in range(2):
            B[i::2, i::2] = cn
        if len(self.system.constraints):
            a = np.repeat(self.mesh.cell_areas, 2)
            x = self.mesh.cell_centroids
            for A in self.rigid.basis:
                r = (x @ A.T).ravel()
                B = B - np.outer(B @ r, a * r) / float(np.sum(a * r * r))
        P = self.system.prolongation
        return P @ self.system.direct_solve(P.T @ B)

    def galerkin_residual(self, U: np.ndarray, Xi) -> float:
        P = self.system.prolongation
        b = P.T @ self.vfe.load(Xi)
        x = P.T @ U.ravel()   # P has orthonormal columns
        r = self.system.matrix @ x - b
        C = self.system.constraints
        if len(C):
            # remove the multiplier component
            lam, *_ = np.linalg.lstsq(C.T, r, rcond=None)
            r = r - C.T @ lam
        return float(np.abs(r).max() / max(np.abs(b).max(), 1e-300))


def solve_lame(mesh: Mesh, Xi, alpha=None) -> VectorField:
    return LameSolver(mesh, alpha).solve(Xi)
