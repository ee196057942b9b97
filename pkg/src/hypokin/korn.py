"""Best constants of Poincare and Korn inequalities as constrained generalized eigenvalues.

Each inequality target(U) <= C^2 form(U) over a constrained P1 space is the pencil
(form, target); its smallest eigenvalue lam gives C = lam^(-1/2). The eigenvalue is
computed by block inverse iteration with constrained inner solves and, independently, by
LOBPCG; the constant is then checked on random fields.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import eigh

from .elliptic import FEOperators, LinearSystem, VectorFE, _boundary_mass, _edge_weights, \
    tangential_prolongation
from .geometry import Mesh, rigid_fields

INEQUALITIES = ("PW", "Robin-P", "Korn-Robin", "Korn-rigid", "Korn-L2")


@dataclass
class Pencil:
    """form A and target B on reduced unknowns, with constraint rows C x = 0."""

    name: str
    A: sp.csr_matrix
    B: sp.csr_matrix
    constraints: np.ndarray
    prolongation: sp.csr_matrix
    mesh: Mesh | None = None
    note: str = ""

    @property
    def size(self) -> int:
        return self.A.shape[0]

    def project(self, X: np.ndarray) -> np.ndarray:
        """Euclidean projection of the columns of X onto the constraint set."""
        C = self.constraints
        if len(C) == 0:
            return X
        return X - C.T @ np.linalg.solve(C @ C.T, C @ X)


@dataclass
class EigenResult:
    value: float
    vector: np.ndarray
    iterations: int
    method: str


@dataclass
class InequalityReport:
    inequality: str
    constant: float
    eigenvalue: float
    mesh_h: float
    iterations: int
    certified: bool = False
    violations: int = 0
    eigenvector: np.ndarray | None = field(default=None, repr=False)
    eigenvalue_check: float = float("nan")   # second-route eigenvalue
    note: str = ""

    def to_dict(self) -> dict:
        return {"inequality": self.inequality, "constant": self.constant, "mesh_h": self.mesh_h,
                "iterations": self.iterations, "certified": self.certified,
                "eigenvalue": self.eigenvalue, "eigenvalue_check": self.eigenvalue_check,
                "violations": self.violations, "note": self.note}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# -- pencils --------------------------------------------------------------------------------

def _scalar_pencil(mesh: Mesh, name: str, alpha) -> Pencil:
    fe = FEOperators(mesh)
    n = mesh.n_vertices
    eye = sp.identity(n, format="csr")
    if name == "PW":
        return Pencil(name, fe.stiffness, fe.mass, (fe.mass @ np.ones(n))[None, :], eye, mesh)
    w = _edge_weights(mesh, alpha)
    if np.all(w == 0.0):
        raise ValueError("the Robin-type Poincare inequality fails for alpha = 0 (constants)")
    return Pencil(name, (fe.stiffness + _boundary_mass(mesh, w)).tocsr(), fe.mass, np.zeros((0, n)), eye, mesh)


def _vector_pencil(mesh: Mesh, name: str, alpha, tangential: bool = True) -> Pencil:
    vfe = VectorFE(mesh)
    P = tangential_prolongation(mesh) if tangential else sp.identity(2 * mesh.n_vertices, format="csr")
    h1 = vfe.mass + vfe.gradient_stiffness
    note = ""
    rows = []
    if name == "Korn-Robin":
        w = _edge_weights(mesh, alpha)
        if np.all(w == 0.0):
            raise ValueError("the Robin Korn inequality needs alpha not identically 0")
        A = vfe.strain_stiffness + vfe.boundary_mass(w)
        B = h1
    elif name == "Korn-rigid":
        A, B = vfe.strain_stiffness, h1
        rigid = rigid_fields(mesh)
        rows = [vfe.rotation_row(Am) @ P for Am in rigid.basis]
        if not rows:
            note = "no rigid fields preserve the domain: no rotation constraint"
    elif name == "Korn-L2":
        A, B = vfe.strain_stiffness + vfe.mass, vfe.gradient_stiffness
    else:
        raise ValueError(f"unknown inequality {name!r}")
    Ar = (P.T @ A @ P).tocsr()
    Br = (P.T @ B @ P).tocsr()
    C = np.array(rows).reshape(len(rows), P.shape[1])
    return Pencil(name, (0.5 * (Ar + Ar.T)).tocsr(), (0.5 * (Br + Br.T)).tocsr(), C, P, mesh, note)


def pencil(mesh: Mesh, inequality: str, alpha=None, tangential: bool | None = None) -> Pencil:
    """``tangential`` (vector pencils) imposes U . n = 0; by default on for the Korn forms
    and off for Korn-L2."""
    if inequality not in INEQUALITIES:
        raise ValueError(f"unknown inequality {inequality!r}")
    if inequality in ("PW", "Robin-P"):
        return _scalar_pencil(mesh, inequality, alpha)
    if tangential is None:
        tangential = inequality != "Korn-L2"
    return _vector_pencil(mesh, inequality, alpha, tangential)


# -- eigen-routes -------------------------------------------------------------------------------

def inverse_iteration(p: Pencil, block: int = 4, tol: float = 1e-12, maxiter: int = 300,
                      shift: float = 0.0, seed: int = 0) -> EigenResult:
    """Smallest eigenvalue by shifted block inverse iteration with Rayleigh-Ritz.

    Each iteration solves (A - shift B) Y = B X on the constrained space (CG, or MINRES on
    the saddle system) and extracts the Ritz pairs from span{X, Y, X_previous}. Keeping
    the previous block gives a three-term recurrence, which matters for the Korn pencils
    whose lowest eigenvalues sit in a tight cluster.
    """
    rng = np.random.default_rng(seed)
    system = LinearSystem((p.A - shift * p.B).tocsr(), p.constraints, p.prolongation, p.name)
    X = p.project(rng.standard_normal((p.size, block)))
    vals, X = _ritz(p, X)
    X_prev = None
    prev = np.inf
    for it in range(1, maxiter + 1):
        Y = np.column_stack([system.solve(p.B @ X[:, j], rtol=1e-11, indefinite=shift != 0.0,
                                          check=False)[0] for j in range(block)])
        basis = [X, p.project(Y)] + ([X_prev] if X_prev is not None else [])
        vals, V = _ritz(p, np.hstack(basis))
        X_prev, X = X, V[:, :block]
        lam = vals[0]
        if abs(lam - prev) <= tol * abs(lam):
            break
        prev = lam
    return EigenResult(float(lam), X[:, 0], it, "inverse-iteration")


def _ritz(p: Pencil, Y: np.ndarray):
    U, sv, _ = np.linalg.svd(Y / np.linalg.norm(Y, axis=0), full_matrices=False)
    Q = U[:, sv > 1e-10 * sv[0]]
    Ar = Q.T @ (p.A @ Q)
    Br = Q.T @ (p.B @ Q)
    vals, vecs = eigh(0.5 * (Ar + Ar.T), 0.5 * (Br + Br.T))
    return vals, Q @ vecs


def lobpcg_route(p: Pencil, block: int = 4, tol: float = 1e-11, maxiter: int = 2000,
                 seed: int = 1) -> EigenResult:
    """Smallest eigenvalue by LOBPCG; constraints become B-orthogonality to B^{-1} C^T."""
    rng = np.random.default_rng(seed)
    Y = None
    if len(p.constraints):
        Bsys = LinearSystem(p.B, np.zeros((0, p.size)), p.prolongation, "target")
        Y = np.column_stack([Bsys.solve(c, rtol=1e-14)[0] for c in p.constraints])
    X = rng.standard_normal((p.size, block))
    M = sp.diags(1.0 / p.A.diagonal())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        vals, vecs = spla.lobpcg(p.A, X, B=p.B, M=M, Y=Y, tol=tol, maxiter=maxiter, largest=False)
    # polish with Rayleigh-Ritz on the returned block
    vals, vecs = _ritz(p, p.project(vecs))
    return EigenResult(float(vals[0]), vecs[:, 0], maxiter, "lobpcg")


def smallest_eigenpair(p: Pencil, method: str = "inverse", **kw) -> EigenResult:
    if method == "inverse":
        return inverse_iteration(p, **kw)
    if method == "lobpcg":
        return lobpcg_route(p, **kw)
    raise ValueError(f"unknown eigen method {method!r}")


# -- certification --------------------------------------------------------------------------------

def certify(p: Pencil, constant: float, eigenvector: np.ndarray, n_samples: int = 200,
            seed: int = 0, squared: bool = False) -> int:
    """Count samples violating target <= (1 + 1e-8) C^2 form.

    Samples mix white noise, smooth nodal fields and perturbations of the minimizer.
    ``squared`` means ``constant`` already is C^2.
    """
    rng = np.random.default_rng(seed)
    c2 = constant if squared else constant**2
    full = p.prolongation
    nodes = full.shape[0]
    violations = 0
    for i in range(n_samples):
        kind = i % 3
        if kind == 0:
            x = rng.standard_normal(p.size)
        elif kind == 1:
            x = full.T @ _smooth_field(p, rng, nodes)
        else:
            x = eigenvector + 10.0 ** rng.uniform(-6, 0) * np.linalg.norm(eigenvector) \
                * rng.standard_normal(p.size) / math.sqrt(p.size)
        x = p.project(x[:, None])[:, 0]
        target = float(x @ (p.B @ x))
        form = float(x @ (p.A @ x))
        if target > (1.0 + 1e-8) * c2 * form:
            violations += 1
    return violations


def _smooth_field(p: Pencil, rng, nodes: int) -> np.ndarray:
    if p.mesh is None:
        return rng.standard_normal(nodes)
    coords = p.mesh.vertices
    k = rng.uniform(0.5, 4.0, size=2) * math.pi
    ph = rng.uniform(0, 2 * math.pi, size=2)
    comps = nodes // len(coords)
    vals = [np.cos(k[0] * coords[:, 0] + ph[0]) * np.cos(k[1] * coords[:, 1] + ph[1])
            * rng.standard_normal() for _ in range(comps)]
    return np.column_stack(vals).ravel() if comps > 1 else vals[0]


# -- public constants ------------------------------------------------------------------------------

def _report(mesh: Mesh, name: str, alpha, squared: bool, n_samples: int, seed: int,
            check: bool = True, tangential: bool | None = None) -> InequalityReport:
    p = pencil(mesh, name, alpha, tangential)
    res = inverse_iteration(p)
    lam = res.value
    if not lam > 0:
        raise ValueError(f"{name}: non-positive eigenvalue {lam}")
    constant = 1.0 / lam if squared else 1.0 / math.sqrt(lam)
    rep = InequalityReport(name, constant, lam, float(mesh.h), res.iterations,
                           eigenvector=p.prolongation @ res.vector, note=p.note)
    if check:
        rep.eigenvalue_check = lobpcg_route(p).value
    if n_samples:
        rep.violations = certify(p, constant, res.vector, n_samples, seed, squared)
        rep.certified = rep.violations == 0
    return rep


def poincare_wirtinger_report(mesh: Mesh, n_samples: int = 200, seed: int = 0, check: bool = True):
    return _report(mesh, "PW", None, False, n_samples, seed, check)


def poincare_wirtinger_constant(mesh: Mesh) -> float:
    """C with ||u|| <= C ||grad u|| on mean-zero u (C = lam_1^(-1/2))."""
    return poincare_wirtinger_report(mesh, n_samples=0, check=False).constant


def robin_poincare_report(mesh: Mesh, alpha=None, n_samples: int = 200, seed: int = 0,
                          check: bool = True):
    return _report(mesh, "Robin-P", alpha, True, n_samples, seed, check)


def robin_poincare_constant(mesh: Mesh, alpha=None) -> float:
    """C with ||u||^2 <= C a_alpha(u, u) on H^1 (C = 1 / lam_min)."""
    return robin_poincare_report(mesh, alpha, n_samples=0, check=False).constant


def korn_constant(mesh: Mesh, alpha=None, variant: str = "robin", n_samples: int = 200,
                  seed: int = 0, check: bool = True, tangential: bool | None = None) -> InequalityReport:
    """Korn-type constant C with ||U||_H1^2 <= C^2 (sym-grad form) on U . n = 0 fields.

    variant ``robin``: form with the boundary term (alpha not identically 0);
    ``rigid``: form without it, rotation-constrained (alpha = 0 setting);
    ``l2``: ||grad U||^2 <= C^2 (||sym grad U||^2 + ||U||^2) on all of H^1.
    ``tangential=False`` drops the U . n = 0 constraint (a larger admissible space).
    """
    name = {"robin": "Korn-Robin", "rigid": "Korn-rigid", "l2": "Korn-L2"}.get(variant)
    if name is None:
        raise ValueError(f"unknown Korn variant {variant!r}")
    return _report(mesh, name, alpha, False, n_samples, seed, check, tangential)


def rayleigh_quotient(mesh: Mesh, inequality: str, field_values: np.ndarray, alpha=None,
                      constrained: bool = True) -> float:
    """form / target of a nodal field (interleaved for vectors), optionally without constraints."""
    p = pencil(mesh, inequality, alpha)
    u = np.asarray(field_values, dtype=float).ravel()
    x = p.prolongation.T @ u
    if constrained:
        x = p.project(x[:, None])[:, 0]
    return float(x @ (p.A @ x)) / float(x @ (p.B @ x))
