"""Modified scalar product, lemma residuals, coercivity certificates and decay fits.

The modified product adds to <f, g>_H three symmetrized cross terms built from auxiliary
elliptic solves on the macroscopic fields of f:

    X1(f, g) = <grad u[theta[f]], M_p[g]>        (Robin/Neumann Poisson, source theta)
    X2(f, g) = <sym grad U[m[f]], M_q[g]>        (Lame system, source m)
    X3(f, g) = <grad u_N[rho[f]], m[g]>          (Neumann Poisson, source rho)

    <<f, g>> = <f, g>_H + s * sum_i eta_i (X_i(f, g) + X_i(g, f)),

with eta = (eta, eta^1.5, eta^1.75) and s = 1 (strong, weak) or s = epsilon. The cross terms
are oriented so that X_i(f, -L f) + X_i(-L f, f) is the positive quantity controlling
||theta||^2, ||m||^2 and ||rho||^2 respectively.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse.linalg as spla

from .boundary import dperp_boundary_norm
from .elliptic import CompatibilityError, FEOperators, LameSolver, PoissonSolver, ScalarField, VectorField
from .transport import KineticSystem, Trajectory, make_admissible
from .velocity import MQ_THETA_COEFF, moment_p, moment_q, moments

VARIANTS = ("strong", "epsilon", "weak")
ETA_EXPONENTS = (1.0, 1.5, 1.75)
ETA_MAX = 0.5
DENSE_CELL_LIMIT = 2500
COMPAT_TOL = 1e-10


@dataclass(frozen=True)
class HypoParams:
    eta: float
    epsilon: float = 1.0
    variant: str = "strong"

    def __post_init__(self):
        # eta = 0 is allowed as the degenerate plain product
        if not 0.0 <= self.eta < 1.0:
            raise ValueError("eta must lie in [0, 1)")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def etas(self) -> np.ndarray:
        return np.array([self.eta**p for p in ETA_EXPONENTS])

    @property
    def cross_scale(self) -> float:
        return self.epsilon if self.variant == "epsilon" else 1.0

    @property
    def weights(self) -> np.ndarray:
        """Coefficients multiplying the three symmetrized cross terms."""
        return self.cross_scale * self.etas


# -- auxiliary elliptic solves ---------------------------------------------------------

@dataclass
class AuxSolutions:
    u_theta: ScalarField
    U_m: VectorField
    u_rho: ScalarField
    grad_theta: np.ndarray   # (cells, 2)
    sym_U: np.ndarray        # (cells, 2, 2)
    grad_rho: np.ndarray     # (cells, 2)


class AuxOperators:
    """The three auxiliary problems on one mesh, assembled once and reused.

    For meshes up to ``DENSE_CELL_LIMIT`` cells the maps from cellwise sources to cellwise
    gradients are formed densely, which makes many repeated evaluations cheap.
    """

    def __init__(self, system: KineticSystem, dense: bool | None = None):
        self.system = system
        mesh = system.mesh
        self.mesh = mesh
        self.fe = FEOperators(mesh)
        self.theta_solver = PoissonSolver(mesh)
        self.lame_solver = LameSolver(mesh)
        self.rho_solver = PoissonSolver(mesh.with_alpha(0.0))
        self.dense = mesh.n_cells <= DENSE_CELL_LIMIT if dense is None else bool(dense)

    # compatibility ------------------------------------------------------------------
    def _check_mean(self, xi: np.ndarray, name: str) -> None:
        a = self.mesh.cell_areas
        total = xi @ a
        scale = np.maximum(np.abs(xi) @ a, 1.0)
        bad = np.abs(total) > COMPAT_TOL * scale
        if np.any(bad):
            raise CompatibilityError(f"{name} source has nonzero mean {float(np.max(np.abs(total))):.3e}")

    def _check_rotation(self, m: np.ndarray) -> None:
        rigid = self.lame_solver.rigid
        if len(self.lame_solver.system.constraints) == 0:
            return
        a = self.mesh.cell_areas
        x = self.mesh.cell_centroids
        for A in rigid.basis:
            r = x @ A.T
            s = np.einsum("c,cj,...cj->...", a, r, m)
            scale = np.maximum(np.einsum("c,...cj->...", a, np.abs(m)), 1.0)
            if np.any(np.abs(s) > COMPAT_TOL * scale):
                raise CompatibilityError(f"momentum not orthogonal to the rigid rotation ({float(np.max(np.abs(s))):.3e})")

    def check(self, rho, m, theta) -> None:
        self._check_mean(rho, "rho")
        if self.theta_solver.neumann:
            self._check_mean(theta, "theta")
        self._check_rotation(m)

    # dense maps ---------------------------------------------------------------------
    @cached_property
    def _green(self):
        G = self.fe.gradients                                  # (cells, 3, 2)
        tri = self.mesh.triangles

        def grad_map(sol):                                     # nodal rows -> (cells, 2, cols)
            return np.einsum("cak,cab->ckb", G, sol[tri])

        g_theta = grad_map(self.theta_solver.solution_operator())
        g_rho = grad_map(self.rho_solver.solution_operator())
        S = self.lame_solver.solution_operator()               # (2 nv, 2 nc)
        Sv = S.reshape(self.mesh.n_vertices, 2, -1)            # node, component, source
        dU = np.einsum("cak,caib->cikb", G, Sv[tri])           # cell, comp i, deriv k, source
        sym = 0.5 * (dU + np.swapaxes(dU, 1, 2))
        return g_theta, sym, g_rho

    # evaluation ---------------------------------------------------------------------
    def gradients(self, f: np.ndarray, check: bool = True):
        """Cell gradients (grad u[theta], sym grad U[m], grad u_N[rho]) for f of shape
        (cells, velocities) or a batch (samples, cells, velocities)."""
        mac = moments(f, self.system.grid)
        if check:
            self.check(mac.rho, mac.m, mac.theta)
        if not self.dense:
            if np.ndim(f) == 3:
                outs = [self.gradients(fi, check=False) for fi in f]
                return tuple(np.stack(z) for z in zip(*outs))
            aux = self.solve(f, check=False, diagnostics=False)
            return aux.grad_theta, aux.sym_U, aux.grad_rho
        g_theta, sym, g_rho = self._green
        gt = np.einsum("ckb,...b->...ck", g_theta, mac.theta)
        gr = np.einsum("ckb,...b->...ck", g_rho, mac.rho)
        su = np.einsum("cikb,...b->...cik", sym, mac.m.reshape(mac.m.shape[:-2] + (-1,)))
        return gt, su, gr

    def solve(self, f: np.ndarray, check: bool = True, diagnostics: bool = True) -> AuxSolutions:
        """Three iterative elliptic solves on the macroscopic fields of f."""
        mac = moments(f, self.system.grid)
        if check:
            self.check(mac.rho, mac.m, mac.theta)
        a = self.mesh.cell_areas
        theta = mac.theta
        if self.theta_solver.neumann:
            theta = theta - a @ theta
        rho = mac.rho - a @ mac.rho
        ut = self.theta_solver.solve(theta, diagnostics)
        um = self.lame_solver.solve(self._rotation_free(mac.m), diagnostics)
        ur = self.rho_solver.solve(rho, diagnostics)
        return AuxSolutions(ut, um, ur, self.fe.cell_gradient(ut.values),
                            self.lame_solver.vfe.sym_gradient(um.values), self.fe.cell_gradient(ur.values))

    def _rotation_free(self, m: np.ndarray) -> np.ndarray:
        if len(self.lame_solver.system.constraints) == 0:
            return m
        a = self.mesh.cell_areas[:, None]
        x = self.mesh.cell_centroids
        for A in self.lame_solver.rigid.basis:
            r = x @ A.T
            m = m - r * np.sum(a * m * r) / np.sum(a * r * r)
        return m

    # H^{-1} dual norm ---------------------------------------------------------------
    @cached_property
    def _h1_lu(self):
        return spla.splu((self.fe.stiffness + self.fe.mass).tocsc())

    def dual_norm(self, r: np.ndarray) -> float:
        """sup <r, w> / ||w||_{H^1} over P1 functions w, for a cellwise r (cells,) or (cells, k)."""
        r = np.asarray(r, dtype=float).reshape(self.mesh.n_cells, -1)
        b = self.fe.cell_to_node @ r
        z = self._h1_lu.solve(b)
        return math.sqrt(max(float(np.sum(b * z)), 0.0))


def solve_aux(system: KineticSystem, f: np.ndarray, aux: AuxOperators | None = None) -> AuxSolutions:
    return (aux or AuxOperators(system, dense=False)).solve(np.asarray(getattr(f, "values", f)))


# -- scalar product -------------------------------------------------------------------

def _cross_terms(aux: AuxOperators, grads, g: np.ndarray) -> np.ndarray:
    """(..., 3) values X_i(f, g) given the gradients of f."""
    gt, su, gr = grads
    grid = aux.system.grid
    a = aux.mesh.cell_areas
    mp = moment_p(g, grid)
    mq = moment_q(g, grid)
    m = moments(g, grid).m
    x1 = np.einsum("c,...ck,...ck->...", a, gt, mp)
    x2 = np.einsum("c,...cij,...cij->...", a, su, mq)
    x3 = np.einsum("c,...ck,...ck->...", a, gr, m)
    return np.stack([x1, x2, x3], axis=-1)


def cross_terms(aux: AuxOperators, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Symmetrized cross terms X_i(f, g) + X_i(g, f), shape (3,) or (samples, 3)."""
    return _cross_terms(aux, aux.gradients(f), g) + _cross_terms(aux, aux.gradients(g), f)


def hypo_inner(f: np.ndarray, g: np.ndarray, params: HypoParams, aux: AuxOperators) -> float:
    f = np.asarray(getattr(f, "values", f), dtype=float)
    g = np.asarray(getattr(g, "values", g), dtype=float)
    base = aux.system.inner(f, g)
    if params.eta == 0.0:
        return base
    return float(base + params.weights @ cross_terms(aux, f, g))


def lyapunov_functional(params: HypoParams, aux: AuxOperators) -> Callable[[np.ndarray], float]:
    return lambda f: hypo_inner(f, f, params, aux)


# -- norms --------------------------------------------------------------------------------

def weighted_norm2(system: KineticSystem, f: np.ndarray, weight: np.ndarray) -> float:
    """sum_K |K| sum_k w_k weight_k f^2 / mu_k."""
    return float(np.sum(system.areas[:, None] * (system.grid.norm_weights * weight) * f * f))


def h0_norm2(system: KineticSystem, f: np.ndarray) -> float:
    return weighted_norm2(system, f, 1.0 / system.model.omega0(system.grid.speed2))


def h1_norm2(system: KineticSystem, f: np.ndarray, omega1: Callable | None = None) -> float:
    w1 = (omega1 or system.model.omega0)(system.grid.speed2)
    return weighted_norm2(system, f, w1)


def micro_part(system: KineticSystem, f: np.ndarray) -> np.ndarray:
    return f - f @ system.grid.pi_matrix.T


# -- lemma residuals ------------------------------------------------------------------

def _centered_divergence(system: KineticSystem, F: np.ndarray, wall: np.ndarray) -> np.ndarray:
    """Finite-volume divergence of cellwise vector fields F (cells, k, 2) with centered
    interior fluxes and prescribed outward wall fluxes (boundary edges, k)."""
    mesh = system.mesh
    L, R = mesh.interior_left, mesh.interior_right
    face = mesh.interior_lengths[:, None] * np.einsum("ekj,ej->ek", 0.5 * (F[L] + F[R]), mesh.interior_normals)
    div = np.zeros(F.shape[:2])
    np.add.at(div, L, face)
    np.subtract.at(div, R, face)
    np.add.at(div, mesh.boundary_cells, wall)
    return div / system.areas[:, None]


def _wall_fluxes(system: KineticSystem, f: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Outward flux length * sum_k w_k (n.v_k) phi_k gamma f_k per boundary edge, for the
    trace gamma f made of the upwind cell values (outgoing) and the reflected values (incoming)."""
    mesh, grid = system.mesh, system.grid
    vn = mesh.boundary_normals @ grid.nodes.T
    out = np.empty((len(mesh.boundary_cells), phi.shape[1]))
    for e, op in enumerate(system.boundary.edges):
        g = np.zeros(grid.size)
        g_out = f[mesh.boundary_cells[e], op.out_idx]
        g[op.out_idx] = g_out
        g[op.in_idx] = op.reflect @ g_out
        out[e] = mesh.boundary_lengths[e] * ((grid.weights * vn[e] * g) @ phi)
    return out


@dataclass
class LemmaResiduals:
    micro_gap: float
    dissipation: float                       # <-L f, f>_H
    boundary_dissipation: float              # ||sqrt(alpha(2 - alpha)) D_perp f_+||^2
    identity_l2: dict = field(default_factory=dict)
    identity_dual: dict = field(default_factory=dict)
    Mpf: float = 0.0
    Mqf: float = 0.0
    lemma_terms: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "micro_gap": self.micro_gap,
            "dissipation": self.dissipation,
            "boundary_dissipation": self.boundary_dissipation,
            "identity_l2": dict(self.identity_l2),
            "identity_dual": dict(self.identity_dual),
            "Mpf": self.Mpf,
            "Mqf": self.Mqf,
            "lemma_terms": {k: dict(v) for k, v in self.lemma_terms.items()},
        }


def lemma_diagnostics(system: KineticSystem, f, aux: AuxOperators | None = None) -> LemmaResiduals:
    """Evaluate the microscopic, identity and macroscopic-control statements on one state (eps = 1)."""
    f = np.asarray(getattr(f, "values", f), dtype=float)
    aux = aux or AuxOperators(system)
    grid = system.grid
    a = system.areas
    Lf = system.generator(f, 1.0)
    perp = micro_part(system, f)
    diss = -system.inner(Lf, f)
    bdiss = dperp_boundary_norm(system.boundary, f)
    if system.model.kind == "weak-bgk":
        perp2 = h0_norm2(system, perp)
    else:
        perp2 = system.norm(perp) ** 2
    micro_gap = diss - system.model.lam * perp2 - 0.5 * bdiss

    # conservation identities phi[L f] = -div int phi v f
    v = grid.nodes
    psi = (grid.speed2 - 2.0) / 2.0
    identities = {"rhoLf": np.ones((grid.size, 1)), "thetaLf": psi[:, None], "mLf": v}
    l2, dual = {}, {}
    for name, phi in identities.items():
        lhs = (Lf * grid.weights) @ phi                                   # (cells, k)
        F = np.einsum("ck,kp,kj->cpj", f * grid.weights, phi, v)          # (cells, k, 2)
        r = lhs + _centered_divergence(system, F, _wall_fluxes(system, f, phi))
        l2[name] = math.sqrt(float(np.sum(a[:, None] * r * r)))
        dual[name] = aux.dual_norm(r)

    mac = moments(f, grid)
    mpf = float(np.abs(moment_p(f, grid) - moment_p(perp, grid)).max())
    mq = moment_q(f, grid) - MQ_THETA_COEFF * mac.theta[:, None, None] * np.eye(2)
    mqf = float(np.abs(mq - moment_q(perp, grid)).max())

    nr = math.sqrt(float(a @ mac.rho**2))
    nm = math.sqrt(float(np.sum(a[:, None] * mac.m**2)))
    nt = math.sqrt(float(a @ mac.theta**2))
    npp = system.norm(perp)
    lhs = cross_terms(aux, f, -Lf)
    terms = {
        "energy": {"lhs": float(lhs[0]), "controlled": nt**2,
                   "allowed": nm * npp + npp**2 + bdiss},
        "momentum": {"lhs": float(lhs[1]), "controlled": nm**2,
                     "allowed": nr * npp + nr * nt + nt**2 + npp**2 + bdiss},
        "mass": {"lhs": float(lhs[2]), "controlled": nr**2,
                 "allowed": nm**2 + nt**2 + npp**2 + bdiss},
    }
    return LemmaResiduals(micro_gap, diss, bdiss, l2, dual, mpf, mqf, terms)


def lemma_margins(reports: Sequence[LemmaResiduals], kappas: dict | None = None) -> dict:
    """Empirical constants for the three macroscopic-control lemmas.

    For each lemma, kappa defaults to half the median of lhs / controlled over the states;
    C is the smallest constant with lhs - kappa * controlled + C * allowed >= 0 on every
    state, and the margin is the minimum of that expression (>= 0 by construction of C).
    """
    out = {}
    for name in ("energy", "momentum", "mass"):
        lhs = np.array([r.lemma_terms[name]["lhs"] for r in reports])
        q = np.array([r.lemma_terms[name]["controlled"] for r in reports])
        A = np.array([r.lemma_terms[name]["allowed"] for r in reports])
        if kappas and name in kappas:
            kappa = float(kappas[name])
        else:
            ok = q > 1e-14
            kappa = 0.5 * float(np.median(lhs[ok] / q[ok])) if np.any(ok) else 0.0
        deficit = np.maximum(kappa * q - lhs, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            need = np.where(deficit > 0, deficit / np.where(A > 0, A, np.nan), 0.0)
        C = float(np.nanmax(need)) if np.any(np.isfinite(need)) else float("inf")
        if np.any((deficit > 0) & (A <= 0)):
            C = float("inf")
        margin = float(np.min(lhs - kappa * q + C * A)) if math.isfinite(C) else float("-inf")
        out[name] = {"kappa": kappa, "C": C, "margin": margin, "n_states": len(reports)}
    return out


# -- samples ----------------------------------------------------------------------------

SAMPLE_KINDS = ("random", "macro", "mixed", "evolved", "local")
LOCAL_WIDTH = (0.05, 0.25)
EVOLVE_TIME = (0.1, 3.0)


def _smooth_fields(system: KineticSystem, rng: np.random.Generator, n_fields: int, n_modes: int = 4,
                   k_max: float = 2 * math.pi) -> np.ndarray:
    """Random superpositions of plane waves with wavenumber magnitude uniform in [0, k_max]."""
    x = system.mesh.cell_centroids
    out = np.zeros((len(x), n_fields))
    for j in range(n_fields):
        for _ in range(n_modes):
            phi = rng.uniform(0, 2 * math.pi)
            k = rng.uniform(0, k_max) * np.array([math.cos(phi), math.sin(phi)])
            out[:, j] += rng.standard_normal() * np.cos(x @ k + rng.uniform(0, 2 * math.pi))
    return out


def sample_states(system: KineticSystem, n: int, rng: np.random.Generator,
                  kinds: Sequence[str] = SAMPLE_KINDS, epsilon: float = 1.0) -> np.ndarray:
    """n admissible unit-norm states cycling through ``kinds``.

    random: white noise in x and v; macro: smooth random rho, m, theta; mixed: smooth macro
    part plus a smooth microscopic part; evolved: a macro or mixed state advanced by a random
    number of scheme steps, which concentrates it on the slowly decaying modes; local: one
    macroscopic field (rho, m_1, m_2 or theta) in a Gaussian bump at a random cell, the
    states the transport barely dissipates.
    """
    from .transport import KineticState, step

    for k in kinds:
        if k not in SAMPLE_KINDS:
            raise ValueError(f"unknown sample kind {k!r}")
    grid = system.grid
    basis = grid.invariant_basis
    micro_basis = np.eye(grid.size) - grid.pi_matrix
    out = np.empty((n,) + system.shape)
    dt = system.dt_max(epsilon, 0.5)
    for i in range(n):
        kind = kinds[i % len(kinds)]
        if kind == "random":
            f = rng.standard_normal(system.shape) * grid.mu
        elif kind == "local":
            x = system.mesh.cell_centroids
            r2 = np.sum((x - x[rng.integers(len(x))]) ** 2, axis=1)
            f = np.exp(-0.5 * r2 / rng.uniform(*LOCAL_WIDTH) ** 2)[:, None] * basis[rng.integers(4)]
        else:
            f = _smooth_fields(system, rng, 4) @ basis
            if kind in ("mixed", "evolved") and rng.random() < 0.7:
                coeff = _smooth_fields(system, rng, 6, n_modes=2)
                vel = rng.standard_normal((6, grid.size)) * grid.mu @ micro_basis.T
                f = f + rng.uniform(0.1, 1.0) * (coeff @ vel)
            if kind == "evolved":
                f = make_admissible(system, f)
                f = f / system.norm(f)
                state = KineticState(f, 0.0, epsilon)
                for _ in range(int(math.ceil(rng.uniform(*EVOLVE_TIME) / dt))):
                    state = step(system, state, dt)
                f = state.values
        f = make_admissible(system, f)
        out[i] = f / system.norm(f)
    return out


# -- coercivity certificate ---------------------------------------------------------------

@dataclass
class SampleForms:
    """eta-independent pieces of the certificate quotient, one entry per sample."""

    epsilon: float
    variant: str
    dissipation: np.ndarray    # <-L f, f>_H
    cross: np.ndarray          # (S, 3) X_i(f, -L f) + X_i(-L f, f)
    norm2: np.ndarray          # ||f||_H^2
    self_cross: np.ndarray     # (S, 3) 2 X_i(f, f)
    perp2: np.ndarray          # ||f_perp||_H^2
    h02: np.ndarray            # ||f||_{H_0}^2

    def numerator(self, eta: float) -> np.ndarray:
        p = HypoParams(eta, self.epsilon, self.variant)
        return self.dissipation + self.cross @ p.weights

    def lyapunov(self, eta: float) -> np.ndarray:
        p = HypoParams(eta, self.epsilon, self.variant)
        return self.norm2 + self.self_cross @ p.weights

    def quotient(self, eta: float) -> np.ndarray:
        num = self.numerator(eta)
        lyap = self.lyapunov(eta)
        if self.variant == "weak":
            den = self.h02
        elif self.variant == "epsilon":
            den = lyap + self.perp2 / self.epsilon**2
        else:
            den = lyap
        # an indefinite modified form gives no certificate
        return np.where(lyap > 0, num / den, -np.inf)

    def bracket(self, eta: float) -> tuple[float, float]:
        r = self.lyapunov(eta) / self.norm2
        return float(r.min()), float(r.max())


def sample_forms(system: KineticSystem, aux: AuxOperators, samples: np.ndarray, epsilon: float = 1.0,
                 variant: str = "strong") -> SampleForms:
    samples = np.asarray(samples, dtype=float)
    Lf = np.stack([system.generator(f, epsilon) for f in samples])
    w = system.areas[:, None] * system.grid.norm_weights
    diss = -np.einsum("sck,ck,sck->s", Lf, w, samples)
    cross = cross_terms(aux, samples, -Lf)
    self_cross = 2.0 * _cross_terms(aux, aux.gradients(samples), samples)
    norm2 = np.einsum("sck,ck,sck->s", samples, w, samples)
    perp = samples - samples @ system.grid.pi_matrix.T
    perp2 = np.einsum("sck,ck,sck->s", perp, w, perp)
    w0 = w / system.model.omega0(system.grid.speed2)
    h02 = np.einsum("sck,ck,sck->s", samples, w0, samples)
    return SampleForms(epsilon, variant, diss, cross, norm2, self_cross, perp2, h02)


@dataclass
class CertificateReport:
    kappa: float
    eta: float
    variant: str
    epsilons: list
    n_samples: int
    kappa_plain: float                      # eta = 0
    eta_max: float                          # largest eta with positive certificate
    bracket: tuple                          # min / max of |||f|||^2 / ||f||^2
    per_epsilon: dict = field(default_factory=dict)
    per_kind: dict = field(default_factory=dict)
    sweep: list = field(default_factory=list)
    worst_index: int = -1
    worst_state: np.ndarray | None = field(default=None, repr=False)

    @property
    def certified(self) -> bool:
        return self.kappa > 0

    def to_dict(self) -> dict:
        return {
            "kappa": self.kappa,
            "eta": self.eta,
            "etas": HypoParams(self.eta).etas.tolist(),
            "variant": self.variant,
            "epsilons": list(self.epsilons),
            "n_samples": self.n_samples,
            "kappa_plain": self.kappa_plain,
            "eta_max": self.eta_max,
            "bracket": list(self.bracket),
            "certified": self.certified,
            "per_epsilon": {str(k): v for k, v in self.per_epsilon.items()},
            "per_kind": dict(self.per_kind),
            "sweep": [list(p) for p in self.sweep],
            "worst_index": self.worst_index,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def certificate_value(forms: Sequence[SampleForms], eta: float) -> float:
    return min(float(fm.quotient(eta).min()) for fm in forms)


def sweep_eta(forms: Sequence[SampleForms], eta_max: float = ETA_MAX, n_grid: int = 40,
              bisection_steps: int = 50) -> tuple[float, float, list]:
    """(eta*, eta_max_positive, table): bisection for the largest eta in (0, eta_max] with a
    positive certificate, then the eta maximizing the certificate on a geometric grid below it."""
    grid = np.geomspace(1e-5, eta_max, n_grid)
    values = [certificate_value(forms, e) for e in grid]
    table = list(zip(grid.tolist(), values))
    positive = [e for e, k in table if k > 0]
    if not positive:
        return 0.0, 0.0, table
    if values[-1] > 0:
        top = float(eta_max)
    else:
        # bisect on the sign between the last positive grid point and the next one
        i = max(i for i, k in enumerate(values) if k > 0)
        lo, hi = grid[i], grid[i + 1]
        for _ in range(bisection_steps):
            mid = 0.5 * (lo + hi)
            if certificate_value(forms, mid) > 0:
                lo = mid
            else:
                hi = mid
        top = float(lo)
    fine = np.geomspace(1e-5, top, n_grid)
    best = max(fine, key=lambda e: certificate_value(forms, e))
    return float(best), top, table


def coercivity_certificate(system: KineticSystem, eta: float | str = "auto", n_samples: int = 200,
                           seed: int = 0, variant: str = "strong", epsilons: Iterable[float] = (1.0,),
                           aux: AuxOperators | None = None, samples: np.ndarray | None = None,
                           kinds: Sequence[str] = SAMPLE_KINDS) -> CertificateReport:
    """Minimum over admissible samples of the coercivity quotient, with an optional eta sweep.

    strong:  <<-L f, f>> / |||f|||^2
    epsilon: <<-L_eps f, f>>_eps / (|||f|||_eps^2 + ||f_perp||^2 / eps^2), minimized over eps too
    weak:    <<-L f, f>> / ||f||_{H_0}^2
    """
    if n_samples < 100 and samples is None:
        raise ValueError("at least 100 samples are required")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    epsilons = [float(e) for e in epsilons] if variant == "epsilon" else [1.0]
    aux = aux or AuxOperators(system)
    rng = np.random.default_rng(seed)
    if samples is None:
        samples = sample_states(system, n_samples, rng, kinds)
    forms = [sample_forms(system, aux, samples, e, variant) for e in epsilons]

    if eta == "auto":
        eta_star, eta_top, table = sweep_eta(forms)
    else:
        eta_star = float(eta)
        HypoParams(eta_star)
        eta_top, table = float("nan"), []
    kappa = certificate_value(forms, eta_star)
    per_eps = {e: float(fm.quotient(eta_star).min()) for e, fm in zip(epsilons, forms)}
    lo = min(fm.bracket(eta_star)[0] for fm in forms)
    hi = max(fm.bracket(eta_star)[1] for fm in forms)
    q = np.min([fm.quotient(eta_star) for fm in forms], axis=0)
    worst = int(np.argmin(q))
    n_kinds = len(kinds)
    per_kind = {k: float(q[i::n_kinds].min()) for i, k in enumerate(kinds) if len(q[i::n_kinds])}
    return CertificateReport(kappa, eta_star, variant, epsilons, len(samples),
                             certificate_value(forms, 0.0), eta_top, (lo, hi), per_eps, per_kind,
                             table, worst, samples[worst].copy())


def norm_equivalence(system: KineticSystem, aux: AuxOperators, samples: np.ndarray, eta: float,
                     epsilons: Iterable[float]) -> dict:
    """Sampled min / max of |||f|||_eps^2 / ||f||^2 for each epsilon."""
    out = {}
    g = aux.gradients(samples)
    sc = 2.0 * _cross_terms(aux, g, samples)
    w = system.areas[:, None] * system.grid.norm_weights
    n2 = np.einsum("sck,ck,sck->s", samples, w, samples)
    for e in epsilons:
        p = HypoParams(eta, e, "epsilon")
        r = (n2 + sc @ p.weights) / n2
        out[float(e)] = (float(r.min()), float(r.max()))
    return out


# -- decay fits ------------------------------------------------------------------------------

@dataclass
class DecayReport:
    kappa: float
    C: float
    r2: float
    window: tuple
    n_points: int
    envelope: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kappa": self.kappa, "C": self.C, "r2": self.r2, "window": list(self.window),
                "n_points": self.n_points, "envelope": dict(self.envelope)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _series(trajectory, norms=None):
    if isinstance(trajectory, Trajectory):
        return trajectory.column("t"), trajectory.column("H_norm")
    return np.asarray(trajectory, dtype=float), np.asarray(norms, dtype=float)


def fit_decay(trajectory, norms=None, window: tuple | None = None, transient: float = 0.1,
              min_points: int = 20, floor: float = 1e-10) -> DecayReport:
    """Least-squares fit log||f(t)|| = log C - kappa t on the window (default: drop the first
    ``transient`` fraction of the run). Samples below ``floor`` times the largest norm are
    treated as round-off and left out."""
    t, y = _series(trajectory, norms)
    if window is None:
        window = (t[0] + transient * (t[-1] - t[0]), t[-1])
    sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    if floor > 0 and np.any(y > 0):
        sel &= ~((y > 0) & (y < floor * np.max(y)))
    if sel.sum() < min_points:
        raise ValueError(f"only {int(sel.sum())} samples in the fit window (need {min_points})")
    ts, ys = t[sel], y[sel]
    if np.any(ys <= 0):
        raise ValueError("non-positive norms in the fit window")
    ly = np.log(ys)
    slope, intercept = np.polyfit(ts, ly, 1)
    resid = ly - (slope * ts + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot <= 1e-300 or ss_res <= 1e-28 * max(ss_tot, 1.0) else 1.0 - ss_res / ss_tot
    kappa = -float(slope)
    if abs(kappa) < 1e-14:
        kappa = 0.0
    return DecayReport(kappa, float(math.exp(intercept)), r2, (float(window[0]), float(window[1])),
                       int(sel.sum()))


def log_slopes(t: np.ndarray, y: np.ndarray, n_windows: int = 8) -> np.ndarray:
    """Least-squares slope of log y on consecutive equal windows."""
    t, y = np.asarray(t, dtype=float), np.asarray(y, dtype=float)
    edges = np.linspace(t[0], t[-1], n_windows + 1)
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        s = (t >= a) & (t <= b)
        out.append(np.polyfit(t[s], np.log(y[s]), 1)[0])
    return np.array(out)


# -- weak coercivity ---------------------------------------------------------------------------

def radial_weight(desc) -> Callable[[np.ndarray], np.ndarray]:
    """Radial weight from a callable of R or an exponent s meaning (1 + R^2)^s."""
    if callable(desc):
        return desc
    s = float(desc)
    if s <= 0:
        raise ValueError("weight exponent must be positive")
    return lambda R: (1.0 + np.asarray(R, dtype=float) ** 2) ** s


def weak_envelope(t, omega0_desc=1.0, omega1_desc=None, c: float = 1.0, kappa: float = 1.0,
                  C: float = 1.0, r_max: float = 1e3, n_r: int = 4000):
    """theta(t) = (min_R exp(-c kappa t / w0(R)) + C / (c w1(R)))^(1/2) over a geometric
    R grid on [1, r_max]."""
    w0 = radial_weight(omega0_desc)
    w1 = radial_weight(omega0_desc if omega1_desc is None else omega1_desc)
    R = np.geomspace(1.0, r_max, n_r)
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    vals = np.exp(-c * kappa * t_arr[:, None] / w0(R)[None, :]) + C / (c * w1(R))[None, :]
    out = np.sqrt(vals.min(axis=1))
    return float(out[0]) if np.ndim(t) == 0 else out


def interpolation_gap(system: KineticSystem, f: np.ndarray, R: float, omega1: Callable | None = None) -> float:
    """||f||_H^2 - (w0(R) ||f||_{H_0}^2 + ||f||_{H_1}^2 / w1(R)); non-positive for every R."""
    w0 = system.model.omega0
    w1 = omega1 or w0
    R2 = float(R) ** 2
    return (system.norm(f) ** 2 - (float(w0(R2)) * h0_norm2(system, f)
                                   + h1_norm2(system, f, w1) / float(w1(R2))))


def envelope_constant(times: np.ndarray, norms: np.ndarray, theta: np.ndarray, h1_initial: float) -> float:
    """Smallest C' with ||f(t)|| <= C' theta(t) ||f_in||_{H_1} at every sample."""
    return float(np.max(np.asarray(norms) / (np.asarray(theta) * h1_initial)))


def weighted_perp_integral(trajectory: Trajectory, kappa: float, epsilon: float) -> float:
    """(1/eps^2) sum_n dt ||f_perp(t_n)||^2 exp(2 kappa t_n) over the recorded rows (left rule)."""
    t = trajectory.column("t")
    p = trajectory.column("Hperp_norm")
    dt = np.diff(t)
    return float(np.sum(dt * p[:-1] ** 2 * np.exp(2 * kappa * t[:-1])) / epsilon**2)
