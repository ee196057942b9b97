"""Conservative collision surrogates and a checker for their structural assumptions."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg

from .velocity import VelocityGrid

KINDS = ("bgk", "mass-relax", "weak-bgk")


@dataclass(frozen=True)
class CollisionModel:
    """bgk: pi f - f;  mass-relax: rho mu - f;  weak-bgk: -(I - pi) w0^{-1} (I - pi) f,
    with w0(v) = (1 + |v|^2)^omega_exponent."""

    kind: str = "bgk"
    omega_exponent: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown collision kind {self.kind!r}")
        if not self.omega_exponent > 0:
            raise ValueError("omega exponent must be positive")

    @property
    def lam(self) -> float:
        return 1.0

    @property
    def conserves_momentum_energy(self) -> bool:
        return self.kind != "mass-relax"

    def omega0(self, speed2) -> np.ndarray:
        return (1.0 + np.asarray(speed2, dtype=float)) ** self.omega_exponent


def kernel_projector(model: CollisionModel, grid: VelocityGrid) -> np.ndarray:
    """Weighted-orthogonal projector onto the kernel (acts on a velocity vector)."""
    if model.kind == "mass-relax":
        return np.outer(grid.mu, grid.weights)
    return grid.pi_matrix


def collision_matrix(model: CollisionModel, grid: VelocityGrid) -> np.ndarray:
    """Dense K x K matrix C with (C f) = collision of f for one velocity vector."""
    return _collision_matrix(model, grid)


@lru_cache(maxsize=32)
def _collision_matrix(model: CollisionModel, grid: VelocityGrid) -> np.ndarray:
    eye = np.eye(grid.size)
    P = kernel_projector(model, grid)
    if model.kind == "weak-bgk":
        Q = eye - P
        return -Q @ (Q / model.omega0(grid.speed2)[:, None])
    return P - eye


def apply_collision(model: CollisionModel, f_v: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """Collision applied along the last axis."""
    f_v = np.asarray(f_v, dtype=float)
    P = kernel_projector(model, grid)
    if model.kind == "weak-bgk":
        perp = f_v - f_v @ P.T
        g = perp / model.omega0(grid.speed2)
        return -(g - g @ P.T)
    return f_v @ P.T - f_v


def implicit_collision_operator(model: CollisionModel, grid: VelocityGrid, tau: float) -> np.ndarray:
    """Matrix of (I - tau C)^{-1} acting on a velocity vector."""
    P = kernel_projector(model, grid)
    eye = np.eye(grid.size)
    if model.kind != "weak-bgk":
        return P + (eye - P) / (1.0 + tau)
    # symmetric positive definite in the weighted product: factor in the scaled basis
    C = collision_matrix(model, grid)
    s = np.sqrt(grid.norm_weights)
    A = eye - tau * (s[:, None] * C / s[None, :])
    A = 0.5 * (A + A.T)
    cf = scipy.linalg.cho_factor(A)
    inv = scipy.linalg.cho_solve(cf, eye)
    return inv * (s[None, :] / s[:, None])


@dataclass
class AssumptionReport:
    kind: str
    kernel_dim: int
    self_adjoint_residual: float
    spectral_gap: float
    a3_bounds: dict = field(default_factory=dict)
    weak_gap: float = float("nan")
    conservation_residual: float = 0.0
    a4_constant: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "kernel_dim": self.kernel_dim,
            "self_adjoint_residual": self.self_adjoint_residual,
            "spectral_gap": self.spectral_gap,
            "a3_bounds": dict(self.a3_bounds),
            "weak_gap": self.weak_gap,
            "conservation_residual": self.conservation_residual,
            "a4_constant": self.a4_constant,
        }


def _monomials(max_degree: int):
    for deg in range(max_degree + 1):
        for a in range(deg + 1):
            yield (a, deg - a)


def verify_assumptions(model: CollisionModel, grid: VelocityGrid, kernel_tol: float = 1e-9) -> AssumptionReport:
    """Symmetry, kernel, spectral gap, polynomial bounds and conservation of the velocity matrix."""
    C = collision_matrix(model, grid)
    s = np.sqrt(grid.norm_weights)
    S = s[:, None] * C / s[None, :]  # similar matrix, symmetric iff C is weighted-self-adjoint
    sa = float(np.abs(S - S.T).max() / max(1.0, np.abs(S).max()))
    eig = np.linalg.eigvalsh(0.5 * (S + S.T))
    neg = -eig
    kernel = neg < kernel_tol
    gap = float(neg[~kernel].min())

    bounds = {}
    v1, v2 = grid.nodes[:, 0], grid.nodes[:, 1]
    for a, b in _monomials(4):
        phi_mu = v1**a * v2**b * grid.mu
        cf = C @ phi_mu
        bounds[f"v1^{a} v2^{b}"] = float(np.sqrt(np.sum(grid.norm_weights * cf**2)))

    invariants = [np.ones(grid.size)]
    if model.conserves_momentum_energy:
        invariants += [v1, v2, grid.speed2]
    cons = max(float(np.abs((grid.weights * phi) @ C).max()) for phi in invariants)

    weak_gap = float("nan")
    a4 = float("nan")
    if model.kind == "weak-bgk":
        # -C >= lam * (I - pi) w0^{-1} (I - pi) holds with equality; the weak gap is the
        # smallest nonzero eigenvalue of -C relative to the w0^{-1}-weighted micro norm
        w0 = model.omega0(grid.speed2)
        Qs = np.eye(grid.size) - s[:, None] * kernel_projector(model, grid) / s[None, :]
        Qs = 0.5 * (Qs + Qs.T)
        weak_gap = _generalized_min(-0.5 * (S + S.T), Qs @ (Qs / w0[:, None]), Qs)
        # (A4) surrogate with w1 = w0: <C f, f>_{w1} <= a4 * ||f||^2_{w0^{-1}}
        F = w0[:, None] * S
        F = np.sqrt(w0)[:, None] * (0.5 * (F + F.T)) * np.sqrt(w0)[None, :]
        a4 = float(np.linalg.eigvalsh(0.5 * (F + F.T)).max())
    return AssumptionReport(model.kind, int(kernel.sum()), sa, gap, bounds, weak_gap, cons, a4)


def _generalized_min(A: np.ndarray, B: np.ndarray, Q: np.ndarray) -> float:
    """min <A f, f> / <B f, f> over the range of the symmetric projector Q."""
    ev, vec = np.linalg.eigh(Q)
    basis = vec[:, ev > 0.5]
    Ar = basis.T @ A @ basis
    Br = basis.T @ B @ basis
    return float(scipy.linalg.eigh(0.5 * (Ar + Ar.T), 0.5 * (Br + Br.T), eigvals_only=True).min())
