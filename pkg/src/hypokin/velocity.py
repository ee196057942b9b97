"""Gauss-Hermite velocity grid, Maxwellian, collision-invariant projector and moments.

A distribution is stored by its nodal values f_k = f(v_k). Weights are stored with the
Maxwellian divided out, so ``sum(w * f)`` approximates the integral of f whenever f is a
polynomial times the Maxwellian, and the weighted inner product is ``sum(w * f * g / mu)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

DIM = 2
THETA_SCALE = math.sqrt(2 * DIM)     # normalization of the energy mode
MQ_THETA_COEFF = math.sqrt(2 / DIM)  # M_q[f] - coeff * theta * I = M_q[f_perp]


def maxwellian(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.exp(-0.5 * np.sum(v * v, axis=-1)) / (2 * math.pi) ** (DIM / 2)


@dataclass(frozen=True, eq=False)
class VelocityGrid:
    nodes: np.ndarray    # (K, 2)
    weights: np.ndarray  # (K,)
    mu: np.ndarray       # (K,)
    n_per_axis: int
    axis_nodes: np.ndarray

    @property
    def size(self) -> int:
        return len(self.nodes)

    @cached_property
    def speed2(self) -> np.ndarray:
        return np.sum(self.nodes**2, axis=1)

    @property
    def v_max(self) -> float:
        return float(np.sqrt(self.speed2.max()))

    @cached_property
    def prob(self) -> np.ndarray:
        """w * mu: the probability weights of the underlying Gauss rule."""
        return self.weights * self.mu

    @cached_property
    def norm_weights(self) -> np.ndarray:
        """w / mu: weights of the squared norm sum(w f^2 / mu)."""
        return self.weights / self.mu

    @cached_property
    def invariant_basis(self) -> np.ndarray:
        """(4, K) orthonormal basis of the collision invariants: mu, v1 mu, v2 mu, psi mu."""
        psi = (self.speed2 - DIM) / THETA_SCALE
        return np.vstack([self.mu, self.nodes[:, 0] * self.mu, self.nodes[:, 1] * self.mu, psi * self.mu])

    @cached_property
    def moment_matrix(self) -> np.ndarray:
        """(4, K): rows give rho, m1, m2, theta as weighted sums of f."""
        psi = (self.speed2 - DIM) / THETA_SCALE
        return self.weights * np.vstack([np.ones(self.size), self.nodes[:, 0], self.nodes[:, 1], psi])

    @cached_property
    def pi_matrix(self) -> np.ndarray:
        """(K, K) matrix P with (P f) = pi f for a single velocity vector f."""
        return self.invariant_basis.T @ self.moment_matrix

    @cached_property
    def p_matrix(self) -> np.ndarray:
        """(2, K): weights of M_p, p_i(v) = v_i (|v|^2 - d - 2) / sqrt(2d)."""
        return self.weights * (self.nodes.T * (self.speed2 - DIM - 2) / THETA_SCALE)

    @cached_property
    def q_matrix(self) -> np.ndarray:
        """(3, K): weights of M_q entries (11, 12, 22), q_ij = v_i v_j - delta_ij."""
        v1, v2 = self.nodes[:, 0], self.nodes[:, 1]
        return self.weights * np.vstack([v1 * v1 - 1, v1 * v2, v2 * v2 - 1])

    def inner(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Weighted inner product over the last axis."""
        return np.sum(f * g * self.norm_weights, axis=-1)


def gauss_hermite_grid(n_per_axis: int) -> VelocityGrid:
    """Tensor Gauss-Hermite grid exact for total degree <= 2 n - 1 against mu."""
    n = int(n_per_axis)
    if n < 6:
        raise ValueError("n_per_axis must be at least 6")
    x, w = hermegauss(n)
    w = w / math.sqrt(2 * math.pi)
    # symmetrize against rounding so the grid is exactly invariant under v -> -v
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    nodes = np.column_stack([X1.ravel(), X2.ravel()])
    prob = np.outer(w, w).ravel()
    mu = maxwellian(nodes)
    return VelocityGrid(nodes, prob / mu, mu, n, x)


@dataclass(frozen=True)
class MacroFields:
    rho: np.ndarray    # (C,)
    m: np.ndarray      # (C, 2)
    theta: np.ndarray  # (C,)


@dataclass(frozen=True)
class MomentFields:
    Mp: np.ndarray  # (C, 2)
    Mq: np.ndarray  # (C, 2, 2)


def _values(state) -> np.ndarray:
    return np.asarray(getattr(state, "values", state), dtype=float)


def project_pi(f_v: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """pi f along the last axis: rho mu + m.v mu + theta psi mu."""
    f_v = np.asarray(f_v, dtype=float)
    if f_v.shape[-1] != grid.size:
        raise ValueError("velocity dimension does not match the grid")
    return (f_v @ grid.moment_matrix.T) @ grid.invariant_basis


def moments(state, grid: VelocityGrid) -> MacroFields:
    f = _values(state)
    if f.shape[-1] != grid.size:
        raise ValueError("velocity dimension does not match the grid")
    mom = f @ grid.moment_matrix.T
    return MacroFields(mom[..., 0], mom[..., 1:3], mom[..., 3])


def moment_p(state, grid: VelocityGrid) -> np.ndarray:
    f = _values(state)
    if f.shape[-1] != grid.size:
        raise ValueError("velocity dimension does not match the grid")
    return f @ grid.p_matrix.T


def moment_q(state, grid: VelocityGrid) -> np.ndarray:
    f = _values(state)
    if f.shape[-1] != grid.size:
        raise ValueError("velocity dimension does not match the grid")
    q = f @ grid.q_matrix.T
    return np.stack([np.stack([q[..., 0], q[..., 1]], -1), np.stack([q[..., 1], q[..., 2]], -1)], -2)


def moment_fields(state, grid: VelocityGrid) -> MomentFields:
    return MomentFields(moment_p(state, grid), moment_q(state, grid))
