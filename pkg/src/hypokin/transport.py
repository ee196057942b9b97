"""Upwind finite-volume transport with Maxwell walls and implicit collisions.

A state is a (cells, velocities) array. The scheme advances

    df/dt = -(1/eps) T f + (1/eps^2) C f

by an explicit upwind step for T followed by an exact implicit step for C. T is assembled
once as a sparse matrix on the flattened index cell * n_v + k; the wall ghost values are a
linear function of the outgoing trace, so they enter T as dense edge blocks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .boundary import BoundaryOperator, build_boundary, correction_magnitude, dperp_boundary_norm
from .collision import CollisionModel, implicit_collision_operator
from .geometry import Mesh, rigid_fields
from .velocity import VelocityGrid, moments

CSV_COLUMNS = ("t", "H_norm", "Hperp_norm", "rho_L2", "m_L2", "theta_L2", "lyap", "boundary_diss",
               "mass_residual", "energy_residual", "angmom_residual", "correction_mag")
INITIAL_KINDS = ("zero", "equilibrium", "random", "rho-bump", "shear", "theta-bump",
                 "boundary-layer", "rotation")


class CFLViolation(ValueError):
    pass


class BlowUp(FloatingPointError):
    pass


@dataclass
class KineticState:
    values: np.ndarray  # (cells, velocities)
    time: float = 0.0
    epsilon: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("state values must be a cells x velocities array")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite state")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")


@dataclass
class RunConfig:
    t_end: float
    epsilon: float = 1.0
    cfl: float = 0.5
    record_every: int = 10
    collision: CollisionModel = field(default_factory=CollisionModel)
    initial_condition: dict = field(default_factory=lambda: {"kind": "random"})

    def __post_init__(self):
        if not 0.0 < self.cfl < 1.0:
            raise ValueError("cfl must lie in (0, 1)")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        if not self.t_end >= 0.0:
            raise ValueError("t_end must be non-negative")
        if self.record_every < 1:
            raise ValueError("record_every must be positive")


class KineticSystem:
    """Mesh, velocity grid, walls and collision model with the assembled transport matrix."""

    def __init__(self, mesh: Mesh, grid: VelocityGrid, model: CollisionModel | None = None,
                 boundary: BoundaryOperator | None = None, specular: str = "isometric"):
        self.mesh = mesh
        self.grid = grid
        self.model = model or CollisionModel()
        self.boundary = boundary or build_boundary(mesh, grid, specular)
        self.rigid = rigid_fields(mesh)
        self.areas = mesh.cell_areas
        self.shape = (mesh.n_cells, grid.size)

    # -- inner products -------------------------------------------------------------
    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        """<f, g>_H = sum_K |K| sum_k w_k f g / mu_k."""
        return float(np.sum(self.areas[:, None] * self.grid.norm_weights * f * g))

    def norm(self, f: np.ndarray) -> float:
        return math.sqrt(max(self.inner(f, f), 0.0))

    # -- transport ------------------------------------------------------------------
    @cached_property
    def transport_matrix(self) -> sp.csr_matrix:
        mesh, grid = self.mesh, self.grid
        nv = grid.size
        inv_area = 1.0 / self.areas
        rows, cols, vals = [], [], []

        L, R = mesh.interior_left, mesh.interior_right
        vn = mesh.interior_normals @ grid.nodes.T                    # (edges, nv)
        flux = mesh.interior_lengths[:, None] * vn
        up_left = vn > 0
        src = np.where(up_left, L[:, None], R[:, None])              # upwind cell
        k = np.broadcast_to(np.arange(nv), vn.shape)
        for cell, sign in ((L, 1.0), (R, -1.0)):
            rows.append((cell[:, None] * nv + k).ravel())
            cols.append((src * nv + k).ravel())
            vals.append((sign * flux * inv_area[cell][:, None]).ravel())

        vb = mesh.boundary_normals @ grid.nodes.T
        for e, op in enumerate(self.boundary.edges):
            K = mesh.boundary_cells[e]
            scale = mesh.boundary_lengths[e] * inv_area[K]
            rows.append(K * nv + op.out_idx)
            cols.append(K * nv + op.out_idx)
            vals.append(scale * vb[e, op.out_idx])
            block = scale * vb[e, op.in_idx][:, None] * op.reflect
            i, j = np.nonzero(np.abs(block) > 1e-300)
            rows.append(K * nv + op.in_idx[i])
            cols.append(K * nv + op.out_idx[j])
            vals.append(block[i, j])
        n = mesh.n_cells * nv
        T = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))
        return T.tocsr()

    def transport(self, f: np.ndarray) -> np.ndarray:
        """T f, the discrete v . grad f including the wall closure."""
        return (self.transport_matrix @ f.ravel()).reshape(self.shape)

    def dt_max(self, epsilon: float, cfl: float = 1.0) -> float:
        return cfl * epsilon * self.mesh.h_min / self.grid.v_max

    # -- conserved quantities -------------------------------------------------------
    @property
    def conserves_energy(self) -> bool:
        return self.mesh.alpha_is_zero and self.model.conserves_momentum_energy

    @cached_property
    def rotation_modes(self) -> list[np.ndarray]:
        """(A x) . v mu for each rigid-field generator A, as cells x velocities arrays."""
        if not self.mesh.alpha_is_zero:
            return []
        x = self.mesh.cell_centroids
        return [((x @ A.T) @ self.grid.nodes.T) * self.grid.mu for A in self.rigid.basis]

    @cached_property
    def conserved_modes(self) -> list[np.ndarray]:
        ones = np.ones(self.mesh.n_cells)[:, None]
        modes = [ones * self.grid.mu]
        if self.conserves_energy:
            modes.append(ones * (self.grid.speed2 - 2.0) * self.grid.mu)
        if self.model.conserves_momentum_energy:
            modes += self.rotation_modes
        return modes

    def conserved_quantities(self, f: np.ndarray) -> dict:
        """Mass, energy and angular momentum integrals (the last one 0 without rigid fields)."""
        a = self.areas[:, None] * self.grid.weights
        ang = 0.0
        if len(self.rigid):
            x = self.mesh.cell_centroids
            A = self.rigid.basis[0]
            ang = float(np.sum(a * ((x @ A.T) @ self.grid.nodes.T) * f))
        return {"mass": float(np.sum(a * f)), "energy": float(np.sum(a * self.grid.speed2 * f)),
                "angmom": ang}

    def _project_out(self, f: np.ndarray, modes: list[np.ndarray]) -> np.ndarray:
        if not modes:
            return f
        G = np.array([[self.inner(a, b) for b in modes] for a in modes])
        c = np.linalg.solve(G, np.array([self.inner(f, m) for m in modes]))
        return f - np.tensordot(c, np.array(modes), axes=1)

    def restore_rotation(self, f: np.ndarray) -> np.ndarray:
        """Orthogonal projection removing the angular-momentum component.

        Upwind fluxes on triangles do not conserve angular momentum; on a rotation-invariant
        domain with specular walls the transport step is followed by this projection.
        """
        if self.model.conserves_momentum_energy:
            return self._project_out(f, self.rotation_modes)
        return f

    # -- collision ------------------------------------------------------------------
    def implicit_collision(self, tau: float) -> np.ndarray:
        key = round(float(tau), 15)
        cache = self.__dict__.setdefault("_implicit_cache", {})
        if key not in cache:
            cache[key] = implicit_collision_operator(self.model, self.grid, tau)
        return cache[key]

    def generator(self, f: np.ndarray, epsilon: float = 1.0) -> np.ndarray:
        """Semi-discrete L_eps f = -(1/eps) T f + (1/eps^2) C f on admissible states."""
        from .collision import apply_collision
        return (-self.restore_rotation(self.transport(f)) / epsilon
                + apply_collision(self.model, f, self.grid) / epsilon**2)


def make_admissible(system: KineticSystem, f) -> KineticState | np.ndarray:
    """Remove the orthogonal projection onto the globally conserved modes."""
    if isinstance(f, KineticState):
        return KineticState(make_admissible(system, f.values), f.time, f.epsilon)
    f = np.asarray(f, dtype=float)
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite state")
    return system._project_out(f, system.conserved_modes)


def step(system: KineticSystem, state: KineticState, dt: float) -> KineticState:
    eps = state.epsilon
    if dt > system.dt_max(eps) * (1.0 + 1e-12):
        raise CFLViolation(f"dt = {dt:g} exceeds the CFL bound {system.dt_max(eps):g}")
    f = state.values - (dt / eps) * system.transport(state.values)
    f = system.restore_rotation(f)
    f = f @ system.implicit_collision(dt / eps**2).T
    if not np.all(np.isfinite(f)):
        raise BlowUp(f"non-finite values at t = {state.time + dt:g}")
    return KineticState(f, state.time + dt, eps)


# -- initial data ---------------------------------------------------------------------

def _bump(x: np.ndarray, center, width: float) -> np.ndarray:
    r2 = np.sum((x - np.asarray(center, dtype=float)) ** 2, axis=1)
    return np.exp(-0.5 * r2 / width**2)


def initial_state(system: KineticSystem, spec: dict, rng: np.random.Generator | None = None,
                  epsilon: float = 1.0) -> KineticState:
    """Initial data from a descriptor {"kind": ..., "amplitude": ..., ...}.

    Every kind except ``equilibrium`` and ``rotation`` is made admissible and scaled to
    H-norm ``amplitude`` (default 1).
    """
    spec = dict(spec)
    kind = spec.pop("kind", "random")
    amplitude = float(spec.pop("amplitude", 1.0))
    center = spec.pop("center", (0.1, -0.05))
    width = float(spec.pop("width", 0.15))
    if spec:
        raise ValueError(f"unknown initial-condition keys {sorted(spec)}")
    if kind not in INITIAL_KINDS:
        raise ValueError(f"unknown initial condition {kind!r}")
    grid, mesh = system.grid, system.mesh
    x = mesh.cell_centroids
    v, mu = grid.nodes, grid.mu
    psi_mu = (grid.speed2 - 2.0) / 2.0 * mu
    if kind == "zero":
        return KineticState(np.zeros(system.shape), 0.0, epsilon)
    if kind == "equilibrium":
        return KineticState(amplitude * np.ones(mesh.n_cells)[:, None] * mu, 0.0, epsilon)
    if kind == "rotation":
        jx = np.column_stack([-x[:, 1], x[:, 0]])
        return KineticState(amplitude * (jx @ v.T) * mu, 0.0, epsilon)
    if kind == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        f = rng.standard_normal(system.shape) * mu
    elif kind == "rho-bump":
        f = _bump(x, center, width)[:, None] * mu
    elif kind == "theta-bump":
        f = _bump(x, center, width)[:, None] * psi_mu
    elif kind == "shear":
        m1 = np.cos(math.pi * x[:, 1]) * _bump(x, (0.0, 0.0), 2 * width)
        f = m1[:, None] * v[:, 0] * mu
    else:  # boundary-layer: a micro profile concentrated within ~width of the wall
        d = np.min(np.hypot(*(x[:, None, :] - mesh.boundary_midpoints[None, :, :]).transpose(2, 0, 1)),
                   axis=1)
        f = np.exp(-d / (0.3 * width))[:, None] * (v[:, 0] * v[:, 1] * mu)[None, :]
    f = make_admissible(system, f)
    nrm = system.norm(f)
    if nrm > 0:
        f = f * (amplitude / nrm)
    return KineticState(f, 0.0, epsilon)


# -- trajectories -----------------------------------------------------------------------

@dataclass
class Trajectory:
    rows: list[dict]
    final: KineticState
    dt: float
    steps: int
    norms: np.ndarray = field(repr=False, default=None)   # H-norm after every step
    times: np.ndarray = field(repr=False, default=None)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path) -> None:
        lines = [",".join(CSV_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(_fmt(r[c]) for c in CSV_COLUMNS))
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def _fmt(x: float) -> str:
    return repr(float(x))


def diagnostics(system: KineticSystem, f: np.ndarray, t: float, reference: dict,
                lyapunov: Callable[[np.ndarray], float] | None = None) -> dict:
    grid = system.grid
    mac = moments(f, grid)
    a = system.areas
    perp = f - (f @ grid.moment_matrix.T) @ grid.invariant_basis
    q = system.conserved_quantities(f)
    return {
        "t": t,
        "H_norm": system.norm(f),
        "Hperp_norm": system.norm(perp),
        "rho_L2": math.sqrt(float(np.sum(a * mac.rho**2))),
        "m_L2": math.sqrt(float(np.sum(a[:, None] * mac.m**2))),
        "theta_L2": math.sqrt(float(np.sum(a * mac.theta**2))),
        "lyap": float(lyapunov(f)) if lyapunov is not None else float("nan"),
        "boundary_diss": dperp_boundary_norm(system.boundary, f),
        "mass_residual": q["mass"] - reference["mass"],
        "energy_residual": q["energy"] - reference["energy"],
        "angmom_residual": q["angmom"] - reference["angmom"],
        "correction_mag": correction_magnitude(system.boundary, f),
    }


def run(system: KineticSystem, config: RunConfig, state: KineticState | None = None,
        rng: np.random.Generator | None = None,
        lyapunov: Callable[[np.ndarray], float] | None = None,
        check_norm: bool = True,
        observers: dict[str, Callable[[np.ndarray], float]] | None = None) -> Trajectory:
    """Integrate to ``config.t_end`` recording diagnostics every ``record_every`` steps.

    With ``check_norm`` the H-norm is required to be non-increasing at every step (the
    scheme is a contraction); a violation raises ``RuntimeError``. ``observers`` add extra
    named values to each recorded row (they are not written to CSV).
    """
    observers = observers or {}

    def record(f, t):
        row = diagnostics(system, f, t, reference, lyapunov)
        row.update({k: float(fn(f)) for k, fn in observers.items()})
        return row

    if system.model != config.collision:
        raise ValueError("system and config use different collision models")
    if state is None:
        state = initial_state(system, config.initial_condition, rng, config.epsilon)
    elif state.epsilon != config.epsilon:
        state = KineticState(state.values, state.time, config.epsilon)
    dt_cap = system.dt_max(config.epsilon, config.cfl)
    n_steps = int(math.ceil(config.t_end / dt_cap - 1e-12)) if config.t_end > 0 else 0
    dt = config.t_end / n_steps if n_steps else dt_cap
    reference = system.conserved_quantities(state.values)
    rows = [record(state.values, state.time)]
    norms = np.empty(n_steps + 1)
    times = np.empty(n_steps + 1)
    norms[0], times[0] = system.norm(state.values), state.time
    for n in range(1, n_steps + 1):
        state = step(system, state, dt)
        norms[n], times[n] = system.norm(state.values), state.time
        if check_norm and norms[n] > norms[n - 1] * (1.0 + 1e-12) + 1e-300:
            raise RuntimeError(f"H-norm increased at step {n}: {norms[n - 1]!r} -> {norms[n]!r}")
        if n % config.record_every == 0 or n == n_steps:
            rows.append(record(state.values, state.time))
    return Trajectory(rows, state, dt, n_steps, norms, times)
