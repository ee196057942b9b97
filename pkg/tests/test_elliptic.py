import numpy as np
import pytest

from hypokin.elliptic import (CompatibilityError, FEOperators, LameSolver, PoissonSolver,
                              assemble_poisson, solve_lame, solve_neumann, solve_poisson)
from hypokin.geometry import DomainSpec, build_normalized_mesh

from manufactured import lame_pair, neumann_pair, observed_orders, robin_pair

HS = (0.1, 0.05, 0.025)


def _square(h, alpha):
    return build_normalized_mesh(DomainSpec("unit-square"), h).with_alpha(alpha)


@pytest.mark.parametrize("case", ["neumann", "robin", "lame"])
def test_manufactured_convergence(case):
    errs = []
    for h in HS:
        m = _square(h, 0.0 if case == "neumann" else 1.0)
        fe = FEOperators(m)
        if case == "lame":
            U, xi = lame_pair()
            sol = solve_lame(m, xi(m.cell_centroids))
        else:
            U, xi = neumann_pair() if case == "neumann" else robin_pair()
            sol = solve_poisson(m, xi(m.cell_centroids))
        errs.append(fe.l2_norm(sol.values - U(m.vertices)))
    assert observed_orders(HS, errs).min() >= 1.8


def test_neumann_rejects_incompatible_source():
    m = _square(0.2, 0.0)
    with pytest.raises(CompatibilityError):
        solve_neumann(m, np.ones(m.n_cells))


def test_stiffness_symmetric():
    m = _square(0.2, 0.5)
    assert assemble_poisson(m).symmetry_residual() <= 1e-14


def test_solution_operator_matches_solve(rng):
    for shape, alpha in (("unit-square", 1.0), ("disk", 0.0)):
        m = build_normalized_mesh(DomainSpec(shape), 0.2).with_alpha(alpha)
        xi = rng.standard_normal(m.n_cells)
        xi -= np.sum(m.cell_areas * xi)
        for S in (PoissonSolver(m), PoissonSolver(m.with_alpha(0.0))):
            np.testing.assert_allclose(S.solution_operator() @ xi, S.solve(xi).values, atol=1e-9)


def test_lame_rotation_constraint(disk_mesh, rng):
    m = disk_mesh.with_alpha(0.0)
    L = LameSolver(m)
    assert len(L.rigid) == 1
    x = m.cell_centroids
    with pytest.raises(CompatibilityError):
        L.solve(np.column_stack([-x[:, 1], x[:, 0]]))
    Xi = rng.standard_normal((m.n_cells, 2))
    r = x @ L.rigid.basis[0].T
    Xi -= r * np.sum(m.cell_areas[:, None] * Xi * r) / np.sum(m.cell_areas[:, None] * r * r)
    U = L.solve(Xi).values
    np.testing.assert_allclose(L.solution_operator() @ Xi.ravel(), U.ravel(), atol=1e-9)
    assert L.galerkin_residual(U, Xi) < 1e-8
    # the solution carries no mean vorticity, the gauge fixing the rotation
    assert abs(L.vfe.rotation_row(L.rigid.basis[0]) @ U.ravel()) < 1e-9


def test_h1_stability_ratio_bounded():
    ratios = []
    U, xi = robin_pair()
    for h in HS:
        m = _square(h, 1.0)
        s = solve_poisson(m, xi(m.cell_centroids))
        ratios.append(s.h1_norm / s.source_norm)
    assert (max(ratios) - min(ratios)) / min(ratios) < 0.1
