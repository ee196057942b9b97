import numpy as np
import pytest

from hypokin.boundary import boundary_invariants, build_boundary, edge_operator, specular_map


@pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0])
@pytest.mark.parametrize("angle", [0.0, 0.4, np.pi / 4, 2.0])
def test_edge_operator_invariants(grid8, alpha, angle):
    n = np.array([np.cos(angle), np.sin(angle)])
    op = edge_operator(n, alpha, grid8)
    mu_o, mu_i = grid8.mu[op.out_idx], grid8.mu[op.in_idx]
    # conserved fluxes balance exactly
    np.testing.assert_allclose(op.test_in @ op.reflect, op.test_out, atol=1e-11)
    # the Maxwellian is reflected into itself
    np.testing.assert_allclose(op.reflect @ mu_o, mu_i, atol=1e-12)


def test_diffuse_wall_is_flux_normalized(grid8):
    op = edge_operator(np.array([1.0, 0.0]), 1.0, grid8)
    assert op.c_mu * (op.out_flux @ grid8.mu[op.out_idx]) == pytest.approx(1.0)


def test_axis_aligned_specular_is_exact(grid8):
    _, _, S, exact = specular_map(np.array([0.0, 1.0]), grid8)
    assert exact
    assert np.all((S == 0) | (S == 1))
    assert np.all(S.sum(axis=1) == 1)


def test_mesh_boundary_invariants(disk_mesh, grid8):
    for a in (0.0, 0.5, 1.0):
        inv = boundary_invariants(build_boundary(disk_mesh.with_alpha(a), grid8))
        assert inv["ok"], inv
        assert inv["trace_norm"] <= 1.0 + 1e-10


def test_alpha_range_enforced(grid8):
    with pytest.raises(ValueError):
        edge_operator(np.array([1.0, 0.0]), 1.2, grid8)
