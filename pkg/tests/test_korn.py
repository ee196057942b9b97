import math

import numpy as np
import pytest

from hypokin.geometry import DomainSpec, build_normalized_mesh
from hypokin.korn import (inverse_iteration, korn_constant, lobpcg_route, pencil,
                          poincare_wirtinger_report, rayleigh_quotient, robin_poincare_report)


@pytest.fixture(scope="module")
def square():
    return build_normalized_mesh(DomainSpec("unit-square"), 0.1)


def test_square_neumann_eigenvalue(square):
    rep = poincare_wirtinger_report(square.with_alpha(0.0), n_samples=60)
    # first nonzero Neumann eigenvalue of the unit square is pi^2; P1 overestimates
    assert math.pi**2 <= rep.eigenvalue <= 1.03 * math.pi**2
    assert rep.certified
    assert abs(rep.eigenvalue - rep.eigenvalue_check) <= 1e-6 * rep.eigenvalue


def test_disk_neumann_eigenvalue():
    m = build_normalized_mesh(DomainSpec("disk"), 0.1)
    lam = poincare_wirtinger_report(m, n_samples=0).eigenvalue
    # j'_{1,1}^2 pi for the unit-area disk
    assert lam == pytest.approx(1.8411837813**2 * math.pi, rel=0.03)


def test_robin_below_neumann_second_mode(square):
    rep = robin_poincare_report(square.with_alpha(1.0), n_samples=30)
    # a_alpha(1, 1) = weight * perimeter bounds the smallest eigenvalue from above
    assert 0 < rep.eigenvalue <= 4.0
    assert rep.certified


@pytest.mark.parametrize("variant,alpha", [("robin", 1.0), ("rigid", 0.0), ("l2", 0.0)])
def test_korn_routes_agree(variant, alpha):
    m = build_normalized_mesh(DomainSpec("disk" if variant == "rigid" else "unit-square"), 0.2)
    rep = korn_constant(m.with_alpha(alpha), variant=variant, n_samples=60)
    assert rep.certified and rep.violations == 0
    assert abs(rep.eigenvalue - rep.eigenvalue_check) <= 1e-5 * rep.eigenvalue
    assert rep.constant >= 1.0 - 1e-12 if variant == "l2" else rep.constant > 0


def test_constrained_space_has_smaller_constant(square):
    m = square.with_alpha(1.0)
    c_tan = korn_constant(m, variant="robin", n_samples=0, check=False).constant
    c_free = korn_constant(m, variant="robin", n_samples=0, check=False, tangential=False).constant
    assert c_tan <= c_free


def test_rayleigh_quotient_bounded_by_eigenvalue(square, rng):
    m = square.with_alpha(0.0)
    lam = poincare_wirtinger_report(m, n_samples=0, check=False).eigenvalue
    for _ in range(10):
        u = rng.standard_normal(m.n_vertices)
        assert rayleigh_quotient(m, "PW", u) >= lam * (1 - 1e-10)


def test_inverse_and_lobpcg_on_small_pencil():
    m = build_normalized_mesh(DomainSpec("l-shape"), 0.2)
    p = pencil(m, "PW")
    assert inverse_iteration(p).value == pytest.approx(lobpcg_route(p).value, rel=1e-6)
