import math

import numpy as np
import pytest

from hypokin import hypocoercivity as hc
from hypokin.collision import CollisionModel
from hypokin.elliptic import FEOperators, solve_neumann
from hypokin.transport import KineticSystem, Trajectory, initial_state, make_admissible, run, RunConfig


@pytest.fixture(scope="module")
def aux(square_system):
    return hc.AuxOperators(square_system)


@pytest.fixture(scope="module")
def states(square_system):
    return hc.sample_states(square_system, 8, np.random.default_rng(0))


def test_params_validation():
    assert hc.HypoParams(0.1).etas == pytest.approx([0.1, 0.1**1.5, 0.1**1.75])
    assert hc.HypoParams(0.2, 0.5, "epsilon").weights == pytest.approx(0.5 * hc.HypoParams(0.2).etas)
    for bad in ({"eta": 1.0}, {"eta": -0.1}, {"eta": 0.1, "epsilon": 0.0}, {"eta": 0.1, "variant": "x"}):
        with pytest.raises(ValueError):
            hc.HypoParams(**bad)


def test_samples_admissible_unit_norm(square_system, states):
    for f in states:
        assert square_system.norm(f) == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(make_admissible(square_system, f), f, atol=1e-12)


def test_inner_product_symmetric_and_bilinear(square_system, aux, states):
    p = hc.HypoParams(0.3)
    f, g, h = states[:3]
    fg = hc.hypo_inner(f, g, p, aux)
    assert abs(fg - hc.hypo_inner(g, f, p, aux)) <= 1e-12 * max(1.0, abs(fg))
    lhs = hc.hypo_inner(2.0 * f - 0.5 * h, g, p, aux)
    rhs = 2.0 * fg - 0.5 * hc.hypo_inner(h, g, p, aux)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_zero_eta_gives_plain_product(square_system, aux, states):
    f, g = states[:2]
    assert hc.hypo_inner(f, g, hc.HypoParams(0.0), aux) == square_system.inner(f, g)


def test_dense_and_iterative_gradients_agree(square_system, aux, states):
    iterative = hc.AuxOperators(square_system, dense=False)
    for a, b in zip(aux.gradients(states[0]), iterative.gradients(states[0])):
        np.testing.assert_allclose(a, b, atol=1e-8)
    batch = aux.gradients(states[:3])
    np.testing.assert_allclose(batch[1][2], aux.gradients(states[2])[1], atol=1e-12)


def test_density_potential_matches_neumann_solve(square_system, aux, states):
    sol = aux.solve(states[1])
    rho = square_system.grid.moment_matrix[0] @ states[1].T
    direct = solve_neumann(square_system.mesh, rho - square_system.areas @ rho).values
    np.testing.assert_allclose(sol.u_rho.values, direct, atol=1e-8)
    np.testing.assert_allclose(sol.grad_rho, FEOperators(square_system.mesh).cell_gradient(direct), atol=1e-8)


def test_mass_cross_term_is_momentum_pairing(square_system, aux, states):
    """X_3(f, f) = (grad u_N[rho], m)."""
    f = states[2]
    x = hc._cross_terms(aux, aux.gradients(f), f)
    m = (square_system.grid.moment_matrix[1:3] @ f.T).T
    expected = float(np.sum(square_system.areas[:, None] * aux.gradients(f)[2] * m))
    assert x[2] == pytest.approx(expected, rel=1e-12)


def test_incompatible_source_rejected(square_system, aux):
    f = np.ones(square_system.shape) * square_system.grid.mu   # nonzero total mass
    with pytest.raises(hc.CompatibilityError):
        aux.gradients(f)


def test_energy_lemma_orientation(square_system, aux):
    """A temperature bump drives a positive energy cross term at leading order."""
    f = initial_state(square_system, {"kind": "theta-bump", "width": 0.25}).values
    rep = hc.lemma_diagnostics(square_system, f, aux)
    assert rep.lemma_terms["energy"]["lhs"] > 0
    assert rep.micro_gap >= -1e-12
    assert rep.Mpf <= 1e-12 and rep.Mqf <= 1e-12


def test_lemma_margins_nonnegative(square_system, aux, states):
    reports = [hc.lemma_diagnostics(square_system, f, aux) for f in states]
    for name, m in hc.lemma_margins(reports).items():
        assert m["margin"] >= -1e-12, name
        assert math.isfinite(m["C"])


def test_certificate_small_mesh(square_system, aux):
    rep = hc.coercivity_certificate(square_system, "auto", 100, seed=1, aux=aux)
    assert rep.certified and 0 < rep.eta <= hc.ETA_MAX
    # without the cross terms macroscopic states are not dissipated at a uniform rate
    assert rep.kappa > rep.kappa_plain
    lo, hi = rep.bracket
    assert 0 < lo <= 1 <= hi
    assert set(rep.to_dict()) >= {"kappa", "eta", "bracket", "certified"}


def test_certificate_requires_samples(square_system, aux):
    with pytest.raises(ValueError):
        hc.coercivity_certificate(square_system, 0.1, 50, aux=aux)


def test_sweep_eta_picks_maximum():
    class Quad:
        def quotient(self, eta):
            return np.array([1.0 - (eta - 0.05) ** 2 * 400.0])
    best, top, table = hc.sweep_eta([Quad()], eta_max=0.5)
    assert best == pytest.approx(0.05, rel=0.1)
    assert top == pytest.approx(0.1, rel=1e-6)
    assert len(table) == 40


def test_norm_equivalence_trivial_at_zero_eta(square_system, aux, states):
    out = hc.norm_equivalence(square_system, aux, states, 0.0, [1.0, 0.1])
    for lo, hi in out.values():
        assert lo == pytest.approx(1.0) and hi == pytest.approx(1.0)


def test_fit_decay_exact_exponential():
    t = np.linspace(0, 5, 101)
    rep = hc.fit_decay(t, 3.0 * np.exp(-2.0 * t))
    assert rep.kappa == pytest.approx(2.0, rel=1e-12)
    assert rep.C == pytest.approx(3.0, rel=1e-10)
    assert rep.r2 == 1.0
    assert hc.log_slopes(t, np.exp(-2.0 * t), 4) == pytest.approx(-2.0)


def test_fit_decay_rejects_short_or_nonpositive():
    t = np.linspace(0, 1, 10)
    with pytest.raises(ValueError):
        hc.fit_decay(t, np.exp(-t))
    t = np.linspace(0, 1, 50)
    with pytest.raises(ValueError):
        hc.fit_decay(t, np.zeros(50), floor=0.0)


def test_fit_decay_drops_roundoff_floor():
    t = np.linspace(0, 10, 201)
    y = np.maximum(np.exp(-5 * t), 1e-17)
    assert hc.fit_decay(t, y).kappa == pytest.approx(5.0, rel=1e-6)


def test_weak_envelope_oracle():
    # w = 1 + R^2: minimizer of exp(-10/s) + 1/s is s = 10 / ln 10
    s = 10.0 / math.log(10.0)
    expected = math.sqrt(0.1 + 1.0 / s)
    assert expected == pytest.approx(0.57468, abs=5e-6)
    assert hc.weak_envelope(10.0) == pytest.approx(expected, rel=1e-6)
    assert hc.weak_envelope(0.0) == pytest.approx(math.sqrt(1 + 1 / (1 + 1e6)), rel=1e-9)
    th = hc.weak_envelope(np.linspace(0, 50, 30))
    assert np.all(np.diff(th) < 0)


def test_weak_envelope_slower_than_any_exponential():
    t = np.array([100.0, 200.0, 400.0])
    th = hc.weak_envelope(t, 1.0, 2.0)
    slopes = np.diff(np.log(th)) / np.diff(t)
    assert abs(slopes[1]) < abs(slopes[0])


def test_interpolation_gap_nonpositive(square_mesh, grid8, rng):
    s = KineticSystem(square_mesh, grid8, CollisionModel("weak-bgk", 1.0))
    f = rng.standard_normal(s.shape) * grid8.mu
    for R in (0.5, 1.0, 2.0, 5.0):
        assert hc.interpolation_gap(s, f, R) <= 1e-12
        assert hc.interpolation_gap(s, f, R, hc.radial_weight(2.0)) <= 1e-12


def test_envelope_constant():
    assert hc.envelope_constant([0, 1], [2.0, 1.0], [1.0, 0.25], 2.0) == pytest.approx(2.0)


def test_weighted_perp_integral(square_system):
    tr = run(square_system, RunConfig(t_end=0.2, record_every=1), rng=np.random.default_rng(0))
    t = tr.column("t")
    p = tr.column("Hperp_norm")
    expected = np.sum(np.diff(t) * p[:-1] ** 2 * np.exp(t[:-1])) / 0.25
    assert hc.weighted_perp_integral(tr, 0.5, 0.5) == pytest.approx(expected, rel=1e-12)
    assert isinstance(tr, Trajectory)


def test_microscopic_state_has_zero_aux_fields(square_system, aux, rng):
    f = hc.micro_part(square_system, rng.standard_normal(square_system.shape) * square_system.grid.mu)
    for grad in aux.gradients(f):
        assert np.abs(grad).max() < 1e-12
    for grad in aux.gradients(np.zeros(square_system.shape)):
        assert np.abs(grad).max() == 0.0


def test_fit_decay_constant_trajectory():
    t = np.linspace(0, 1, 40)
    rep = hc.fit_decay(t, np.full(40, 0.7))
    assert rep.kappa == 0.0 and rep.r2 == 1.0
