import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smallscat.background import PotentialGrid
from smallscat.continuum import CtildeField, DensityField, ctilde_from_density
from smallscat.design import (DesignRecipe, DesignTarget, choose_H2, compute_N, design,
                              feasible_H2_interval, impedance_from_H, required_ctilde,
                              roundtrip_design, solve_H, spacing_estimate, validate_design)
from smallscat.errors import DomainError, InfeasibleDesignError
from smallscat.shapes import ShapeSummary

SPHERE = ShapeSummary.sphere(0.01)


def grid(k=1.0, q0=0.0):
    return PotentialGrid.box([0, 0, 0], [1, 1, 1], 0.25, k, q0=q0)


def test_required_ctilde_examples():
    g = grid(q0=-0.3)
    assert np.all(required_ctilde(DesignTarget(g.n0, g, SPHERE)).values == 0)
    g = grid()
    np.testing.assert_allclose(required_ctilde(DesignTarget(2.0, g, SPHERE)).values, -1.0)
    np.testing.assert_allclose(required_ctilde(DesignTarget(1.5 + 0.1j, g, SPHERE)).values, -0.5 - 0.1j)


def test_solve_H_negative_discriminant():
    with pytest.raises(InfeasibleDesignError) as info:
        solve_H(0.0, -1.0, -1.0)
    assert "-3" in str(info.value)


def test_solve_H_reports_feasible_interval():
    # H2 = -0.2 lies outside the feasible interval for Ct = -1 - 0.5i
    with pytest.raises(InfeasibleDesignError) as info:
        solve_H(-1.0, -0.5, -0.2)
    lo, hi = info.value.interval
    assert lo == pytest.approx((2 - np.sqrt(5)) / 2) and hi == 0.0
    assert feasible_H2_interval(-1.0, -0.5) == info.value.interval


def test_solve_H_feasible_example():
    ct = -1.0 - 0.5j
    H1 = solve_H(ct.real, ct.imag, -0.1)
    assert H1 == pytest.approx(-0.3, abs=1e-14)
    H = H1 - 0.1j
    assert abs((ct / H + ct).imag) < 1e-12
    # back-substitution into the defining relation
    assert ct.imag * (H1**2 + 0.01 + H1) / -0.1 == pytest.approx(ct.real, abs=1e-12)
    N = compute_N(CtildeField(grid(), ct), np.full((4, 4, 4), H), SPHERE)
    np.testing.assert_allclose(N.values * SPHERE.capacitance_C, 2.5, rtol=1e-12)


def test_solve_H_preconditions():
    with pytest.raises(DomainError):
        solve_H(1.0, -1.0, 0.5)
    with pytest.raises(DomainError):
        solve_H(1.0, 0.0, -0.5)
    with pytest.raises(DomainError):
        solve_H(1.0, -1.0, 0.0)


def test_compute_N_zero_ctilde_voxel():
    g = grid()
    ct = np.full(g.shape, -1.0 - 0.5j)
    ct[0, 0, 0] = 0
    H = np.full(g.shape, -0.3 - 0.1j)
    N = compute_N(CtildeField(g, ct), H, SPHERE)
    assert N.values[0, 0, 0] == 0 and np.all(N.values.ravel()[1:] > 0)


def test_compute_N_dirichlet_style_limit():
    ct = 1.0 - 1e-6j
    rho = ct.real / ct.imag
    H2 = rho / 2
    H = solve_H(ct.real, ct.imag, H2) + 1j * H2
    assert abs(H) > 1e5
    N = compute_N(CtildeField(grid(), ct), np.full((4, 4, 4), H), SPHERE)
    np.testing.assert_allclose(N.values * SPHERE.capacitance_C, ct.real, rtol=1e-5)


def test_impedance_from_H():
    g = grid()
    s = ShapeSummary.sphere(0.02)
    assert s.b == pytest.approx(0.02)
    H = np.full(g.shape, 0.4 - 0.1j)
    H[0, 0, 0] = 0
    h = impedance_from_H(H, s, g)
    np.testing.assert_allclose(h.values.ravel()[1:], (0.4 - 0.1j) / 0.02)
    assert not h.mask[0, 0, 0]
    assert np.all(h.values.imag[h.mask] < 0)


def test_pipeline_passes_validation():
    g = grid(k=2.0)
    target = DesignTarget(1.5 + 0.1j, g, SPHERE)
    recipe = design(target)
    report = validate_design(recipe, target)
    assert report.passed
    assert report.margins["im_h_formula_gap"] <= 1e-8


def test_validation_flags_sign_mismatch():
    g = grid()
    target = DesignTarget(1.5 + 0.1j, g, SPHERE)
    good = design(target)
    H = np.conj(good.H)  # H2 > 0 while Ct2 < 0
    bad = DesignRecipe(good.N, impedance_from_H(H, SPHERE, g), H, good.b, good.ctilde_target)
    report = validate_design(bad, target)
    assert not report.checks["same_sign"].any()
    assert not report.passed


def test_validation_flags_gain_medium():
    g = grid()
    target = DesignTarget(1.5 - 0.1j, g, SPHERE)  # Im q > 0
    ct = required_ctilde(target).values
    H = np.full(g.shape, 0.5 + 0.5j)
    recipe = DesignRecipe(DensityField(g, 1.0), impedance_from_H(H, SPHERE, g), H, SPHERE.b,
                          CtildeField(g, ct))
    report = validate_design(recipe, target)
    assert not report.checks["im_q_nonpositive"].any()


def test_roundtrip_identity():
    g = grid(q0=-0.3)
    rep = roundtrip_design(DesignTarget(g.n0, g, SPHERE))
    assert rep.max_rel_error == 0 and rep.max_n_error == 0
    assert np.all(rep.recipe.N.values == 0) and not rep.recipe.h.mask.any()


def test_roundtrip_uniform_complex_target():
    g = grid()
    ct = -1.0 - 0.5j
    target = DesignTarget(1 - ct / g.k**2, g, SPHERE)
    rep = roundtrip_design(target, alpha=[0, 0, 1])
    assert rep.max_rel_error <= 1e-10
    assert rep.max_n_error <= 1e-12
    assert rep.validation.passed
    assert rep.field is not None


@given(st.floats(-50, 50), st.floats(-50, -1e-3), st.floats(0.05, 1.0))
def test_algebraic_closure_and_sign(ct1, ct2, kappa):
    g = grid()
    ct = complex(ct1, ct2)
    rep = roundtrip_design(DesignTarget(1 - ct / g.k**2, g, SPHERE), kappa)
    assert rep.max_rel_error <= 1e-10
    H = rep.recipe.H
    assert np.all(np.sign(H.imag) == np.sign(ct2))
    C = SPHERE.capacitance_C
    bracket = (ct / H + ct).real
    np.testing.assert_allclose(rep.recipe.N.values * C, bracket, rtol=1e-10)
    assert np.all(rep.recipe.N.values >= 0)


def test_choose_H2_policy_and_clipping():
    ct = np.array([-1 - 0.5j, 10 - 0.1j, 3 + 4j])
    H2 = choose_H2(ct, 0.5)
    assert H2[1] == pytest.approx(0.5 * -0.1 / abs(ct[1]))
    lo, _ = feasible_H2_interval(-1.0, -0.5)
    assert 0.5 * -0.5 / abs(ct[0]) < lo
    assert H2[0] == pytest.approx(lo * (1 - 1e-12), rel=1e-15)
    assert np.all(np.sign(H2) == np.sign(ct.imag))
    for c, h2 in zip(ct, H2):
        solve_H(c.real, c.imag, h2)


def test_real_branch_closure():
    g = grid()
    ct = 2.0
    target = DesignTarget(1 - ct / g.k**2, g, SPHERE)
    rep = roundtrip_design(target)
    assert rep.max_rel_error <= 1e-10
    assert rep.recipe.real_branch.all()
    C = SPHERE.capacitance_C
    rep2 = roundtrip_design(target, real_density=5 * ct / C)
    assert rep2.max_rel_error <= 1e-10
    with pytest.raises(InfeasibleDesignError):
        design(target, real_density=0.5 * ct / C)


def test_smaller_root_is_rechecked():
    g = grid()
    target = DesignTarget(1.5 + 0.1j, g, SPHERE)
    try:
        recipe = design(target, root="smaller")
    except InfeasibleDesignError:
        return
    assert validate_design(recipe, target).checks["positivity"].all()


def test_roundtrip_error_carries_stage():
    g = grid()
    with pytest.raises(InfeasibleDesignError, match=r"^\[design\]"):
        roundtrip_design(DesignTarget(1.5 + 0.1j, g, SPHERE), H2=-5.0)


def test_spacing_estimate():
    assert spacing_estimate(10.0, 10.0 * 0.1**3) == pytest.approx(0.1)


def test_smooth_target_with_background():
    g = PotentialGrid.box([0, 0, 0], [1, 1, 1], 0.125, 2.0,
                          q0=lambda x: -1.0 * np.exp(-np.sum((x - 0.5) ** 2, 1) / 0.2) + 0j)
    n = 1.3 + 0.2 * np.exp(-np.sum((g.centers - 0.4) ** 2, 1) / 0.1) + 0.05j
    target = DesignTarget(n.reshape(g.shape), g, SPHERE)
    rep = roundtrip_design(target)
    assert rep.max_rel_error <= 1e-10 and rep.validation.passed
    back = ctilde_from_density(rep.recipe.N, rep.recipe.h, SPHERE)
    np.testing.assert_allclose(back.values, rep.recipe.ctilde_target.values, rtol=1e-10)
