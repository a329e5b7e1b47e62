#!/usr/bin/env python3
"""
Tests for the harmonic function, the passage-time laws and the two penalisations.
"""

import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from ibm_core import (
    H_AT_ZERO,
    SURVIVAL_CONSTANT,
    PenaltyWeight,
    PhaseState,
    azema_ratio,
    conditioned_drift,
    crossing_intensity,
    first_passage_density,
    gaussian_abs_moment,
    general_nth_passage_asymptotic,
    generator_residual,
    growth_bound_holds,
    h_eval,
    h_grad,
    harmonic_table,
    lastpassage_cdf,
    lastpassage_future,
    lastpassage_future_array,
    lemma_hbta_rhs,
    martingale_lastpassage,
    martingale_supremum,
    nth_passage_asymptotic,
    nth_passage_coeffs,
    nth_passage_density_asymptotic,
    nth_passage_joint_density,
    passage_weight_q,
    penalised_mean_asymptotic,
    phi_cap_lastpassage,
    phi_cap_supremum,
    qa_selfstart_density,
    q_density,
    q_hit_probability,
    s_infinity_atom,
    s_infinity_law,
    self_start_survival,
    sigma_weight_q,
    supremum_integral_array,
    survival_asymptotic,
    transition_density,
    transition_density_array,
    two_sided_h,
    unit_survival,
)
from specfun import DomainError

H_CLOSED = (9 / 2) ** (1 / 6) * math.gamma(1 / 3) / math.gamma(1 / 6)


def test_h_at_unit_position():
    """h(1, 0) = (9/2)^{1/6} Gamma(1/3) / Gamma(1/6) ~ 0.61839."""
    assert H_AT_ZERO == pytest.approx(H_CLOSED, rel=1e-13)
    assert h_eval(PhaseState(1.0, 0.0)) == pytest.approx(H_CLOSED, rel=1e-12)
    assert h_eval(PhaseState(1.0, 0.0)) == pytest.approx(0.61838, abs=2e-5)


def test_h_on_the_boundary():
    """h(0, y) = sqrt(y+); the two-sided version is sqrt|y|."""
    assert h_eval(PhaseState(0.0, 4.0)) == 2.0
    assert h_eval(PhaseState(0.0, -4.0)) == 0.0
    assert two_sided_h(PhaseState(0.0, -4.0)) == 2.0
    assert two_sided_h(PhaseState(-1.0, 0.0)) == pytest.approx(H_CLOSED, rel=1e-12)


def test_h_rejects_negative_position():
    with pytest.raises(DomainError):
        h_eval(PhaseState(-1.0, 0.0))
    with pytest.raises(DomainError):
        PhaseState(float("nan"), 0.0)


@given(st.floats(min_value=0.01, max_value=5.0), st.floats(min_value=-3.0, max_value=3.0))
@settings(max_examples=40, deadline=None)
def test_h_scaling(x, y):
    """h(8x, 2y) = 8^{1/6} h(x, y)."""
    assert h_eval(PhaseState(8 * x, 2 * y)) == pytest.approx(8 ** (1 / 6) * h_eval(PhaseState(x, y)), rel=1e-9)


@pytest.mark.parametrize("x,y", [(1.0, 0.0), (0.5, -1.0), (2.0, 1.5), (0.1, 0.3), (3.0, -0.7)])
def test_h_is_space_time_harmonic(x, y):
    """(1/2) h_yy + y h_x vanishes away from the boundary."""
    assert abs(generator_residual(PhaseState(x, y))) < 1e-5


def test_generator_residual_rejects_boundary():
    with pytest.raises(DomainError):
        generator_residual(PhaseState(0.0, 1.0))
    with pytest.raises(DomainError):
        generator_residual(PhaseState(1.0, 1.0), step=0.5)


def test_gradient_matches_differences():
    s, e = PhaseState(0.8, -0.4), 1e-5
    dx, dy = h_grad(s)
    fdx = (h_eval(PhaseState(s.x + e, s.y)) - h_eval(PhaseState(s.x - e, s.y))) / (2 * e)
    fdy = (h_eval(PhaseState(s.x, s.y + e)) - h_eval(PhaseState(s.x, s.y - e))) / (2 * e)
    assert dx == pytest.approx(fdx, rel=1e-5)
    assert dy == pytest.approx(fdy, rel=1e-5)


def test_drift_approaches_half_inverse_velocity():
    """Far above the axis h ~ sqrt(y), so the drift ~ 1/(2y)."""
    assert conditioned_drift(PhaseState(1.0, 50.0)) == pytest.approx(1 / 100, rel=0.1)


def test_table_matches_exact_evaluation():
    table = harmonic_table()
    xs = np.array([0.05, 0.3, 1.0, 2.5, 7.0, 1.0, 0.5])
    ys = np.array([0.2, -0.5, 0.0, 1.3, -2.0, 20.0, -4.0])
    exact = np.array([h_eval(PhaseState(x, y)) for x, y in zip(xs, ys)])
    np.testing.assert_allclose(table.h(xs, ys), exact, rtol=1e-5)
    drift = np.array([conditioned_drift(PhaseState(x, y)) for x, y in zip(xs, ys)])
    np.testing.assert_allclose(table.drift(xs, ys), drift, rtol=1e-4, atol=1e-8)
    assert np.isnan(table.h(-1.0, 0.0)[0])
    assert table.two_sided(-1.0, 0.0)[0] == pytest.approx(H_CLOSED, rel=1e-5)


def test_growth_bound():
    points = [PhaseState(x, y) for x in (0.0, 0.1, 1.0, 10.0, 100.0) for y in (-5.0, -1.0, 0.0, 1.0, 5.0)]
    assert growth_bound_holds(points)


def test_transition_density_has_unit_mass():
    u = np.linspace(-5.0, 5.0, 401)
    v = np.linspace(-6.0, 6.0, 401)
    U, V = np.meshgrid(u, v, indexing="ij")
    p = transition_density_array(1.0, 0.0, 0.0, U, V)
    assert np.trapezoid(np.trapezoid(p, v, axis=1), u) == pytest.approx(1.0, abs=1e-6)
    assert transition_density(1.0, PhaseState(0.0, 0.0), PhaseState(0.2, 0.1)) == pytest.approx(
        float(transition_density_array(1.0, 0.0, 0.0, 0.2, 0.1)), rel=1e-12)


def test_transition_density_chapman_kolmogorov():
    """int int p_s(A; m) p_{t-s}(m; B) dm = p_t(A; B)."""
    a, b = PhaseState(0.0, 0.0), PhaseState(0.3, 0.2)
    s, t = 0.4, 1.0
    value, _ = integrate.dblquad(
        lambda v, u: transition_density(s, a, PhaseState(u, v)) * transition_density(t - s, PhaseState(u, v), b),
        -2.0, 2.0, -5.0, 5.0, epsabs=1e-11, epsrel=1e-10)
    assert value == pytest.approx(transition_density(t, a, b), rel=1e-5)


def test_killed_kernel_is_antisymmetric():
    """q_t(x, y; u, -v) = -q_t(x, y; u, v)."""
    src = PhaseState(0.3, -0.2)
    for u, v in [(0.5, 0.4), (1.2, 2.0), (0.1, 0.05)]:
        assert q_density(1.0, src, PhaseState(u, -v)) == -q_density(1.0, src, PhaseState(u, v))
    assert q_density(1.0, src, PhaseState(0.5, 0.0)) == 0.0


def test_gaussian_abs_moment():
    sigma = 0.7
    centred = sigma ** 1.5 * 2 ** 0.75 * math.gamma(1.25) / math.sqrt(math.pi)
    assert gaussian_abs_moment(0.0, sigma ** 2) == pytest.approx(centred, rel=1e-12)
    raw, _ = integrate.quad(lambda z: abs(z) ** 1.5 * math.exp(-0.5 * ((z - 1.3) / sigma) ** 2)
                            / (sigma * math.sqrt(2 * math.pi)), -10, 10, points=[0.0], epsabs=1e-13)
    assert gaussian_abs_moment(1.3, sigma ** 2) == pytest.approx(raw, rel=1e-9)
    far = gaussian_abs_moment(np.array([100.0]), np.array([0.01]))
    assert far[0] == pytest.approx(1000.0, rel=1e-5)
    assert crossing_intensity(0.5, 0.3, -0.5) > 0


def test_survival_asymptotic_value():
    """C h(1, 0) 10^{-1} ~ 0.071823 at t = 10^4."""
    assert SURVIVAL_CONSTANT == pytest.approx(1.161462, rel=1e-5)
    value = survival_asymptotic(1e4, PhaseState(1.0, 0.0))
    assert value == pytest.approx(SURVIVAL_CONSTANT * H_CLOSED * 0.1, rel=1e-12)
    assert value == pytest.approx(0.071823, rel=1e-4)


def test_survival_asymptotic_scaling_and_domain():
    t = 50.0
    assert survival_asymptotic(t, PhaseState(8.0, 2.0)) == pytest.approx(
        8 ** (1 / 6) * survival_asymptotic(t, PhaseState(1.0, 1.0)), rel=1e-9)
    for bad in (PhaseState(0.0, 0.0), PhaseState(0.0, -1.0), PhaseState(-1.0, 1.0)):
        with pytest.raises(DomainError):
            survival_asymptotic(t, bad)
    with pytest.raises(DomainError):
        survival_asymptotic(0.0, PhaseState(1.0, 0.0))


def test_first_passage_constant_matches_survival():
    """For n = 1 the passage constant is C sqrt(b) = C h(0, b)."""
    b = 2.5
    assert nth_passage_coeffs(1, b).leading_constant == pytest.approx(SURVIVAL_CONSTANT * math.sqrt(b), rel=1e-12)
    assert nth_passage_asymptotic(1e3, 1, b) == pytest.approx(survival_asymptotic(1e3, PhaseState(0.0, b)), rel=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_decomposed_coefficients(n):
    plain = nth_passage_coeffs(n, 1.0)
    split = nth_passage_coeffs(n, 1.0, decomposed=True)
    assert split.leading_constant == pytest.approx(plain.leading_constant * 2.0 ** (1 - n), rel=1e-14)
    assert split.log_power == n - 1


def test_nth_passage_rejects_bad_arguments():
    with pytest.raises(DomainError):
        nth_passage_coeffs(0, 1.0)
    with pytest.raises(DomainError):
        nth_passage_coeffs(2, 0.0)
    with pytest.raises(DomainError):
        nth_passage_asymptotic(1.0, 1, 1.0)


def test_general_start_uses_two_sided_weight():
    s = PhaseState(-0.5, 0.3)
    w = two_sided_h(s)
    assert general_nth_passage_asymptotic(1e4, 2, s) == pytest.approx(nth_passage_asymptotic(1e4, 2, w * w), rel=1e-12)


@pytest.mark.parametrize("b,t,z", [(1.0, 1.0, 0.5), (0.3, 2.0, 1.1), (2.0, 0.5, 0.2)])
def test_first_passage_joint_density_is_self_start_law(b, t, z):
    """n = 1 joint density in z = |B| / sqrt(t) equals sqrt(t) times the exact passage density."""
    direct = math.sqrt(t) * first_passage_density(b, t, -z * math.sqrt(t))
    assert nth_passage_joint_density(1, b, t, z) == pytest.approx(direct, rel=1e-7)


def test_joint_density_large_time_form():
    b, t, z = 1.0, 1e6, 0.7
    assert nth_passage_joint_density(1, b, t, z) == pytest.approx(nth_passage_density_asymptotic(1, b, t, z), rel=0.01)


def test_first_passage_density_mirror_and_support():
    assert first_passage_density(1.0, 1.0, 0.3) == 0.0
    assert first_passage_density(-1.0, 1.0, 0.4) == first_passage_density(1.0, 1.0, -0.4)


def test_self_start_survival_table():
    """The tabulated survival agrees with direct quadrature and with time scaling."""
    assert self_start_survival(1.0, 4.0) == pytest.approx(unit_survival(0.5), rel=1e-3)
    assert self_start_survival(1.0, 0.0) == 1.0
    assert self_start_survival(0.0, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert self_start_survival(-1.0, 4.0) == self_start_survival(1.0, 4.0)


def test_conditioned_self_start_passage_law():
    """Under Q the passage law from (a, y) is the P law reweighted by h(a, z) / h(a, y)."""
    a, y, t, z = 0.5, 1.0, 0.8, -0.6
    plain = first_passage_density(y, t, z)
    weighted = qa_selfstart_density(a, y, t, z)
    assert weighted == pytest.approx(plain * h_eval(PhaseState(a, z)) / h_eval(PhaseState(a, y)), rel=1e-12)
    assert 0 < weighted < plain
    assert qa_selfstart_density(a, y, t, 0.0) == 0.0
    with pytest.raises(DomainError):
        qa_selfstart_density(a, y, t, 0.3)
    with pytest.raises(DomainError):
        qa_selfstart_density(0.0, y, t, z)


def test_conditioned_hitting_probability():
    """Q(T_{1/2} < inf) from (1, 0) is 1 - 2^{-1/6} ~ 0.1091."""
    s = PhaseState(1.0, 0.0)
    assert q_hit_probability(s, 0.5) == pytest.approx(1 - 0.5 ** (1 / 6), rel=1e-9)
    assert q_hit_probability(s, 0.5) == pytest.approx(0.1091, abs=1e-4)
    assert q_hit_probability(s, 0.0) == 0.0
    with pytest.raises(DomainError):
        q_hit_probability(s, 1.0)


def test_lemma_right_hand_side():
    s = PhaseState(1.0, 0.0)
    assert lemma_hbta_rhs(s, 0.5) == pytest.approx(H_CLOSED * (1 - 0.5 ** (1 / 6)), rel=1e-9)
    assert lemma_hbta_rhs(s, 0.5) == pytest.approx(0.06747, abs=1e-5)
    assert lemma_hbta_rhs(s, 0.0) == 0.0
    assert lemma_hbta_rhs(s, 0.9) > lemma_hbta_rhs(s, 0.5)


def test_penalty_weight_parse_and_shape():
    phi = PenaltyWeight.parse("0:1, 2:0")
    assert phi == PenaltyWeight.triangular(1.0, 2.0)
    assert phi(-3.0) == 1.0
    assert phi(1.0) == 0.5
    assert phi(5.0) == 0.0
    assert phi.support_end == 2.0
    assert phi.segments() == [(0.0, 2.0, -0.5)]
    assert PenaltyWeight.parse(phi.as_string()) == phi
    assert PenaltyWeight.parse("0:1,1:0,2:0").support_end == 1.0


@pytest.mark.parametrize("text", ["0:1,1:1", "1:1,0:0", "0:-1,1:0", "0:0,1:0", "abc", "0:1"])
def test_penalty_weight_rejects_bad_input(text):
    with pytest.raises(DomainError):
        PenaltyWeight.parse(text)


def test_supremum_routes_agree():
    """Integration by parts and the direct x-derivative give the same Phi."""
    phi = PenaltyWeight.triangular(1.0, 2.0)
    for s in (PhaseState(0.0, 1.0), PhaseState(0.2, -0.5)):
        assert phi_cap_supremum(s, phi, route="direct") == pytest.approx(phi_cap_supremum(s, phi), rel=1e-6)
    with pytest.raises(DomainError):
        phi_cap_supremum(PhaseState(0.0, 1.0), phi, route="sideways")  # type: ignore[arg-type]


def test_supremum_law_is_a_distribution():
    """P(S_inf = x) + P(S_inf > x+) = 1, and the tail decreases to 0 at the end of the support."""
    phi = PenaltyWeight.triangular(1.0, 2.0)
    s = PhaseState(0.0, -1.0)
    atom = s_infinity_atom(s, phi)
    assert 0 < atom < 1
    assert s_infinity_law(s, phi, 1e-9) == pytest.approx(1 - atom, abs=1e-6)
    tails = [s_infinity_law(s, phi, c) for c in (0.5, 1.0, 1.5, 2.0)]
    assert tails == sorted(tails, reverse=True)
    assert tails[-1] == 0.0
    assert s_infinity_atom(PhaseState(0.0, 1.0), phi) == 0.0
    with pytest.raises(DomainError):
        s_infinity_law(s, phi, 0.0)


def test_supremum_martingale_and_vectorised_form():
    phi = PenaltyWeight.triangular(1.0, 2.0)
    s = PhaseState(0.0, 1.0)
    assert martingale_supremum(0.0, s, phi) == pytest.approx(phi_cap_supremum(s, phi), rel=1e-12)
    fast = supremum_integral_array(np.array([0.0, 0.5]), 0.0, 1.0, phi)
    assert fast[0] == pytest.approx(phi_cap_supremum(s, phi), rel=1e-4)
    with pytest.raises(DomainError):
        martingale_supremum(-0.1, s, phi)


def test_lastpassage_martingale_at_time_zero():
    phi = PenaltyWeight.triangular(1.0, 1.0)
    s = PhaseState(0.3, -0.5)
    cap = phi_cap_lastpassage(s, phi)
    assert martingale_lastpassage(0.0, None, s, phi) == pytest.approx(cap, rel=1e-12)
    assert cap > two_sided_h(s)
    assert 0 <= azema_ratio(0.25, None, s, phi) <= 1
    with pytest.raises(DomainError):
        martingale_lastpassage(0.5, 0.7, s, phi)


def test_lastpassage_future_vectorised():
    phi = PenaltyWeight.triangular(1.0, 1.0)
    x, y = np.array([0.3, -0.2, 1.0]), np.array([-0.5, 0.4, 0.0])
    fast = lastpassage_future_array(0.25, x, y, phi)
    exact = [lastpassage_future(0.25, PhaseState(a, b), phi) for a, b in zip(x, y)]
    np.testing.assert_allclose(fast, exact, rtol=1e-4, atol=1e-10)
    assert not lastpassage_future_array(1.5, x, y, phi).any()


def test_penalised_mean_asymptotic():
    phi = PenaltyWeight.triangular(1.0, 2.0)
    s = PhaseState(0.0, 1.0)
    t = 1e4
    assert penalised_mean_asymptotic(t, s, phi, "supremum") == pytest.approx(
        SURVIVAL_CONSTANT * t ** -0.25 * phi_cap_supremum(s, phi), rel=1e-12)
    with pytest.raises(DomainError):
        penalised_mean_asymptotic(0.0, s, phi)


def test_change_of_measure_weights_accept_arrays():
    s = PhaseState(1.0, 0.0)
    z = np.array([-2.0, -0.5, 0.0])
    np.testing.assert_allclose(passage_weight_q(s, 0.5, z), [passage_weight_q(s, 0.5, float(v)) for v in z],
                               rtol=1e-5)
    u = np.array([-0.3, np.nan, 0.0, 0.7])
    w = sigma_weight_q(s, 1.0, u)
    assert w[0] == 0.0 and w[1] == 0.0
    assert w[2] == pytest.approx(h_eval(PhaseState(0.0, 1.0)) / h_eval(s))
    assert w[3] == pytest.approx(sigma_weight_q(s, 1.0, 0.7), rel=1e-5)
    assert sigma_weight_q(s, 1.0, -0.1) == 0.0
    with pytest.raises(DomainError):
        passage_weight_q(s, 1.0, z)


def test_lastpassage_cdf_weights_each_bin_by_h():
    """Mass 1/2 at u = 1.5 and mass 1/4 at u = 0.5: with a = 0.6 only the first counts."""
    s = PhaseState(1.0, 0.0)
    density = np.array([[0.125], [0.25]])
    binned = SimpleNamespace(u_edges=np.array([0.0, 1.0, 2.0]), v_edges=np.array([-1.0, 1.0]), density=density)
    expected = 0.5 * h_eval(PhaseState(0.9, 0.0)) / h_eval(s)
    assert lastpassage_cdf(s, 0.6, binned) == pytest.approx(expected, rel=1e-5)
    both = (0.25 * h_eval(PhaseState(0.3, 0.0)) + 0.5 * h_eval(PhaseState(1.3, 0.0))) / h_eval(s)
    assert lastpassage_cdf(s, 0.2, binned) == pytest.approx(both, rel=1e-5)
    with pytest.raises(DomainError):
        lastpassage_cdf(s, 1.0, binned)


def test_azema_ratio_edges():
    phi = PenaltyWeight.parse("0:1,0.5:0,1:1,2:0")
    s = PhaseState(0.3, -0.5)
    # past the end of the support nothing is left to come
    assert azema_ratio(phi.support_end, 0.5, s, phi) == 0.0
    assert azema_ratio(3.0, None, s, phi) == 0.0
    # phi vanishes at the last zero: all of M_t is still to come
    assert azema_ratio(1.0, 0.5, s, phi) == 1.0
    inner = azema_ratio(1.0, None, s, phi)
    assert 0 < inner < 1
    assert inner == pytest.approx(lastpassage_future(1.0, s, phi) / martingale_lastpassage(1.0, None, s, phi))
