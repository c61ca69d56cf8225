import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from fdepr.bloch_dynamics import (IntegrationError, Pulse, SpinPacket, cavity_response, closed_form_evolve,
                                  evolve_packet, evolve_packets, generalized_rabi_excitation, mean_photon_number,
                                  plateau_amplitude, rabi_angle, rotate, steady_state_init)

TWO_PI = 2 * math.pi
KC, KAPPA = 8.2e5, 1.45e6


def g_for_rotation(angle, pulse, res):
    """Coupling giving a total resonant rotation ``angle`` for ``pulse``."""
    return angle / (2 * abs(plateau_amplitude(pulse, res.kappa_c, res.kappa)) * pulse.duration)


def test_photon_number_on_plateau(resonator):
    pulse = Pulse(11.5, 60e-6)
    assert mean_photon_number(pulse, resonator) == pytest.approx(4 * KC * (11.5 / math.sqrt(1e-9)) ** 2 / KAPPA**2)
    assert mean_photon_number(pulse, resonator) == pytest.approx(2.06e5, rel=0.005)
    field = cavity_response(pulse, resonator)
    end = np.searchsorted(field.t, pulse.duration, side="right") - 1
    assert abs(field.alpha[end]) ** 2 == pytest.approx(mean_photon_number(pulse, resonator), rel=1e-6)


def test_field_matches_ode_oracle(resonator):
    pulse = Pulse(2.0, 3e-6)
    field = cavity_response(pulse, resonator)
    beta = pulse.beta_si

    def rhs(t, y):
        a = y[0] + 1j * y[1]
        da = -KAPPA / 2 * a + (math.sqrt(KC) * beta if t <= pulse.duration else 0.0)
        return [da.real, da.imag]

    sol = solve_ivp(rhs, (0, field.t[-1]), [0.0, 0.0], t_eval=field.t[::50], rtol=1e-10, atol=1e-6,
                    max_step=0.02 / KAPPA)
    np.testing.assert_allclose(field.alpha[::50].real, sol.y[0], atol=1e-6 * abs(field.alpha).max())


def test_zero_drive_gives_zero_field(resonator):
    field = cavity_response(Pulse(0.0, 4e-6), resonator)
    assert not np.any(field.alpha)


@pytest.mark.parametrize("kdt", [30.0, 45.0, 80.0])
def test_long_pulse_reaches_plateau(resonator, kdt):
    pulse = Pulse(1.0, kdt / KAPPA)
    field = cavity_response(pulse, resonator)
    end = np.searchsorted(field.t, pulse.duration, side="right") - 1
    assert abs(abs(field.alpha[end]) ** 2 / mean_photon_number(pulse, resonator) - 1) < 1e-6


def test_field_decays_after_pulse(resonator):
    pulse = Pulse(1.0, 4e-6)
    field = cavity_response(pulse, resonator)
    after = field.t > pulse.duration
    t, a = field.t[after], np.abs(field.alpha[after])
    np.testing.assert_allclose(a / a[0], np.exp(-KAPPA / 2 * (t - t[0])), rtol=1e-9)


def test_coarse_grid_rejected(resonator):
    pulse = Pulse(1.0, 4e-6)
    with pytest.raises(ValueError, match="exceeds"):
        cavity_response(pulse, resonator, np.arange(0, 5e-5, 0.2 / KAPPA))


def test_rabi_angle_value():
    psi = rabi_angle(4.65e4, TWO_PI * 1e3, KC, KAPPA)
    assert psi == pytest.approx(11.5, abs=0.05)
    assert rabi_angle(0.0, TWO_PI * 1e3, KC, KAPPA) == 0.0
    assert rabi_angle(4.65e4, TWO_PI * 3e3, KC, KAPPA) == pytest.approx(3 * psi, rel=1e-14)
    with pytest.raises(ValueError):
        rabi_angle(1.0, 1.0, KC, 0.0)


def test_rabi_angle_matches_integrated_field(resonator):
    pulse = Pulse.from_strength(4.65e4, 40 / KAPPA)
    field = cavity_response(pulse, resonator)
    g0 = TWO_PI * 1e3
    area = np.trapezoid(2 * g0 * np.abs(field.alpha), field.t)
    # rotation angle is twice the half-angle convention
    assert area == pytest.approx(2 * rabi_angle(pulse.epsilon, g0, KC, KAPPA), rel=0.01)


def test_repetition_initial_state():
    assert steady_state_init(0.15, 2.0) == pytest.approx(-0.1296, abs=5e-5)
    assert steady_state_init(0.15, math.inf) == -0.5
    assert steady_state_init(0.15, 0.0) == 0.0
    with pytest.raises(ValueError):
        steady_state_init(0.15, -1.0)


@pytest.mark.parametrize("angle,sz", [(math.pi, 0.5), (2 * math.pi, -0.5)])
@pytest.mark.parametrize("method", ["rk4", "closed"])
def test_resonant_flip(resonator, angle, sz, method):
    pulse = Pulse(1.0, 50e-6)
    field = cavity_response(pulse, resonator)
    p = SpinPacket(g_for_rotation(angle, pulse, resonator), 0.0, gamma_r=1e-9)
    out = evolve_packet(p, field, method=method)
    assert out.sz == pytest.approx(sz, abs=1e-6)


def test_detuned_packet_barely_excited(resonator):
    pulse = Pulse(1.0, 200e-6)
    field = cavity_response(pulse, resonator)
    g0 = g_for_rotation(math.pi, pulse, resonator)
    omega = 2 * g0 * abs(plateau_amplitude(pulse, KC, KAPPA))
    out = evolve_packet(SpinPacket(g0, 5 * omega), field, method="rk4")
    oracle = generalized_rabi_excitation(omega, 5 * omega, pulse.duration)
    assert out.excitation < 0.04
    assert out.excitation == pytest.approx(oracle, abs=1e-3)


@pytest.mark.parametrize("angle", [0.3, 1.0, 2.2, 4.0])
def test_rk4_matches_generalized_rabi_on_resonance(resonator, angle):
    pulse = Pulse(1.0, 100e-6)
    field = cavity_response(pulse, resonator)
    g0 = g_for_rotation(angle, pulse, resonator)
    omega = 2 * g0 * abs(plateau_amplitude(pulse, KC, KAPPA))
    out = evolve_packet(SpinPacket(g0, 0.0), field, method="rk4")
    assert out.excitation == pytest.approx(generalized_rabi_excitation(omega, 0.0, pulse.duration), abs=1e-4)


def test_rk4_matches_solve_ivp(resonator):
    pulse = Pulse(0.5, 6e-6)
    field = cavity_response(pulse, resonator)
    g0, delta, g1, gphi = TWO_PI * 300.0, 2e5, 3e4, 1e4
    out = evolve_packets([g0], [delta], [0.1, -0.05, -0.3], [g1], field, gamma_phi=gphi, method="rk4")[0]
    lam = KAPPA / 2
    a_ss = math.sqrt(KC) * pulse.beta_si / lam
    dt = pulse.duration

    def alpha(t):
        return a_ss * (1 - math.exp(-lam * t)) if t <= dt else a_ss * (1 - math.exp(-lam * dt)) * math.exp(-lam * (t - dt))

    def rhs(t, s):
        x, y, z = s
        ox, oy, d = 2 * g0 * alpha(t), 0.0, -delta
        g2 = g1 / 2 + gphi
        return [oy * z - d * y - g2 * x, d * x - ox * z - g2 * y, ox * y - oy * x - g1 * (z + 0.5)]

    sol = solve_ivp(rhs, (0, field.t[-1]), [0.1, -0.05, -0.3], rtol=1e-11, atol=1e-13, max_step=0.05 / KAPPA)
    np.testing.assert_allclose(out, sol.y[:, -1], atol=1e-8)


def test_closed_form_agrees_with_rk4_for_long_pulse(resonator):
    pulse = Pulse(1.0, 300e-6)
    field = cavity_response(pulse, resonator)
    g0 = np.full(5, g_for_rotation(1.3, pulse, resonator))
    delta = np.array([0.0, 2e3, -5e3, 1e4, 3e4])
    a = evolve_packets(g0, delta, [0, 0, -0.5], 0.0, field, method="rk4")
    b = evolve_packets(g0, delta, [0, 0, -0.5], 0.0, field, method="closed")
    np.testing.assert_allclose(a[:, 2], b[:, 2], atol=1e-4)


def test_norm_preserved_without_relaxation(resonator):
    pulse = Pulse(1.0, 20e-6)
    field = cavity_response(pulse, resonator)
    g0 = np.linspace(10.0, 3e3, 7)
    s = evolve_packets(g0, np.linspace(-2e5, 2e5, 7), [0.3, 0.0, -0.4], 0.0, field, method="rk4")
    np.testing.assert_allclose(np.linalg.norm(s, axis=1), 0.5, atol=1e-9)


def test_norm_shrinks_under_relaxation_only(resonator):
    field = cavity_response(Pulse(0.0, 4e-6), resonator)
    s0 = np.array([0.3, 0.2, 0.1])
    s = evolve_packets([0.0], [1e5], s0, [2e4], field, gamma_phi=1e4, method="rk4")[0]
    assert np.linalg.norm(s) <= np.linalg.norm(s0)


def test_auto_switches_to_closed_form_for_fast_packets(resonator):
    pulse = Pulse(30.0, 2e-6)
    field = cavity_response(pulse, resonator)
    s = evolve_packets([TWO_PI * 1e4], [0.0], [0, 0, -0.5], 0.0, field, method="auto")
    assert np.linalg.norm(s) == pytest.approx(0.5, abs=1e-9)


def test_invalid_method_and_state(resonator):
    field = cavity_response(Pulse(1.0, 4e-6), resonator)
    with pytest.raises(ValueError):
        evolve_packets([1.0], [0.0], [0, 0, -0.5], 0.0, field, method="euler")
    with pytest.raises(ValueError):
        SpinPacket(1.0, 0.0, s=(0.0, 0.0, 0.6))
    assert issubclass(IntegrationError, RuntimeError)


@settings(max_examples=50, deadline=None)
@given(s=st.tuples(*[st.floats(-0.28, 0.28)] * 3), w=st.tuples(*[st.floats(-1e6, 1e6)] * 3), tau=st.floats(0, 1e-3))
def test_rotation_preserves_norm(s, w, tau):
    s = np.array([s])
    out = rotate(s, np.array([w]), tau)
    assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(s), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(g1=st.floats(0.0, 1e3), t_rep=st.floats(0.0, 1e3))
def test_initial_state_between_saturated_and_ground(g1, t_rep):
    sz = steady_state_init(g1, t_rep)
    assert -0.5 <= sz <= 0.0


@settings(max_examples=40, deadline=None)
@given(two_g=st.floats(0, 1e3), det=st.floats(-1e5, 1e5), g1=st.floats(0, 1e3), dt=st.floats(1e-7, 1e-3))
def test_closed_form_stays_in_bloch_ball(two_g, det, g1, dt):
    s = closed_form_evolve([0.0, 0.0, -0.5], np.array([two_g]), np.array([det]), 40 + 3j, dt,
                           np.array([g1]), np.array([g1 / 2]))
    assert np.linalg.norm(s) <= 0.5 + 1e-12
    p = generalized_rabi_excitation(two_g * abs(40 + 3j), det, dt)
    assert 0.0 <= p <= 1.0
