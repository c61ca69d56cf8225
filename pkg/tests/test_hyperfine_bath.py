import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import constants
from scipy.integrate import solve_ivp

from fdepr.hyperfine_bath import (BathConfig, bath_averaged_rabi, bath_sites, cavity_detunings, dipolar_constants,
                                  driven_hamiltonian, enumerate_configs, envelope, load_tungsten_sites,
                                  retained_mass, scheelite_tungsten_sites, simulate_driven_spin)
from fdepr.species_registry import load_species

TWO_PI = 2 * math.pi
ER_G = np.diag([117.3e9, 117.3e9, 17.45e9])
OMEGA = TWO_PI * 200e3


def textbook_constants(position, gamma_e, gamma_w=1.8e6):
    """Axial-electron oracle with b0 along x: A = D (3cos^2 - 1), B = 3 D |cos sin|."""
    r = np.linalg.norm(position)
    c = position[0] / r
    d = constants.mu_0 * constants.h * gamma_e * gamma_w / (4 * math.pi * r**3)
    return TWO_PI * d * (3 * c**2 - 1), TWO_PI * 3 * d * abs(c) * math.sqrt(1 - c**2)


@pytest.fixture(scope="module")
def er_sites():
    return bath_sites(load_species()["Er"], (1.0, 0.0, 0.0))


def test_dipolar_matches_textbook_form():
    for pos in ([3e-10, 1e-10, 2e-10], [0.0, 4e-10, 0.0], [5e-10, 0.0, 0.0]):
        a, b = dipolar_constants(pos, np.diag([117.3e9] * 3))
        ea, eb = textbook_constants(np.array(pos), 117.3e9)
        assert a == pytest.approx(ea, rel=1e-12, abs=1e-9)
        assert b == pytest.approx(eb, rel=1e-12, abs=1e-9)


def test_dipolar_inverse_cube():
    p = np.array([2e-10, 3e-10, 1e-10])
    a1, b1 = dipolar_constants(p, ER_G)
    a2, b2 = dipolar_constants(2 * p, ER_G)
    assert a2 == pytest.approx(a1 / 8, rel=1e-12)
    assert b2 == pytest.approx(b1 / 8, rel=1e-12)


def test_dipolar_magic_angle():
    c = 1 / math.sqrt(3)
    p = 4e-10 * np.array([c, math.sqrt(1 - c**2), 0.0])
    a, b = dipolar_constants(p, np.diag([117.3e9] * 3))
    assert abs(a) < 1e-9 * abs(b)
    with pytest.raises(ValueError):
        dipolar_constants([0, 0, 0], ER_G)


def test_nearest_shell_values(er_sites):
    near = er_sites[0]
    assert near.distance * 1e10 == pytest.approx(3.7074, abs=1e-4)
    assert near.a / TWO_PI == pytest.approx(137278, rel=1e-5)
    assert near.b / TWO_PI == pytest.approx(411835, rel=1e-5)
    mags = [math.hypot(s.a, s.b) for s in er_sites]
    assert all(x >= y - 1e-6 for x, y in zip(mags, mags[1:]))


def test_site_table_matches_generator():
    shipped = load_tungsten_sites()
    generated = scheelite_tungsten_sites()
    assert shipped.shape == generated.shape == (18, 3)
    np.testing.assert_allclose(shipped, generated, atol=1e-16)
    d = np.linalg.norm(generated, axis=1)
    assert d[0] * 1e10 == pytest.approx(3.7074, abs=1e-4)
    assert np.all(np.diff(d) >= -1e-20)


def test_configuration_count_and_mass():
    cfg = BathConfig()
    configs = enumerate_configs(cfg)
    assert len(configs) == 576
    assert retained_mass(cfg) == pytest.approx(0.86, abs=0.01)
    assert sum(w for _, w in configs) == pytest.approx(1.0, rel=1e-13)
    assert configs[0] == ((), configs[0][1])


def test_full_occupancy_without_room_rejected():
    with pytest.raises(ValueError, match="probability mass"):
        enumerate_configs(BathConfig(n_sites=5, abundance=1.0, max_occupied=2))


def test_empty_bath_only():
    configs = enumerate_configs(BathConfig(max_occupied=0))
    assert configs == [((), 1.0)]
    with pytest.raises(ValueError):
        BathConfig(max_occupied=16)


def test_bare_rabi():
    t = np.linspace(0, 20e-6, 401)
    res = simulate_driven_spin([], OMEGA, t)
    np.testing.assert_allclose(res.p_up, np.sin(OMEGA * t / 2) ** 2, atol=1e-12)


@pytest.mark.parametrize("n_nuclei", [1, 2, 3])
def test_longitudinal_coupling_block_oracle(n_nuclei):
    a = TWO_PI * np.array([60e3, -25e3, 110e3])[:n_nuclei]
    delta = TWO_PI * 30e3
    t = np.linspace(0, 20e-6, 301)
    got = simulate_driven_spin([(x, 0.0) for x in a], OMEGA, t, detuning=delta).p_up
    expected = np.zeros_like(t)
    projections = np.array(np.meshgrid(*[[0.5, -0.5]] * n_nuclei)).reshape(n_nuclei, -1).T
    for m in projections:
        d = float(a @ m) - delta
        w = math.hypot(OMEGA, d)
        expected += OMEGA**2 / w**2 * np.sin(w * t / 2) ** 2
    np.testing.assert_allclose(got, expected / len(projections), atol=1e-12)


def test_single_nucleus_beating_cross_checked():
    a = b = TWO_PI * 50e3
    omega = TWO_PI * 500e3
    delta = TWO_PI * 100e3
    t = np.linspace(0, 10e-6, 4001)
    p = simulate_driven_spin([(a, b)], omega, t, detuning=delta).p_up
    _, contrast = envelope(t, p, TWO_PI / math.hypot(omega, delta))
    assert contrast.min() < 0.9
    # independent time-stepping of the same Hamiltonian for each nuclear start state
    h = driven_hamiltonian([(a, b)], omega, delta)
    check = np.zeros(len(t[::400]))
    for m in (2, 3):
        psi0 = np.zeros(4, complex)
        psi0[m] = 1.0
        sol = solve_ivp(lambda _, y: -1j * (h @ y), (0, t[-1]), psi0, t_eval=t[::400], rtol=1e-10, atol=1e-12)
        check += np.sum(np.abs(sol.y[:2]) ** 2, axis=0) / 2
    np.testing.assert_allclose(p[::400], check, atol=1e-7)


@pytest.mark.parametrize("subset", [(0,), (0, 4), (1, 6, 9)])
def test_each_configuration_unitary(er_sites, subset):
    t = np.linspace(0, 20e-6, 801)
    res = simulate_driven_spin([(er_sites[i].a, er_sites[i].b) for i in subset], OMEGA, t)
    assert np.max(np.abs(res.norm - 1)) < 1e-10
    assert np.all((res.p_up >= -1e-12) & (res.p_up <= 1 + 1e-12))


def test_three_nucleus_cap():
    with pytest.raises(ValueError):
        driven_hamiltonian([(1.0, 1.0)] * 4, OMEGA)


def test_zero_coupling_reduces_to_detuning_average():
    zero = [type(s)(s.position, 0.0, 0.0) for s in bath_sites(load_species()["Er"], (1.0, 0.0, 0.0))]
    t = np.linspace(0, 10e-6, 201)
    dets = cavity_detunings(1.45e6, 5)
    avg = bath_averaged_rabi(zero, BathConfig(), OMEGA, t, detunings=dets)
    expected = np.mean([simulate_driven_spin([], OMEGA, t, detuning=d).p_up for d in dets], axis=0)
    np.testing.assert_allclose(avg, expected, atol=1e-12)


def test_average_dephases_while_configurations_recur(er_sites):
    period = TWO_PI / OMEGA
    t = np.linspace(0, 10 * period, 1001)
    avg = bath_averaged_rabi(er_sites, BathConfig(), OMEGA, t)
    _, c = envelope(t, avg, period)
    assert c[-1] < 0.5 * c[0]
    # a single occupied site: quasi-periodic, contrast comes back to the start value
    one = simulate_driven_spin([(er_sites[0].a, er_sites[0].b)], OMEGA, np.linspace(0, 200 * period, 40001)).p_up
    _, c1 = envelope(np.linspace(0, 200 * period, 40001), one, period)
    assert c1.max() > 0.95 * c1[0]


def test_relabeling_sites_changes_nothing(er_sites):
    t = np.linspace(0, 10e-6, 101)
    cfg = BathConfig(n_sites=6, max_occupied=2)
    a = bath_averaged_rabi(er_sites[:6], cfg, OMEGA, t)
    b = bath_averaged_rabi(er_sites[:6][::-1], cfg, OMEGA, t)
    np.testing.assert_allclose(a, b, atol=1e-13)


def test_more_nuclei_damp_faster(er_sites):
    period = TWO_PI / OMEGA
    t = np.linspace(0, 6 * period, 601)
    late = []
    for p in (0.05, 0.14, 0.3):
        avg = bath_averaged_rabi(er_sites, BathConfig(abundance=p), OMEGA, t)
        late.append(envelope(t, avg, period)[1][-1])
    assert late[0] > late[1] > late[2]


def test_averaging_is_deterministic(er_sites):
    t = np.linspace(0, 5e-6, 51)
    a = bath_averaged_rabi(er_sites, BathConfig(), OMEGA, t)
    b = bath_averaged_rabi(er_sites, BathConfig(), OMEGA, t)
    assert a.tobytes() == b.tobytes()


@settings(max_examples=25, deadline=None)
@given(p=st.floats(0.0, 1.0), n=st.integers(1, 15), k=st.integers(0, 3))
def test_weights_normalized(p, n, k):
    k = min(k, n)
    cfg = BathConfig(n_sites=n, abundance=p, max_occupied=k)
    if retained_mass(cfg) == 0:
        with pytest.raises(ValueError):
            enumerate_configs(cfg)
        return
    configs = enumerate_configs(cfg)
    assert len(configs) == sum(math.comb(n, j) for j in range(k + 1))
    assert sum(w for _, w in configs) == pytest.approx(1.0, rel=1e-9)


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-1e6, 1e6), b=st.floats(-1e6, 1e6), d=st.floats(-1e6, 1e6))
def test_single_nucleus_unitary(a, b, d):
    res = simulate_driven_spin([(a, b)], OMEGA, np.linspace(0, 5e-6, 21), detuning=d)
    assert np.max(np.abs(res.norm - 1)) < 1e-10
