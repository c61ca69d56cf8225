import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fdepr.fluorescence_sim import FluorescenceCurve
from fdepr.photon_counter import (ClickStreams, CounterConfig, coarse_grain, count_noise, count_statistics,
                                  echo_amplitude, export_clicks_csv, fd_snr, id_snr, id_snr_ensemble, read_clicks,
                                  sample_clicks, snr_ratio, write_clicks, write_histogram_csv)

CYCLE = 12e-6


def flat(rate, t_end):
    t = np.array([0.0, t_end])
    return FluorescenceCurve(t, np.full(2, float(rate)))


def decaying(amp, g, t_end, n=20001):
    t = np.linspace(0.0, t_end, n)
    return FluorescenceCurve(t, amp * g * np.exp(-g * t))


def test_no_signal_no_dark_gives_no_clicks():
    cfg = CounterConfig(CYCLE, 0.0, 50e-6, 0.01)
    s = sample_clicks(flat(0.0, 0.01), cfg, 20, seed=3)
    assert not s.bits().any()
    assert not s.saturated


def test_cycles_start_after_dead_time():
    cfg = CounterConfig(CYCLE, 0.0, 50e-6, 0.01)
    s = sample_clicks(flat(10.0, 0.01), cfg, 2, seed=0)
    assert s.t[0] == pytest.approx(50e-6)
    assert s[1].clicks.shape == s.t.shape
    assert set(np.unique(s.bits())) <= {0, 1}


def test_constant_rate_mean_within_poisson_bounds():
    r, t_int, n = 300.0, 0.05, 10_000
    cfg = CounterConfig(CYCLE, 0.0, 0.0, t_int)
    hist = count_statistics(sample_clicks(flat(r, t_int), cfg, n, seed=11), cfg.n_cycles * CYCLE)
    expected = r * hist.t_int
    assert abs(hist.mean - expected) < 3 * math.sqrt(expected / n)


def test_dark_only_one_second():
    cfg = CounterConfig(CYCLE, 500.0, 0.0, 1.0)
    hist = count_statistics(sample_clicks(flat(0.0, 1.0), cfg, 400, seed=5), 83333 * CYCLE)
    assert hist.mean == pytest.approx(500.0, abs=3 * math.sqrt(500.0 / 400) + 2)


def test_dark_only_variance_equals_mean():
    cfg = CounterConfig(CYCLE, 500.0, 0.0, 0.1)
    hist = count_statistics(sample_clicks(flat(0.0, 0.1), cfg, 10_000, seed=9), 8333 * CYCLE)
    assert hist.std**2 == pytest.approx(hist.mean, rel=0.10)


def test_seed_determinism_and_worker_independence():
    cfg = CounterConfig(CYCLE, 200.0, 50e-6, 0.02)
    curve = decaying(5.0, 200.0, 0.02)
    a = sample_clicks(curve, cfg, 50, seed=42)
    b = sample_clicks(curve, cfg, 50, seed=42, workers=4)
    c = sample_clicks(curve, cfg, 50, seed=43)
    assert np.array_equal(a.packed, b.packed)
    assert not np.array_equal(a.packed, c.packed)


def test_coarse_grain_constant_rate():
    cfg = CounterConfig(CYCLE, 500.0, 0.0, 0.1)
    s = sample_clicks(flat(0.0, 0.1), cfg, 10_000, seed=2)
    with pytest.warns(RuntimeWarning, match="not a multiple"):
        starts, rate = coarse_grain(s, 0.01)
    p = -math.expm1(-500.0 * CYCLE)
    sigma = math.sqrt(833 * p * (1 - p) / 10_000) / (833 * CYCLE)
    assert len(rate) == 10
    assert np.all(np.abs(rate - p / CYCLE) < 3.5 * sigma)
    assert starts[1] - starts[0] == pytest.approx(833 * CYCLE)


def test_coarse_grain_all_ones():
    cfg = CounterConfig(CYCLE, 0.0, 0.0, 0.012)
    s = ClickStreams(cfg, np.full((1, (cfg.n_cycles + 7) // 8), 255, np.uint8), cfg.n_cycles)
    _, rate = coarse_grain(s, 10 * CYCLE)
    np.testing.assert_allclose(rate, 1 / CYCLE)
    assert count_statistics(s, 100 * CYCLE).std == 0.0


def test_coarse_grain_snaps_and_rejects():
    cfg = CounterConfig(CYCLE, 0.0, 0.0, 0.012)
    s = sample_clicks(flat(100.0, 0.012), cfg, 3, seed=0)
    with pytest.warns(RuntimeWarning, match="not a multiple"):
        coarse_grain(s, 10.5 * CYCLE)
    with pytest.raises(ValueError):
        coarse_grain(s, 0.5 * CYCLE)


def test_coarse_grain_recovers_known_curve():
    amp, g, t_rep = 40.0, 100.0, 0.03
    curve = decaying(amp, g, t_rep)
    cfg = CounterConfig(CYCLE, 0.0, 0.0, t_rep)
    n = 10_000
    starts, rate = coarse_grain(sample_clicks(curve, cfg, n, seed=8), 100 * CYCLE)
    width = 100 * CYCLE
    m = amp * (np.exp(-g * starts) - np.exp(-g * (starts + width)))  # photons per window
    per_cycle = m / 100
    p = -np.expm1(-per_cycle)
    expected = 100 * p / width
    sigma = np.sqrt(100 * p * (1 - p) / n) / width
    assert np.all(np.abs(rate - expected) <= 4 * sigma)


def test_monte_carlo_mean_converges():
    curve = decaying(3.0, 200.0, 0.02)
    cfg = CounterConfig(CYCLE, 100.0, 0.0, 0.02)
    t_int = 1666 * CYCLE
    target = 3.0 * (1 - math.exp(-200 * t_int)) + 100.0 * t_int
    errs = []
    for n in (100, 10_000):
        hist = count_statistics(sample_clicks(curve, cfg, n, seed=17), t_int)
        errs.append(abs(hist.mean - target) / (math.sqrt(target / n)))
    # Bernoulli cycles lose a small fraction of coincident photons
    assert all(e < 4 for e in errs)


def test_finite_ensemble_noise_matches_partition_model():
    n_spins, eta, g, alpha = 1000, 0.15, 100.0, 2000.0
    t = np.linspace(0, 0.05, 20001)
    curve = FluorescenceCurve(t, eta * n_spins * g * np.exp(-g * t))
    cfg = CounterConfig(CYCLE, alpha, 0.0, 0.05)
    streams = sample_clicks(curve, cfg, 10_000, seed=1, n_spins=n_spins)
    hist = count_statistics(streams, 2500 * CYCLE)
    assert hist.std == pytest.approx(count_noise(n_spins, eta, g, alpha), rel=0.15)


def test_finite_ensemble_rejects_impossible_mean():
    curve = flat(1e6, 0.01)
    with pytest.raises(ValueError, match="spins"):
        sample_clicks(curve, CounterConfig(CYCLE, 0.0, 0.0, 0.01), 2, seed=0, n_spins=10)


def test_saturation_flagged():
    cfg = CounterConfig(CYCLE, 0.0, 0.0, 0.001)
    with pytest.warns(RuntimeWarning, match="saturated"):
        s = sample_clicks(flat(1e6, 0.001), cfg, 2, seed=0)
    assert s.saturated


def test_binary_round_trip(tmp_path):
    cfg = CounterConfig(CYCLE, 300.0, 50e-6, 0.01)
    s = sample_clicks(decaying(2.0, 300.0, 0.01), cfg, 13, seed=77)
    path = tmp_path / "clicks.bin"
    write_clicks(s, path)
    back = read_clicks(path)
    assert np.array_equal(back.packed, s.packed)
    assert back.config == cfg and back.seed == 77 and back.n_cycles == s.n_cycles
    path.write_bytes(b"nonsense" * 10)
    with pytest.raises(ValueError):
        read_clicks(path)


def test_csv_exports(tmp_path):
    cfg = CounterConfig(CYCLE, 3000.0, 0.0, 0.002)
    s = sample_clicks(flat(0.0, 0.002), cfg, 50, seed=1)
    export_clicks_csv(s, tmp_path / "c.csv", sequence=3)
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "t_s,click"
    assert len(rows) == cfg.n_cycles + 1
    hist = count_statistics(s, 100 * CYCLE)
    write_histogram_csv(hist, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "C,probability"
    assert sum(float(x.split(",")[1]) for x in lines[1:]) == pytest.approx(1.0)


def test_fd_snr_values():
    assert fd_snr(1000, 100.0, 2e3, 0.15) == pytest.approx(12.35, abs=0.01)
    assert fd_snr(1000, 100.0, 0.0, 1.0) == 1000
    assert fd_snr(0, 100.0, 2e3, 0.15) == 0.0
    with pytest.raises(ValueError):
        fd_snr(10, 100.0, 1.0, 1.5)


def test_id_snr_values():
    assert id_snr(1000, 100.0, 1.45e6, 0.15) == pytest.approx(4.55, abs=0.01)
    assert id_snr(1000, 100.0, 1.45e6, 0.0) == 0.0
    assert id_snr(1000, 400.0, 1.45e6, 0.15) == pytest.approx(2 * id_snr(1000, 100.0, 1.45e6, 0.15))


def test_snr_ratio_values():
    # the FD/ID ratio identity holds when dark counts dominate the noise (small N)
    assert snr_ratio(0.15, 1.45e6, 2e3) == pytest.approx(7.37, abs=0.01)
    assert snr_ratio(0.0, 1.45e6, 2e3) == 0.0
    assert snr_ratio(0.15, 1.45e6, 2e3) == pytest.approx(fd_snr(1, 100, 2e3, 0.15) / id_snr(1, 100, 1.45e6, 0.15),
                                                         rel=0.01)
    with pytest.raises(ValueError):
        snr_ratio(0.15, 1.45e6, 0.0)


def test_echo_amplitude_perfect_pulses():
    from fdepr.bloch_dynamics import rabi_angle
    g0 = np.array([2 * math.pi * 1e3])
    eps = (math.pi / 2) / rabi_angle(1.0, g0[0], 8.2e5, 1.45e6)
    amp = echo_amplitude(g0, [0.0], [1000.0], eps, 8.2e5, 1.45e6, 0.15)
    gamma_r = 4 * g0[0] ** 2 / 1.45e6
    assert amp == pytest.approx(1000 * math.sqrt(0.15 * gamma_r / (2 * 1.45e6)), rel=1e-9)
    assert id_snr_ensemble(g0, [0.0], [1000.0], eps, 8.2e5, 1.45e6, 0.15) == pytest.approx(2 * amp)


@settings(max_examples=40, deadline=None)
@given(n=st.floats(1, 1e6), g=st.floats(1e-2, 1e4), a=st.floats(1e-3, 1e5), eta=st.floats(0.01, 0.99))
def test_fd_snr_monotone(n, g, a, eta):
    base = fd_snr(n, g, a, eta)
    assert fd_snr(2 * n, g, a, eta) >= base
    assert fd_snr(n, 2 * g, a, eta) >= base
    assert fd_snr(n, g, a, min(1.0, eta * 1.01)) >= base * (1 - 1e-12)


@settings(max_examples=40, deadline=None)
@given(eta=st.floats(0.01, 1.0), k=st.floats(1e3, 1e8), a=st.floats(1e-2, 1e5))
def test_snr_ratio_monotone(eta, k, a):
    r = snr_ratio(eta, k, a)
    assert snr_ratio(eta * 0.5, k, a) <= r
    assert snr_ratio(eta, 2 * k, a) >= r
    assert snr_ratio(eta, k, 2 * a) <= r


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_sampling_reproducible(seed):
    cfg = CounterConfig(CYCLE, 1000.0, 0.0, 0.002)
    curve = decaying(1.0, 1000.0, 0.002, 201)
    assert np.array_equal(sample_clicks(curve, cfg, 5, seed=seed).packed, sample_clicks(curve, cfg, 5, seed=seed).packed)
