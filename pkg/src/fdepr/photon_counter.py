"""Cycle-based single-photon detector model, count statistics and SNR formulas.

Click sampling: the detector runs back-to-back cycles of ``cycle_duration``
starting at the dead time.  A cycle clicks with probability
1 - exp(-m), m being the expected number of photons (signal plus dark) that
reach the detector during the cycle.  Sequence k draws from its own generator
seeded by ``SeedSequence(seed).spawn(n_sequences)[k]``, so results do not
depend on how sequences are distributed over workers.
"""

from __future__ import annotations

import csv
import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fluorescence_sim import FluorescenceCurve


@dataclass(frozen=True)
class CounterConfig:
    cycle_duration: float = 12e-6
    dark_rate: float = 0.0
    dead_time: float = 50e-6
    t_rep: float = 1.0

    def __post_init__(self):
        if not self.cycle_duration > 0:
            raise ValueError("cycle duration must be positive")
        if self.dark_rate < 0:
            raise ValueError("dark rate must be non-negative")
        if self.dead_time < 0:
            raise ValueError("dead time must be non-negative")
        if not (math.isfinite(self.t_rep) and self.t_rep > self.dead_time):
            raise ValueError("repetition time must be finite and exceed the dead time")

    @property
    def n_cycles(self) -> int:
        return int(math.floor((self.t_rep - self.dead_time) / self.cycle_duration * (1 + 1e-12)))

    def cycle_starts(self) -> np.ndarray:
        return self.dead_time + np.arange(self.n_cycles) * self.cycle_duration


@dataclass(frozen=True)
class ClickStream:
    index: int
    t: np.ndarray
    clicks: np.ndarray  # uint8 0/1


@dataclass
class ClickStreams:
    """All sequences of a run; outcomes kept bit-packed row by row."""

    config: CounterConfig
    packed: np.ndarray  # (n_sequences, ceil(n_cycles / 8)) uint8
    n_cycles: int
    seed: int | None = None
    saturated: bool = False

    @property
    def n_sequences(self) -> int:
        return self.packed.shape[0]

    @property
    def t(self) -> np.ndarray:
        return self.config.dead_time + np.arange(self.n_cycles) * self.config.cycle_duration

    def bits(self, rows=slice(None)) -> np.ndarray:
        return np.unpackbits(self.packed[rows], axis=-1, count=self.n_cycles)

    def __len__(self) -> int:
        return self.n_sequences

    def __getitem__(self, k: int) -> ClickStream:
        return ClickStream(k, self.t, self.bits(k))

    def __iter__(self):
        return (self[k] for k in range(self.n_sequences))


def _cycle_expectation(curve: FluorescenceCurve, config: CounterConfig) -> np.ndarray:
    """Expected signal photons per cycle, from the cumulative trapezoid of the curve."""
    t, r = curve.t, curve.rate
    edges = config.dead_time + np.arange(config.n_cycles + 1) * config.cycle_duration
    if t[0] > edges[0] * (1 + 1e-12) or t[-1] < edges[-1] * (1 - 1e-12):
        raise ValueError(f"curve covers [{t[0]:.6g}, {t[-1]:.6g}] s but counting needs "
                         f"[{edges[0]:.6g}, {edges[-1]:.6g}] s")
    if np.any(r < 0):
        raise ValueError("rate must be non-negative")
    grid = np.union1d(t, edges)
    rate = np.interp(grid, t, r)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (rate[1:] + rate[:-1]) * np.diff(grid))])
    return np.diff(np.interp(edges, grid, cum))


def sample_clicks(curve: FluorescenceCurve, config: CounterConfig, n_sequences: int, seed: int | None = None,
                  n_spins: int | None = None, workers: int = 1) -> ClickStreams:
    """Monte Carlo click records for ``n_sequences`` repetitions.

    With ``n_spins`` the signal comes from a finite ensemble: the number of
    detected spin photons per sequence is binomial with ``n_spins`` trials and
    mean equal to the curve integral over the counting window, their times
    follow the curve.  This adds the partition noise that a rate-only model
    lacks.
    """
    if n_sequences < 0:
        raise ValueError("n_sequences must be non-negative")
    signal = _cycle_expectation(curve, config)
    dark = config.dark_rate * config.cycle_duration
    n_cycles = config.n_cycles
    cdf = None
    if n_spins is None:
        p = -np.expm1(-(signal + dark))
    else:
        p = np.full(n_cycles, -math.expm1(-dark))
        mean_photons = float(signal.sum())
        if mean_photons > n_spins:
            raise ValueError(f"expected {mean_photons:.4g} detected photons from only {n_spins} spins")
        q = mean_photons / n_spins if n_spins else 0.0
        cdf = np.cumsum(signal) / mean_photons if mean_photons > 0 else None
    saturated = bool(np.any(-np.expm1(-(signal + dark)) > 0.5))
    if saturated:
        warnings.warn("click probability exceeds 0.5 in some cycles; detector saturated", RuntimeWarning,
                      stacklevel=2)

    children = np.random.SeedSequence(seed).spawn(n_sequences)
    row_bytes = (n_cycles + 7) // 8
    packed = np.zeros((n_sequences, row_bytes), np.uint8)

    def run(k):
        rng = np.random.default_rng(children[k])
        bits = rng.random(n_cycles) < p
        if n_spins is not None and cdf is not None:
            emitted = rng.binomial(n_spins, q)
            cells = np.searchsorted(cdf, rng.random(emitted) * cdf[-1], side="right")
            bits[np.minimum(cells, n_cycles - 1)] = True
        packed[k] = np.packbits(bits)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, range(n_sequences)))
    else:
        for k in range(n_sequences):
            run(k)
    return ClickStreams(config, packed, n_cycles, seed, saturated)


# --------------------------------------------------------------------------
# persistence

_MAGIC = b"FDCLK1\x00\x00"
_HEADER = struct.Struct("<8sddddqqqq")


def write_clicks(streams: ClickStreams, path) -> None:
    """Binary file: fixed header then the bit-packed outcome rows."""
    c = streams.config
    seed = -1 if streams.seed is None else int(streams.seed)
    header = _HEADER.pack(_MAGIC, c.cycle_duration, c.dead_time, c.t_rep, c.dark_rate, seed,
                          streams.n_sequences, streams.n_cycles, int(streams.saturated))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(streams.packed).tobytes())


def read_clicks(path) -> ClickStreams:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError("file too short for a click header")
    magic, cycle, dead, t_rep, dark, seed, n_seq, n_cycles, sat = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ValueError("not a click-stream file")
    row_bytes = (n_cycles + 7) // 8
    payload = np.frombuffer(data, np.uint8, offset=_HEADER.size)
    if payload.size != n_seq * row_bytes:
        raise ValueError("payload size does not match header")
    config = CounterConfig(cycle, dark, dead, t_rep)
    return ClickStreams(config, payload.reshape(n_seq, row_bytes).copy(), n_cycles,
                        None if seed < 0 else seed, bool(sat))


def export_clicks_csv(streams: ClickStreams, path, sequence: int = 0) -> None:
    s = streams[sequence]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "click"])
        for t, c in zip(s.t, s.clicks):
            w.writerow([repr(float(t)), int(c)])


# --------------------------------------------------------------------------
# statistics


def _cycles_for(duration: float, cycle: float, what: str) -> int:
    n = duration / cycle
    k = int(math.floor(n + 1e-9))
    if abs(n - k) > 1e-9 * max(1.0, n):
        warnings.warn(f"{what} {duration:.6g} s is not a multiple of the cycle; using {k * cycle:.6g} s",
                      RuntimeWarning, stacklevel=3)
    return k


def coarse_grain(streams: ClickStreams, t_b: float) -> tuple[np.ndarray, np.ndarray]:
    """Average click rate in consecutive windows of ``t_b``; returns (window starts, rate)."""
    cycle = streams.config.cycle_duration
    if t_b < cycle * (1 - 1e-9):
        raise ValueError("window must be at least one cycle")
    m = _cycles_for(t_b, cycle, "window")
    n_bins = streams.n_cycles // m
    totals = np.zeros(n_bins)
    for start in range(0, streams.n_sequences, 1024):
        bits = streams.bits(slice(start, start + 1024))[:, : n_bins * m]
        totals += bits.reshape(bits.shape[0], n_bins, m).sum(axis=(0, 2))
    width = m * cycle
    starts = streams.config.dead_time + np.arange(n_bins) * width
    return starts, totals / max(streams.n_sequences, 1) / width


@dataclass
class CountHistogram:
    counts: np.ndarray  # per sequence
    t_int: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.counts)) if self.counts.size else 0.0

    @property
    def std(self) -> float:
        return float(np.std(self.counts, ddof=1)) if self.counts.size > 1 else 0.0

    def distribution(self) -> tuple[np.ndarray, np.ndarray]:
        values, freq = np.unique(self.counts, return_counts=True)
        return values, freq / self.counts.size


def count_statistics(streams: ClickStreams, t_int: float) -> CountHistogram:
    n = _cycles_for(t_int, streams.config.cycle_duration, "integration time")
    if n > streams.n_cycles:
        raise ValueError(f"integration time {t_int:.6g} s exceeds the recorded window")
    counts = np.zeros(streams.n_sequences, np.int64)
    for start in range(0, streams.n_sequences, 1024):
        counts[start:start + 1024] = streams.bits(slice(start, start + 1024))[:, :n].sum(axis=1)
    return CountHistogram(counts, n * streams.config.cycle_duration)


def write_histogram_csv(hist: CountHistogram, path) -> None:
    values, prob = hist.distribution()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["C", "probability"])
        for v, p in zip(values, prob):
            w.writerow([int(v), repr(float(p))])


# --------------------------------------------------------------------------
# signal-to-noise


def count_noise(n_spins, eta, gamma1, dark_rate, t_int: float | None = None) -> float:
    """Standard deviation of one-shot counts from dark counts and partition noise.

    Without ``t_int`` the dark counts are collected over 1/gamma1.  With it,
    dark counts accumulate over ``t_int`` and only the photons emitted inside
    the window count towards the partition term.
    """
    if t_int is None:
        return math.sqrt(dark_rate / gamma1 + eta * (1 - eta) * n_spins)
    q = eta * -math.expm1(-gamma1 * t_int)
    return math.sqrt(dark_rate * t_int + q * (1 - q) * n_spins)


def fd_snr(n_spins, gamma_r, dark_rate, eta) -> float:
    """One-shot SNR of fluorescence counting."""
    if min(n_spins, gamma_r, dark_rate, eta) < 0 or eta > 1:
        raise ValueError("arguments must be non-negative and eta <= 1")
    if n_spins == 0:
        return 0.0
    if gamma_r == 0:
        raise ValueError("gamma_r must be positive")
    var = dark_rate / gamma_r + eta * (1 - eta) * n_spins
    if var == 0:
        if eta == 1:
            return float(n_spins)
        raise ValueError("zero noise with zero signal")
    return eta * n_spins / math.sqrt(var)


def id_snr(n_spins, gamma_r, kappa, eta) -> float:
    """Quantum-limited Hahn-echo SNR for an ensemble much broader than kappa."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return n_spins * math.sqrt(2 * eta * gamma_r / kappa)


def snr_ratio(eta, kappa, dark_rate) -> float:
    if dark_rate <= 0:
        raise ValueError("dark rate must be positive")
    return math.sqrt(eta * kappa / (2 * dark_rate))


def echo_amplitude(g0, delta, weight, epsilon: float, kappa_c: float, kappa: float, eta: float) -> float:
    """Mean Hahn-echo quadrature for an ensemble of packets.

    Sequence: pulse of strength epsilon/2, delay, refocusing pulse of strength
    epsilon.  A packet whose half rotation angle at full strength is psi adds
    sqrt(eta Gamma_R / 2 kappa) sin(psi) sin^2(psi) per spin (perfect pulses
    give sin = 1).
    """
    from .bloch_dynamics import rabi_angle
    from .resonator_mode import purcell_rate

    g0, delta, weight = (np.asarray(v, float) for v in (g0, delta, weight))
    psi = rabi_angle(epsilon, g0, kappa_c, kappa)
    gamma_r = purcell_rate(g0, delta, kappa)
    per_spin = np.sqrt(eta * gamma_r / (2 * kappa)) * np.sin(psi) * np.sin(psi) ** 2
    return float(np.sum(weight * per_spin))


def id_snr_ensemble(g0, delta, weight, epsilon, kappa_c, kappa, eta, noise: float = 0.5) -> float:
    return abs(echo_amplitude(g0, delta, weight, epsilon, kappa_c, kappa, eta)) / noise
