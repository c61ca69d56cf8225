"""Ensemble fluorescence: bin the coupling and detuning distributions into spin
packets, evolve every packet through the pulse and sum their incoherent
emission.  Also provides the closed-form count scaling for a thin-wire
coupling distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special, stats

from . import _kernels
from .bloch_dynamics import Pulse, cavity_response, evolve_packets, steady_state_init, SQRT_NS
from .resonator_mode import CouplingDistribution, ResonatorParams, coupling_limit, purcell_rate


@dataclass(frozen=True)
class LineShape:
    """Normalized detuning distribution rho(delta).

    ``width`` (rad/s) is the standard deviation for a Gaussian and the
    half-width at half-maximum for a Lorentzian.  ``kind="delta"`` puts every
    spin at ``center``.  Tabulated shapes take ``table=(detunings, density)``.
    """

    kind: str = "lorentzian"
    width: float = 0.0
    center: float = 0.0
    table: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("lorentzian", "gaussian", "tabulated", "delta"):
            raise ValueError(f"unknown line shape {self.kind!r}")
        if self.kind in ("lorentzian", "gaussian") and self.width <= 0:
            raise ValueError("line width must be positive")
        if self.kind == "tabulated":
            if self.table is None:
                raise ValueError("tabulated line shape needs a table")
            x, y = (np.asarray(v, float) for v in self.table)
            if np.any(np.diff(x) <= 0) or np.any(y < 0):
                raise ValueError("table must have increasing detunings and non-negative density")

    def shifted(self, center: float) -> "LineShape":
        return LineShape(self.kind, self.width, center, self.table)

    def _tab(self):
        x, y = (np.asarray(v, float) for v in self.table)
        c = np.concatenate([[0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(x))])
        return x + self.center, y / c[-1], c / c[-1]

    def pdf(self, x):
        x = np.asarray(x, float)
        if self.kind == "lorentzian":
            return stats.cauchy.pdf(x, self.center, self.width)
        if self.kind == "gaussian":
            return stats.norm.pdf(x, self.center, self.width)
        if self.kind == "tabulated":
            xs, ys, _ = self._tab()
            return np.interp(x, xs, ys, left=0.0, right=0.0)
        raise ValueError("delta line shape has no density")

    def cdf(self, x):
        x = np.asarray(x, float)
        if self.kind == "lorentzian":
            return stats.cauchy.cdf(x, self.center, self.width)
        if self.kind == "gaussian":
            return stats.norm.cdf(x, self.center, self.width)
        if self.kind == "tabulated":
            xs, _, cs = self._tab()
            return np.interp(x, xs, cs, left=0.0, right=1.0)
        return (x >= self.center).astype(float)

    def ppf(self, q):
        if self.kind == "lorentzian":
            return stats.cauchy.ppf(q, self.center, self.width)
        if self.kind == "gaussian":
            return stats.norm.ppf(q, self.center, self.width)
        if self.kind == "tabulated":
            xs, _, cs = self._tab()
            return np.interp(q, cs, xs)
        return self.center


@dataclass
class SimulationConfig:
    coupling: CouplingDistribution
    line: LineShape
    resonator: ResonatorParams
    gamma_nr: float
    t_rep: float = math.inf
    eta: float = 1.0
    n_detuning_bins: int = 41
    detuning_span: float = 3.0  # core window half-width in units of kappa
    tail_ratio: float = 1.25
    detuning_edges: Sequence[float] | None = None
    mass_tolerance: float = 0.999
    init: str = "saturated"  # or "periodic"
    gamma_phi: float = 0.0
    method: str = "auto"

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("efficiency must lie in [0, 1]")
        if self.gamma_nr < 0:
            raise ValueError("gamma_nr must be non-negative")
        if self.t_rep < 0:
            raise ValueError("repetition time must be non-negative")
        if self.init not in ("saturated", "periodic"):
            raise ValueError("init must be 'saturated' or 'periodic'")
        if np.any(self.coupling.widths <= 0):
            raise ValueError("coupling bins must have positive width")


class CoverageError(ValueError):
    pass


def detuning_bins(config: SimulationConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Packet detunings, their probability masses and the bin edges used."""
    line = config.line
    if line.kind == "delta":
        return np.array([line.center]), np.array([1.0]), np.array([line.center, line.center])
    kappa = config.resonator.kappa
    if config.detuning_edges is not None:
        edges = np.asarray(config.detuning_edges, float)
        if np.any(np.diff(edges) <= 0):
            raise ValueError("detuning edges must increase")
        reps = 0.5 * (edges[1:] + edges[:-1])
    else:
        half = config.detuning_span * kappa
        core = np.linspace(-half, half, config.n_detuning_bins + 1)
        miss = (1.0 - config.mass_tolerance) / 4
        reach = max(abs(float(line.ppf(miss))), abs(float(line.ppf(1 - miss))), half)
        tail = [half]
        while tail[-1] < reach:
            tail.append(tail[-1] * config.tail_ratio)
        tail = np.array(tail[1:])
        edges = np.concatenate([-tail[::-1], core, tail])
        reps = 0.5 * (edges[1:] + edges[:-1])
        outer = np.abs(reps) > half
        lo, hi = np.abs(edges[:-1]), np.abs(edges[1:])
        reps[outer] = np.sign(reps[outer]) * np.sqrt(lo[outer] * hi[outer])
    masses = np.diff(line.cdf(edges))
    covered = float(masses.sum())
    if covered < config.mass_tolerance:
        raise CoverageError(f"detuning bins cover {covered:.6f} of the line shape; "
                            f"missing mass {1 - covered:.3g} exceeds tolerance {1 - config.mass_tolerance:.3g}")
    return reps, masses, edges


@dataclass
class PacketSet:
    g0: np.ndarray
    delta: np.ndarray
    weight: np.ndarray
    gamma_r: np.ndarray
    gamma1: np.ndarray
    sz_initial: np.ndarray
    s_final: np.ndarray

    @property
    def excitation(self) -> np.ndarray:
        return 0.5 + self.s_final[:, 2]


@dataclass
class FluorescenceCurve:
    t: np.ndarray
    rate: np.ndarray
    pulse: Pulse | None = None
    config: SimulationConfig | None = None
    packets: PacketSet | None = None
    amplitude: np.ndarray | None = field(default=None, repr=False)

    def evaluate(self, t) -> np.ndarray:
        """Rate at arbitrary times from the packet sums (exact, no interpolation)."""
        if self.amplitude is None:
            return np.interp(t, self.t, self.rate)
        return _kernels.emission_sum(self.amplitude, self.packets.gamma1, np.atleast_1d(np.asarray(t, float)))

    def total_counts(self) -> float:
        """Integral of the rate from t = 0 to infinity."""
        if self.amplitude is None:
            raise ValueError("curve carries no packet decomposition")
        return float(np.sum(self.amplitude / self.packets.gamma1))


def build_packets(config: SimulationConfig):
    cd = config.coupling
    reps, masses, _ = detuning_bins(config)
    g = np.repeat(cd.centroids, len(reps))
    d = np.tile(reps, len(cd.centroids))
    w = np.outer(cd.counts, masses).ravel()
    keep = w > 0
    return g[keep], d[keep], w[keep]


def simulate_curve(config: SimulationConfig, pulse: Pulse, t: Sequence[float]) -> FluorescenceCurve:
    """Expected detector-side emission rate (counts/s) after ``pulse``.

    ``t`` is measured from the end of the excitation.
    """
    t = np.asarray(t, float)
    if np.any(t < 0):
        raise ValueError("curve times must be non-negative")
    res = config.resonator
    g, d, w = build_packets(config)
    gamma_r = np.asarray(purcell_rate(g, d, res.kappa), float)
    gamma1 = gamma_r + config.gamma_nr
    if np.any(gamma1 <= 0):
        raise ValueError("every packet needs a positive relaxation rate")
    zeros = np.zeros_like(gamma1)
    if config.init == "saturated":
        sz0 = np.asarray(steady_state_init(gamma1, config.t_rep), float)
        s0 = np.column_stack([zeros, zeros, sz0])
        if pulse.beta == 0:
            s_final = s0
        else:
            s_final = evolve_packets(g, d, s0, gamma1, cavity_response(pulse, res), config.gamma_phi, config.method)
    else:
        # the Bloch equations are affine in S0: get the map from two starts
        # and solve for the start state that one full period reproduces
        if pulse.beta == 0:
            s_ground = np.column_stack([zeros, zeros, zeros - 0.5])
            s_half = np.column_stack([zeros, zeros, zeros])
        else:
            field = cavity_response(pulse, res)
            starts = np.column_stack([zeros, zeros, zeros - 0.5])
            s_ground = evolve_packets(g, d, starts, gamma1, field, config.gamma_phi, config.method)
            starts[:, 2] = 0.0
            s_half = evolve_packets(g, d, starts, gamma1, field, config.gamma_phi, config.method)
        slope = 2.0 * (s_half - s_ground)  # d S_final / d Sz0
        decay = np.exp(-gamma1 * config.t_rep) if math.isfinite(config.t_rep) else zeros
        excited = decay * (s_ground[:, 2] + 0.5) / (1 - slope[:, 2] * decay)
        sz0 = -0.5 + excited
        s_final = s_ground + excited[:, None] * slope
    amplitude = w * config.eta * gamma_r * (1 + 2 * s_final[:, 2]) / 2
    rate = _kernels.emission_sum(amplitude, gamma1, t)
    packets = PacketSet(g, d, w, gamma_r, gamma1, sz0, s_final)
    return FluorescenceCurve(t, rate, pulse, config, packets, amplitude)


def single_packet_curve(g0: float, delta: float, sz: float, gamma_nr: float, kappa: float, eta: float, t):
    """Emission of one spin with post-pulse Sz ``sz``."""
    gamma_r = purcell_rate(g0, delta, kappa)
    return eta * gamma_r * (1 + 2 * sz) / 2 * np.exp(-(gamma_r + gamma_nr) * np.asarray(t, float))


def integrated_counts(curve: FluorescenceCurve, t_int: float) -> float:
    """Trapezoidal integral of the rate over ``t_int`` from the first sample."""
    t, r = curve.t, curve.rate
    if t_int < 0:
        raise ValueError("integration time must be non-negative")
    end = t[0] + t_int
    if end > t[-1] * (1 + 1e-12) + 1e-300:
        raise ValueError(f"integration window ends at {end:.6g} s beyond the curve ({t[-1]:.6g} s)")
    inside = t < end
    ts = np.concatenate([t[inside], [end]])
    rs = np.concatenate([r[inside], [np.interp(end, t, r)]])
    return _trapz(rs, ts)


def _trapz(y, x):
    return float(np.trapezoid(y, x)) if hasattr(np, "trapezoid") else float(np.trapz(y, x))


def tail_rate(curve: FluorescenceCurve, t_rep: float | None = None, fraction: float = 1 / 6) -> float:
    """Mean rate over the last ``fraction`` of the repetition period."""
    t_rep = curve.config.t_rep if t_rep is None else t_rep
    if not math.isfinite(t_rep):
        raise ValueError("background estimate needs a finite repetition time")
    t, r = curve.t, curve.rate
    if t[-1] < t_rep * (1 - 1e-9):
        raise ValueError(f"curve ends at {t[-1]:.6g} s, before the repetition time {t_rep:.6g} s")
    start = t_rep * (1 - fraction)
    sel = (t > start) & (t < t_rep)
    ts = np.concatenate([[start], t[sel], [t_rep]])
    rs = np.concatenate([[np.interp(start, t, r)], r[sel], [np.interp(t_rep, t, r)]])
    return _trapz(rs, ts) / (t_rep - start)


def background_subtract(curve: FluorescenceCurve, t_int: float, dark_rate: float = 0.0,
                        t_rep: float | None = None) -> float:
    """Spin counts with the late-time rate taken as background.

    A constant dark rate cancels exactly; spins that have not relaxed by the
    end of the sequence are (wrongly but faithfully to the measurement
    procedure) subtracted as well.
    """
    raw = integrated_counts(curve, t_int) + dark_rate * t_int
    background = tail_rate(curve, t_rep) + dark_rate
    return raw - t_int * background


# --------------------------------------------------------------------------
# thin-wire closed forms


def _int_sin2_over_psi3(psi):
    """Antiderivative of sin^2(x)/x^3."""
    psi = np.asarray(psi, float)
    si, ci = special.sici(2 * psi)
    return -np.sin(psi) ** 2 / (2 * psi**2) - np.sin(2 * psi) / (2 * psi) + ci


def _int_sin2_over_psi_from0(psi):
    """Integral of sin^2(x)/x from 0 to psi."""
    psi = np.asarray(psi, float)
    small = psi < 0.5
    out = np.empty_like(psi)
    p = psi[small]
    out[small] = p**2 / 2 - p**4 / 12 + p**6 / 135 - p**8 / 2520 + p**10 / 56700
    q = psi[~small]
    _, ci = special.sici(2 * q)
    out[~small] = 0.5 * (np.euler_gamma + np.log(2 * q) - ci)
    return out


def asymptotic_counts(epsilon: float, config: SimulationConfig, regime: str = "exact",
                      separation: float = 10.0) -> tuple[float, float]:
    """Counts from the Purcell volume and from the spin-lattice volume.

    Requires the analytic thin-wire distribution; every spin is taken on
    resonance, fully relaxed before the pulse and counted to infinite time.
    ``regime`` selects the exact integrals or their low/high drive limits.
    """
    cd = config.coupling
    if cd.provenance != "analytic_thin_wire" or cd.gbar is None:
        raise ValueError("asymptotic counts need the analytic thin-wire distribution")
    res = config.resonator
    g_lim = coupling_limit(config.gamma_nr, res.kappa)
    if not (cd.g_min * separation <= g_lim <= cd.g_max / separation):
        raise ValueError(f"need g_min << g_lim << g_max (factor {separation}); got "
                         f"{cd.g_min:.4g}, {g_lim:.4g}, {cd.g_max:.4g} rad/s")
    eta, gbar2 = config.eta, cd.gbar**2
    c = 2 * epsilon * SQRT_NS * math.sqrt(res.kappa_c) / res.kappa  # psi = c * g0
    if c == 0:
        return 0.0, 0.0
    pre_r = eta * gbar2 * c**2
    pre_nr = 4 * eta * gbar2 / (res.kappa * config.gamma_nr)
    psi_min, psi_lim, psi_max = c * cd.g_min, c * g_lim, c * cd.g_max
    if regime == "low":
        c_r = pre_r * math.log(cd.g_max / g_lim)
        c_nr = 0.5 * pre_r * (1 - (cd.g_min / g_lim) ** 2)
    elif regime == "high":
        c_r = eta * gbar2 / 4 * (1 / g_lim**2 - 1 / cd.g_max**2)
        _, ci_min = special.sici(2 * psi_min)
        c_nr = pre_nr * 0.5 * (math.log(psi_lim / psi_min) + ci_min)
    elif regime == "exact":
        c_r = pre_r * float(_int_sin2_over_psi3(psi_max) - _int_sin2_over_psi3(psi_lim))
        c_nr = pre_nr * float(_int_sin2_over_psi_from0(np.array([psi_lim]))[0]
                              - _int_sin2_over_psi_from0(np.array([psi_min]))[0])
    else:
        raise ValueError(f"unknown regime {regime!r}")
    return float(c_r), float(c_nr)
