"""Cavity-filtered drive and Bloch evolution of spin packets.

Conventions: the drive amplitude ``beta`` is a photon-flux root given in
ns^-1/2 (so the pulse strength eps = beta * Dt is in ns^1/2).  The intracavity
field alpha is dimensionless (photon-number root).  The frame rotates at the
pulse carrier; a packet's detuning ``delta`` is omega0 - omega_spin.  The Bloch
vector has |S| <= 1/2 and relaxes to Sz = -1/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .resonator_mode import ResonatorParams

NS = 1e-9
SQRT_NS = math.sqrt(NS)


class IntegrationError(RuntimeError):
    """Raised when a packet leaves the Bloch ball or becomes non-finite."""


@dataclass(frozen=True)
class Pulse:
    """Rectangular drive: ``beta`` in ns^-1/2, ``duration`` in s, ``detuning`` in rad/s."""

    beta: float
    duration: float
    detuning: float = 0.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.duration <= 0:
            raise ValueError("pulse duration must be positive")

    @property
    def epsilon(self) -> float:
        """Pulse strength in ns^1/2."""
        return self.beta * self.duration / NS

    @property
    def beta_si(self) -> float:
        return self.beta / SQRT_NS

    @classmethod
    def from_strength(cls, epsilon: float, duration: float, detuning: float = 0.0) -> "Pulse":
        return cls(epsilon * NS / duration, duration, detuning)


def beta_from_power(power_in: float, attenuation_db: float, omega0: float) -> float:
    """Drive amplitude (ns^-1/2) reaching the resonator for a source power (W)
    and a total line attenuation in dB."""
    from scipy import constants

    flux = power_in * 10 ** (-attenuation_db / 10.0) / (constants.hbar * omega0)
    return math.sqrt(flux) * SQRT_NS


@dataclass(frozen=True)
class CavityField:
    t: np.ndarray
    alpha: np.ndarray  # complex
    pulse: Pulse
    kappa: float

    @property
    def step(self) -> float:
        return float(self.t[1] - self.t[0])


def plateau_amplitude(pulse: Pulse, kappa_c: float, kappa: float) -> complex:
    """Steady-state intracavity amplitude for a long pulse."""
    lam = kappa / 2 - 1j * pulse.detuning
    return math.sqrt(kappa_c) * pulse.beta_si / lam


def mean_photon_number(pulse: Pulse, params: ResonatorParams) -> float:
    return abs(plateau_amplitude(pulse, params.kappa_c, params.kappa)) ** 2


def integration_step(pulse: Pulse, kappa: float) -> float:
    return min(0.05 / kappa, pulse.duration / 1000.0)


def default_time_grid(pulse: Pulse, params: ResonatorParams, tail: float = 20.0) -> np.ndarray:
    """Uniform grid at half the integration step, covering the pulse plus
    ``tail``/kappa of ring-down; odd number of points."""
    h = integration_step(pulse, params.kappa)
    n_steps = int(math.ceil((pulse.duration + tail / params.kappa) / h))
    return np.arange(2 * n_steps + 1) * (h / 2)


def cavity_response(pulse: Pulse, params: ResonatorParams, t: np.ndarray | None = None) -> CavityField:
    """Intracavity field for a rectangular drive.

    Exact solution of d(alpha)/dt = -(kappa/2 - i*Dc) alpha + sqrt(kappa_c) beta(t)
    sampled on ``t``, which must be uniform with step <= 0.1/kappa and reach
    Dt + 10/kappa.
    """
    kappa = params.kappa
    if t is None:
        t = default_time_grid(pulse, params)
    t = np.asarray(t, float)
    if len(t) < 2:
        raise ValueError("time grid needs at least two points")
    dt = np.diff(t)
    if np.any(dt <= 0) or not np.allclose(dt, dt[0], rtol=1e-9, atol=0):
        raise ValueError("time grid must be uniform and increasing")
    if dt[0] > 0.1 / kappa:
        raise ValueError(f"time step {dt[0]:.3g} s exceeds 0.1/kappa = {0.1 / kappa:.3g} s")
    if t[0] > 0 or t[-1] < pulse.duration + 10.0 / kappa * (1 - 1e-12):
        raise ValueError("time grid must cover [0, Dt + 10/kappa]")
    lam = kappa / 2 - 1j * pulse.detuning
    a_ss = plateau_amplitude(pulse, params.kappa_c, kappa)
    on = (t >= 0) & (t <= pulse.duration)
    after = t > pulse.duration
    alpha = np.zeros(len(t), dtype=complex)
    alpha[on] = a_ss * (1 - np.exp(-lam * t[on]))
    a_end = a_ss * (1 - np.exp(-lam * pulse.duration))
    alpha[after] = a_end * np.exp(-lam * (t[after] - pulse.duration))
    return CavityField(t, alpha, pulse, kappa)


def rabi_angle(epsilon, g0, kappa_c: float, kappa: float):
    """Coupling-dependent angle psi with excitation probability sin^2(psi).

    ``epsilon`` in ns^1/2.  psi = 2 g0 eps sqrt(kappa_c)/kappa, which is half of
    the Bloch-sphere rotation angle produced by a resonant pulse.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return 2.0 * np.asarray(g0) * (np.asarray(epsilon) * SQRT_NS) * math.sqrt(kappa_c) / kappa


def steady_state_init(gamma1, t_rep):
    """Sz at the start of a sequence when the previous one left the spins saturated."""
    t_rep = np.asarray(t_rep, float)
    if np.any(t_rep < 0):
        raise ValueError("repetition time must be non-negative")
    with np.errstate(invalid="ignore"):
        out = -0.5 + 0.5 * np.exp(-np.asarray(gamma1) * t_rep)
    out = np.where(np.isinf(t_rep), -0.5, out)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class SpinPacket:
    g0: float
    delta: float
    s: tuple = (0.0, 0.0, -0.5)
    gamma_r: float = 0.0
    gamma_nr: float = 0.0
    weight: float = 1.0

    def __post_init__(self):
        if np.linalg.norm(self.s) > 0.5 + 1e-9:
            raise ValueError("Bloch vector norm exceeds 1/2")

    @property
    def gamma1(self) -> float:
        return self.gamma_r + self.gamma_nr

    @property
    def sz(self) -> float:
        return self.s[2]

    @property
    def excitation(self) -> float:
        return 0.5 + self.s[2]


def _relax(s, gamma1, gamma2, tau):
    out = s.copy()
    e1 = np.exp(-gamma1 * tau)
    e2 = np.exp(-gamma2 * tau)
    out[:, 0] *= e2
    out[:, 1] *= e2
    out[:, 2] = -0.5 + (out[:, 2] + 0.5) * e1
    return out


def rotate(s, omega, tau):
    """Rotate Bloch vectors ``s`` (n, 3) about ``omega`` (n, 3) for time ``tau``."""
    w = np.linalg.norm(omega, axis=1)
    safe = np.where(w > 0, w, 1.0)
    n = omega / safe[:, None]
    theta = w * tau
    c, sn = np.cos(theta)[:, None], np.sin(theta)[:, None]
    cross = np.cross(n, s)
    dot = np.sum(n * s, axis=1)[:, None]
    out = s * c + cross * sn + n * dot * (1 - c)
    return np.where((w > 0)[:, None], out, s)


def closed_form_evolve(s0, two_g, spin_detuning, alpha_ss, duration, gamma1, gamma2, t_end=None):
    """Constant-drive (quasi-static) propagation: exact rotation for ``duration``
    with relaxation split symmetrically around it, then free relaxation to ``t_end``."""
    s0 = np.atleast_2d(np.asarray(s0, float))
    omega = np.column_stack([two_g * alpha_ss.real, two_g * alpha_ss.imag, spin_detuning * np.ones_like(two_g)])
    s = _relax(s0, gamma1, gamma2, duration / 2)
    s = rotate(s, omega, duration)
    s = _relax(s, gamma1, gamma2, duration / 2)
    if t_end is not None and t_end > duration:
        s = _relax(s, gamma1, gamma2, t_end - duration)
    return s


def evolve_packets(g0, delta, s0, gamma1, field: CavityField, gamma_phi: float = 0.0,
                   method: str = "auto", max_step_angle: float = 0.2) -> np.ndarray:
    """Evolve many packets through ``field``; returns Bloch vectors at the grid end.

    ``method`` is "rk4", "closed" (quasi-static constant drive) or "auto", which
    integrates with RK4 where the rotation per step stays below
    ``max_step_angle`` and uses the closed form elsewhere.
    """
    g0 = np.atleast_1d(np.asarray(g0, float))
    n = g0.size
    delta = np.broadcast_to(np.asarray(delta, float), (n,)).astype(float)
    gamma1 = np.broadcast_to(np.asarray(gamma1, float), (n,)).astype(float)
    s0 = np.broadcast_to(np.asarray(s0, float), (n, 3)).astype(float)
    gamma2 = 0.5 * gamma1 + gamma_phi
    spin_detuning = -delta - field.pulse.detuning
    two_g = 2.0 * g0
    h = 2.0 * field.step
    if len(field.t) % 2 != 1:
        raise ValueError("cavity field grid must have an odd number of samples")
    amax = float(np.max(np.abs(field.alpha))) if len(field.alpha) else 0.0
    per_step = (np.abs(two_g) * amax + np.abs(spin_detuning)) * h
    if method == "rk4":
        use_rk4 = np.ones(n, bool)
    elif method == "closed":
        use_rk4 = np.zeros(n, bool)
    elif method == "auto":
        use_rk4 = per_step <= max_step_angle
    else:
        raise ValueError(f"unknown method {method!r}")

    out = np.empty((n, 3))
    if use_rk4.any():
        idx = np.nonzero(use_rk4)[0]
        out[idx] = _kernels.bloch_rk4(field.alpha.real, field.alpha.imag, two_g[idx], spin_detuning[idx],
                                      gamma1[idx], gamma2[idx], s0[idx], h)
    if (~use_rk4).any():
        idx = np.nonzero(~use_rk4)[0]
        a_ss = _plateau_from_field(field)
        out[idx] = closed_form_evolve(s0[idx], two_g[idx], spin_detuning[idx], a_ss, field.pulse.duration,
                                      gamma1[idx], gamma2[idx], t_end=float(field.t[-1]))
    norms = np.linalg.norm(out, axis=1)
    bad = ~np.isfinite(norms) | (norms > 0.5 + 1e-9)
    if bad.any():
        k = int(np.nonzero(bad)[0][0])
        raise IntegrationError(f"packet {k} (g0={g0[k]:.6g} rad/s, delta={delta[k]:.6g} rad/s) "
                               f"left the Bloch ball: |S|={norms[k]:.12g}")
    return out


def _plateau_from_field(field: CavityField) -> complex:
    # a_ss follows from the on-pulse solution a_ss (1 - exp(-lam t)) at any sample
    lam = field.kappa / 2 - 1j * field.pulse.detuning
    t, a = field.t, field.alpha
    on = (t > 0) & (t <= field.pulse.duration)
    if not on.any():
        return 0j
    k = int(np.nonzero(on)[0][-1])
    return complex(a[k] / (1 - np.exp(-lam * t[k])))


def evolve_packet(packet: SpinPacket, field: CavityField, gamma_phi: float = 0.0,
                  method: str = "auto") -> SpinPacket:
    s = evolve_packets([packet.g0], [packet.delta], np.array(packet.s, float)[None, :], [packet.gamma1],
                       field, gamma_phi=gamma_phi, method=method)[0]
    return replace(packet, s=tuple(float(v) for v in s))


def generalized_rabi_excitation(omega: float, detuning: float, t: float) -> float:
    """Excitation probability from the ground state under constant drive."""
    w2 = omega**2 + detuning**2
    if w2 == 0:
        return 0.0
    return omega**2 / w2 * math.sin(math.sqrt(w2) * t / 2) ** 2
