"""Driven electron spin coupled to a sparse bath of spin-1/2 tungsten nuclei.

Secular Hamiltonian in the frame rotating with the drive (rad/s):

    H = Omega Sx - delta Sz + Sz * sum_i (A_i Iz_i + B_i Ix_i) + omega_I * sum_i Iz_i

The nuclear Larmor term is off by default.  Nuclei start maximally mixed and
the electron starts in its ground state.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy import constants

from .species_registry import SpinSpecies

GAMMA_W = 1.8e6  # Hz/T
LATTICE_A = 5.243e-10
LATTICE_C = 11.374e-10


@dataclass(frozen=True)
class NuclearSite:
    position: tuple  # metres, crystal frame (a, b, c)
    a: float = 0.0  # rad/s
    b: float = 0.0  # rad/s

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.position))


@dataclass(frozen=True)
class BathConfig:
    n_sites: int = 15
    abundance: float = 0.14
    max_occupied: int = 3
    gamma_w: float = GAMMA_W

    def __post_init__(self):
        if not 0 <= self.max_occupied <= self.n_sites:
            raise ValueError("need 0 <= max_occupied <= n_sites")
        if not 0.0 <= self.abundance <= 1.0:
            raise ValueError("abundance must lie in [0, 1]")


def scheelite_tungsten_sites(max_distance: float = 6.6e-10) -> np.ndarray:
    """W positions (m) around a Ca site of CaWO4, sorted by distance.

    Space group I4_1/a (origin choice 2): Ca at (0, 1/4, 5/8), W at
    (0, 1/4, 1/8) and (1/2, 1/4, 3/8) plus body centring.
    """
    base = np.array([[0, 0.25, 0.125], [0.5, 0.25, 0.375]])
    w = np.vstack([base, base + 0.5]) % 1.0
    ca = np.array([0, 0.25, 0.625])
    scale = np.array([LATTICE_A, LATTICE_A, LATTICE_C])
    cells = np.array(list(itertools.product(range(-3, 4), repeat=3)))
    pos = ((w[None, :, :] + cells[:, None, :]) - ca).reshape(-1, 3) * scale
    d = np.linalg.norm(pos, axis=1)
    keep = (d > 0) & (d <= max_distance)
    pos, d = pos[keep], d[keep]
    order = np.lexsort((pos[:, 2], pos[:, 1], pos[:, 0], np.round(d, 15)))
    return pos[order]


def load_tungsten_sites(path=None) -> np.ndarray:
    """Shipped site table (metres)."""
    if path is None:
        path = resources.files("fdepr") / "data" / "scheelite_w_sites.csv"
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh)]
    return np.array([[float(r["x_angstrom"]), float(r["y_angstrom"]), float(r["z_angstrom"])] for r in rows]) * 1e-10


def write_tungsten_sites(path, positions: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_angstrom", "y_angstrom", "z_angstrom", "distance_angstrom"])
        for p in positions:
            a = p * 1e10
            w.writerow([f"{a[0]:.6f}", f"{a[1]:.6f}", f"{a[2]:.6f}", f"{np.linalg.norm(a):.6f}"])


def dipolar_constants(position, gyro_matrix, gamma_w: float = GAMMA_W, b0_direction=(1.0, 0.0, 0.0)):
    """Secular point-dipole constants (A, B) in rad/s for one nucleus.

    ``gyro_matrix`` is the electron gyromagnetic tensor (Hz/T).  The electron
    is quantized along gamma . b0, the nucleus along b0.
    """
    r = np.asarray(position, float)
    dist = float(np.linalg.norm(r))
    if dist == 0:
        raise ValueError("nucleus cannot sit on the electron")
    n = r / dist
    b0 = np.asarray(b0_direction, float)
    b0 = b0 / np.linalg.norm(b0)
    g = np.asarray(gyro_matrix, float)
    u = g @ b0
    u = u / np.linalg.norm(u)
    ge = g @ u  # electron moment direction times its magnitude (Hz/T)
    pref = constants.mu_0 * constants.h * gamma_w / (4 * math.pi * dist**3)
    vec = -pref * (ge - 3 * np.dot(ge, n) * n)  # Hz
    a = float(vec @ b0)
    b = float(np.linalg.norm(vec - a * b0))
    return 2 * math.pi * a, 2 * math.pi * b


def bath_sites(species: SpinSpecies, b0_direction, config: BathConfig = BathConfig(),
               positions: np.ndarray | None = None) -> list[NuclearSite]:
    """The ``config.n_sites`` sites with the largest hyperfine magnitude."""
    if positions is None:
        positions = load_tungsten_sites()
    g = species.gyro.matrix()
    sites = []
    for p in positions:
        a, b = dipolar_constants(p, g, config.gamma_w, b0_direction)
        sites.append(NuclearSite(tuple(float(v) for v in p), a, b))
    sites.sort(key=lambda s: (-round(math.hypot(s.a, s.b), 6), s.distance))
    if len(sites) < config.n_sites:
        raise ValueError(f"only {len(sites)} sites available, {config.n_sites} requested")
    return sites[: config.n_sites]


def retained_mass(config: BathConfig) -> float:
    """Probability that at most ``max_occupied`` of the sites hold a spin."""
    p, n = config.abundance, config.n_sites
    return float(sum(math.comb(n, k) * p**k * (1 - p) ** (n - k) for k in range(config.max_occupied + 1)))


def enumerate_configs(config: BathConfig) -> list[tuple[tuple[int, ...], float]]:
    """Occupied-site subsets with at most ``max_occupied`` members and their
    renormalized binomial weights, in a fixed order."""
    p, n = config.abundance, config.n_sites
    mass = retained_mass(config)
    if mass == 0:
        raise ValueError("no probability mass on configurations with at most max_occupied nuclei")
    out = []
    for k in range(config.max_occupied + 1):
        w = p**k * (1 - p) ** (n - k) / mass
        for subset in itertools.combinations(range(n), k):
            out.append((subset, w))
    return out


# --------------------------------------------------------------------------
# dynamics

_SX = np.array([[0, 0.5], [0.5, 0]], complex)
_SZ = np.array([[0.5, 0], [0, -0.5]], complex)
_ID = np.eye(2, dtype=complex)


def _embed(op, position, n_spins):
    mats = [_ID] * n_spins
    mats[position] = op
    out = mats[0]
    for m in mats[1:]:
        out = np.kron(out, m)
    return out


def driven_hamiltonian(couplings, omega: float, detuning: float = 0.0, nuclear_larmor: float = 0.0) -> np.ndarray:
    """Hamiltonian on electron (first factor) times k nuclei; ``couplings`` is a list of (A, B)."""
    couplings = list(couplings)
    k = len(couplings)
    if k > 3:
        raise ValueError("at most 3 nuclei are supported")
    n = k + 1
    h = omega * _embed(_SX, 0, n) - detuning * _embed(_SZ, 0, n)
    sz = _embed(_SZ, 0, n)
    for i, (a, b) in enumerate(couplings):
        iz = _embed(_SZ, i + 1, n)
        ix = _embed(_SX, i + 1, n)
        h = h + sz @ (a * iz + b * ix) + nuclear_larmor * iz
    return h


@dataclass
class DrivenResult:
    t: np.ndarray
    p_up: np.ndarray
    norm: np.ndarray  # total probability, should stay 1


def simulate_driven_spin(couplings, omega: float, t, detuning: float = 0.0,
                         nuclear_larmor: float = 0.0) -> DrivenResult:
    """Excitation probability of the electron versus drive duration.

    Exact propagation through the eigendecomposition of the static
    Hamiltonian, averaged over the 2^k nuclear basis states.
    """
    t = np.asarray(t, float)
    h = driven_hamiltonian(couplings, omega, detuning, nuclear_larmor)
    dim = h.shape[0]
    n_nuc = dim // 2
    evals, vecs = np.linalg.eigh(h)
    # electron down is the second electron basis state: indices n_nuc..dim-1
    start = vecs.conj().T[:, n_nuc:]  # (dim, n_nuc) = V^dagger |down, m>
    phases = np.exp(-1j * np.outer(t, evals))  # (nt, dim)
    up_rows = vecs[:n_nuc, :]  # (n_nuc, dim)
    p_up = np.zeros(len(t))
    norm = np.zeros(len(t))
    for m in range(n_nuc):
        coeff = phases * start[:, m][None, :]  # (nt, dim)
        amp_up = coeff @ up_rows.T
        p_up += np.sum(np.abs(amp_up) ** 2, axis=1)
        norm += np.sum(np.abs(coeff) ** 2, axis=1)
    return DrivenResult(t, p_up / n_nuc, norm / n_nuc)


def bath_averaged_rabi(sites, config: BathConfig, omega: float, t, detunings=(0.0,), detuning_weights=None,
                       nuclear_larmor: float = 0.0) -> np.ndarray:
    """Excitation probability averaged over bath configurations and detunings.

    Summation order is fixed (detuning outer, configurations in enumeration
    order) so results are bit-reproducible.
    """
    sites = list(sites)
    if len(sites) < config.n_sites:
        raise ValueError("fewer sites than the configuration requires")
    detunings = np.atleast_1d(np.asarray(detunings, float))
    if detuning_weights is None:
        detuning_weights = np.full(len(detunings), 1.0 / len(detunings))
    detuning_weights = np.asarray(detuning_weights, float)
    detuning_weights = detuning_weights / detuning_weights.sum()
    configs = enumerate_configs(config)
    out = np.zeros(len(np.atleast_1d(t)))
    for d, wd in zip(detunings, detuning_weights):
        for subset, w in configs:
            couplings = [(sites[i].a, sites[i].b) for i in subset]
            out += wd * w * simulate_driven_spin(couplings, omega, t, d, nuclear_larmor).p_up
    return out


def cavity_detunings(kappa: float, n: int = 21) -> np.ndarray:
    """Evenly spaced detunings across the cavity linewidth (+-kappa/2)."""
    return np.linspace(-kappa / 2, kappa / 2, n)


def envelope(t, p, period: float) -> tuple[np.ndarray, np.ndarray]:
    """Peak-to-trough contrast of an oscillation per period window."""
    t = np.asarray(t, float)
    p = np.asarray(p, float)
    n = int(np.floor((t[-1] - t[0]) / period))
    centres, contrast = [], []
    for k in range(n):
        sel = (t >= t[0] + k * period) & (t < t[0] + (k + 1) * period)
        if sel.sum() >= 2:
            centres.append(t[0] + (k + 0.5) * period)
            contrast.append(float(p[sel].max() - p[sel].min()))
    return np.array(centres), np.array(contrast)
