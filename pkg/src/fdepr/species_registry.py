"""Spin-Hamiltonian parameters, energy levels and resonance fields.

Frequencies are in Hz (energies in units of h*Hz), fields in tesla and angles
in degrees unless stated otherwise.  Vectors are expressed in the crystal
frame (a, b, c).
"""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import constants
from scipy.optimize import brentq

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

BOHR_OVER_H = constants.physical_constants["Bohr magneton in Hz/T"][0]

__all__ = [
    "AnisotropicDoublet",
    "FieldConfig",
    "GyroTensor",
    "HyperfineTensor",
    "RotationRow",
    "SpinSpecies",
    "Transition",
    "boltzmann_weight",
    "build_hamiltonian",
    "drive_direction",
    "field_direction",
    "load_doublets",
    "load_species",
    "rotation_pattern",
    "sample_axes",
    "spin_operators",
    "transition_fields",
    "transition_matrix_vector",
    "write_rotation_csv",
]


@dataclass(frozen=True)
class GyroTensor:
    """Axial gyromagnetic tensor (Hz/T): parallel along c, perpendicular in a-b."""

    gamma_parallel: float
    gamma_perp: float

    def __post_init__(self):
        if self.gamma_parallel < 0 or self.gamma_perp < 0:
            raise ValueError("gyromagnetic ratios must be non-negative")

    def matrix(self) -> np.ndarray:
        return np.diag([self.gamma_perp, self.gamma_perp, self.gamma_parallel])


@dataclass(frozen=True)
class FullGyroTensor:
    """Arbitrary symmetric gyromagnetic tensor (Hz/T), for low-symmetry sites."""

    values: tuple

    def matrix(self) -> np.ndarray:
        return np.array(self.values, dtype=float).reshape(3, 3)


@dataclass(frozen=True)
class HyperfineTensor:
    """Axial hyperfine tensor A/h in Hz."""

    a_parallel: float
    a_perp: float

    def matrix(self) -> np.ndarray:
        return np.diag([self.a_perp, self.a_perp, self.a_parallel])


@dataclass(frozen=True)
class SpinSpecies:
    name: str
    nuclear_spin: float
    gyro: GyroTensor | FullGyroTensor
    hyperfine: HyperfineTensor | None = None
    gamma_nuclear: float = 0.0
    abundance: float = 1.0

    def __post_init__(self):
        if self.nuclear_spin < 0 or abs(2 * self.nuclear_spin - round(2 * self.nuclear_spin)) > 1e-12:
            raise ValueError(f"{self.name}: nuclear spin must be a non-negative half-integer")
        if not 0.0 <= self.abundance <= 1.0:
            raise ValueError(f"{self.name}: abundance must lie in [0, 1]")

    @property
    def dimension(self) -> int:
        return 2 * int(round(2 * self.nuclear_spin + 1))


@dataclass(frozen=True)
class FieldConfig:
    """Static field of magnitude ``b0`` (T) in the sample plane.

    ``phi`` is the in-plane angle from the a-axis and ``theta_c`` the tilt of
    the sample normal away from c (tilt taken about the b-axis).
    """

    b0: float
    phi: float = 0.0
    theta_c: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.b0):
            raise ValueError("field magnitude must be finite")
        if self.b0 < 0:
            raise ValueError("field magnitude must be non-negative")

    @property
    def direction(self) -> np.ndarray:
        return field_direction(self.phi, self.theta_c)

    @property
    def vector(self) -> np.ndarray:
        return self.b0 * self.direction


def _tilt(theta_c: float) -> np.ndarray:
    t = math.radians(theta_c)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def field_direction(phi: float, theta_c: float = 0.0) -> np.ndarray:
    """Unit vector of an in-plane direction at angle ``phi`` (crystal frame)."""
    p = math.radians(phi)
    return _tilt(theta_c) @ np.array([math.cos(p), math.sin(p), 0.0])


def drive_direction(phi: float, theta_c: float = 0.0) -> np.ndarray:
    """Default drive axis: in the sample plane, perpendicular to the static field."""
    return field_direction(phi + 90.0, theta_c)


def sample_axes(wire_angle: float, theta_c: float = 0.0) -> np.ndarray:
    """Rows are the sample-frame axes (along wire, lateral, normal) in crystal coordinates."""
    rot = _tilt(theta_c)
    w = math.radians(wire_angle)
    x = rot @ np.array([math.cos(w), math.sin(w), 0.0])
    y = rot @ np.array([-math.sin(w), math.cos(w), 0.0])
    z = rot @ np.array([0.0, 0.0, 1.0])
    return np.vstack([x, y, z])


@lru_cache(maxsize=None)
def _spin_ops(two_j: int):
    j = two_j / 2.0
    m = j - np.arange(two_j + 1)
    sz = np.diag(m).astype(complex)
    sp = np.zeros((two_j + 1, two_j + 1), dtype=complex)
    for k in range(1, two_j + 1):
        sp[k - 1, k] = math.sqrt(j * (j + 1) - m[k] * (m[k] + 1))
    sx = 0.5 * (sp + sp.conj().T)
    sy = -0.5j * (sp - sp.conj().T)
    return sx, sy, sz


def spin_operators(j: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Spin matrices (Sx, Sy, Sz) for spin ``j`` in the |m = j ... -j> basis."""
    return tuple(op.copy() for op in _spin_ops(int(round(2 * j))))


def _product_operators(species: SpinSpecies):
    n = int(round(2 * species.nuclear_spin + 1))
    s = [np.kron(op, np.eye(n)) for op in _spin_ops(1)]
    i = [np.kron(np.eye(2), op) for op in _spin_ops(n - 1)]
    return s, i


def _field_independent_part(species: SpinSpecies):
    s, i = _product_operators(species)
    dim = species.dimension
    h0 = np.zeros((dim, dim), dtype=complex)
    if species.nuclear_spin > 0:
        if species.hyperfine is None:
            raise ValueError(f"{species.name}: nuclear spin > 0 requires a hyperfine tensor")
        a = species.hyperfine.matrix()
        for p in range(3):
            for q in range(3):
                if a[p, q] != 0.0:
                    h0 += a[p, q] * (i[p] @ s[q])
    # Zeeman operators per unit field along each crystal axis
    g = species.gyro.matrix()
    zeeman = []
    for p in range(3):
        op = sum(g[p, q] * s[q] for q in range(3))
        if species.nuclear_spin > 0:
            op = op + species.gamma_nuclear * i[p]
        zeeman.append(op)
    return h0, zeeman


def build_hamiltonian(species: SpinSpecies, field: FieldConfig) -> np.ndarray:
    """Spin Hamiltonian in Hz in the electron (x) nucleus product basis."""
    h0, zeeman = _field_independent_part(species)
    b = field.vector
    return h0 + b[0] * zeeman[0] + b[1] * zeeman[1] + b[2] * zeeman[2]


def _hamiltonians(species: SpinSpecies, b_values: np.ndarray, direction: np.ndarray) -> np.ndarray:
    h0, zeeman = _field_independent_part(species)
    hz = sum(direction[p] * zeeman[p] for p in range(3))
    return h0[None, :, :] + np.asarray(b_values)[:, None, None] * hz[None, :, :]


@dataclass(frozen=True)
class Transition:
    b_res: float
    lower: int
    upper: int
    matrix_element: float


def transition_matrix_vector(species: SpinSpecies, field: FieldConfig, lower: int, upper: int) -> np.ndarray:
    """Complex vector <lower|S|upper> of the electron spin, crystal frame."""
    _, vecs = np.linalg.eigh(build_hamiltonian(species, field))
    s, _ = _product_operators(species)
    bra = vecs[:, lower].conj()
    ket = vecs[:, upper]
    return np.array([bra @ op @ ket for op in s])


def transition_frequency(species: SpinSpecies, field: FieldConfig, lower: int, upper: int) -> float:
    """Level splitting E_upper - E_lower in Hz at ``field`` (levels sorted by energy)."""
    e = np.linalg.eigvalsh(build_hamiltonian(species, field))
    return float(e[upper] - e[lower])


def transition_fields(
    species: SpinSpecies,
    omega0: float,
    phi: float = 0.0,
    theta_c: float = 0.0,
    search_range: tuple[float, float] = (1e-4, 1.0),
    step: float = 5e-5,
    drive: np.ndarray | None = None,
    min_matrix_element: float = 0.0,
) -> list[Transition]:
    """Fields where a level pair is split by ``omega0`` (rad/s).

    The range is scanned on a grid of ``step`` tesla to bracket sign changes of
    E_j - E_i - f0, then each bracket is refined with Brent's method.  The
    matrix element is |<lower| d.S |upper>| for the drive axis ``d`` (default:
    in-plane, perpendicular to the static field).
    """
    lo, hi = search_range
    if not (0 <= lo < hi) or step <= 0:
        raise ValueError("search range must be positive and ordered")
    f0 = omega0 / (2 * math.pi)
    direction = field_direction(phi, theta_c)
    d = drive_direction(phi, theta_c) if drive is None else np.asarray(drive, float) / np.linalg.norm(drive)
    n_pts = max(int(math.ceil((hi - lo) / step)) + 1, 2)
    grid = np.linspace(lo, hi, n_pts)
    try:
        levels = np.linalg.eigvalsh(_hamiltonians(species, grid, direction))
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"{species.name}: eigen-solve failed during field scan") from exc

    dim = species.dimension
    pairs = [(i, j) for i in range(dim) for j in range(i + 1, dim)]
    s_ops, _ = _product_operators(species)
    d_op = sum(d[p] * s_ops[p] for p in range(3))
    found: list[Transition] = []

    def mismatch(b, i, j):
        e = np.linalg.eigvalsh(_hamiltonians(species, [b], direction)[0])
        return (e[j] - e[i]) - f0

    for i, j in pairs:
        diff = levels[:, j] - levels[:, i] - f0
        sign = np.sign(diff)
        idx = np.nonzero(sign[:-1] * sign[1:] <= 0)[0]
        last = None
        for k in idx:
            if diff[k] == 0.0:
                b_res = grid[k]
            elif diff[k + 1] == 0.0:
                continue
            else:
                b_res = brentq(mismatch, grid[k], grid[k + 1], args=(i, j), xtol=1e-16, rtol=1e-15, maxiter=200)
            if last is not None and abs(b_res - last) < 1e-12:
                continue
            last = b_res
            _, vecs = np.linalg.eigh(_hamiltonians(species, [b_res], direction)[0])
            element = float(abs(vecs[:, i].conj() @ d_op @ vecs[:, j]))
            if element >= min_matrix_element:
                found.append(Transition(float(b_res), i, j, element))
    found.sort(key=lambda t: t.b_res)
    return found


def boltzmann_weight(energies: np.ndarray, lower: int, upper: int, temperature: float) -> float:
    """Thermal population difference of two levels (energies in Hz)."""
    e = np.asarray(energies, float)
    if temperature <= 0:
        return 1.0 if lower == int(np.argmin(e)) else 0.0
    x = -constants.h * (e - e.min()) / (constants.k * temperature)
    pop = np.exp(x) / np.exp(x).sum()
    return float(pop[lower] - pop[upper])


def _polar(theta: float, phi: float) -> np.ndarray:
    t, p = math.radians(theta), math.radians(phi)
    return np.array([math.sin(t) * math.cos(p), math.sin(t) * math.sin(p), math.cos(t)])


@dataclass(frozen=True)
class AnisotropicDoublet:
    """Kramers doublet with an orthorhombic g-tensor given by principal axes."""

    name: str
    principal_g: tuple
    principal_directions: tuple  # ((theta, phi), ...) in degrees
    ground: bool = False
    orthogonality_tolerance: float = 2.0

    def __post_init__(self):
        if len(self.principal_g) != 3 or len(self.principal_directions) != 3:
            raise ValueError("three principal values and directions are required")
        u = self.axes_raw()
        for a in range(3):
            for b in range(a + 1, 3):
                angle = math.degrees(math.acos(min(1.0, abs(float(u[a] @ u[b])))))
                if abs(90.0 - angle) > self.orthogonality_tolerance:
                    raise ValueError(f"{self.name}: principal axes {a + 1},{b + 1} are {angle:.2f} deg apart")

    def axes_raw(self) -> np.ndarray:
        return np.array([_polar(t, p) for t, p in self.principal_directions])

    def axes(self, site: int = 0) -> np.ndarray:
        """Orthonormalized principal axes (rows) of the given site."""
        u = self.axes_raw().T
        left, _, right = np.linalg.svd(u)
        u = (left @ right).T
        a = math.radians(90.0 * site)
        rot = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
        return (rot @ u.T).T

    def g_tensor(self, site: int = 0) -> np.ndarray:
        u = self.axes(site)
        return sum(g * np.outer(v, v) for g, v in zip(self.principal_g, u))

    def g_effective(self, direction: np.ndarray, site: int = 0) -> float:
        return float(np.linalg.norm(self.g_tensor(site) @ np.asarray(direction, float)))

    def as_species(self, site: int = 0) -> SpinSpecies:
        gamma = BOHR_OVER_H * self.g_tensor(site)
        return SpinSpecies(f"{self.name}[{site}]", 0.0, FullGyroTensor(tuple(gamma.ravel())))


@dataclass(frozen=True)
class RotationRow:
    phi_deg: float
    site_index: int
    b_res_mT: float
    matrix_element: float


def rotation_pattern(
    target: SpinSpecies | AnisotropicDoublet,
    omega0: float,
    phi_grid: Iterable[float],
    theta_c: float = 0.0,
    search_range: tuple[float, float] = (1e-4, 1.0),
    step: float = 5e-5,
    min_matrix_element: float = 0.0,
) -> list[RotationRow]:
    phis = list(phi_grid)
    if not phis:
        raise ValueError("phi_grid must not be empty")
    if isinstance(target, AnisotropicDoublet):
        sites = [target.as_species(k) for k in range(4)]
    else:
        sites = [target]
    rows = []
    for phi in phis:
        for k, sp in enumerate(sites):
            for tr in transition_fields(sp, omega0, phi, theta_c, search_range, step,
                                        min_matrix_element=min_matrix_element):
                rows.append(RotationRow(float(phi), k, tr.b_res * 1e3, tr.matrix_element))
    return rows


def write_rotation_csv(rows: Sequence[RotationRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phi_deg", "site_index", "B_res_mT", "matrix_element"])
        for r in rows:
            w.writerow([repr(r.phi_deg), r.site_index, repr(r.b_res_mT), repr(r.matrix_element)])


def _read_data(path):
    if path is None:
        text = resources.files("fdepr").joinpath("data/species.toml").read_text()
    else:
        text = Path(path).read_text()
    return tomllib.loads(text)


def load_species(path: str | Path | None = None) -> dict[str, SpinSpecies]:
    """Species table keyed by isotope label (``"Er"``, ``"167Er"``, ...)."""
    data = _read_data(path)
    out: dict[str, SpinSpecies] = {}
    for element in data.get("elements", {}).values():
        gyro = GyroTensor(element["gamma_parallel"] * 1e9, element["gamma_perp"] * 1e9)
        for iso in element["isotopes"]:
            spin = float(iso["nuclear_spin"])
            hf = None
            if spin > 0:
                hf = HyperfineTensor(iso["a_parallel"] * 1e6, iso["a_perp"] * 1e6)
            out[iso["name"]] = SpinSpecies(
                name=iso["name"],
                nuclear_spin=spin,
                gyro=gyro,
                hyperfine=hf,
                gamma_nuclear=iso.get("gamma_nuclear", 0.0) * 1e6,
                abundance=iso["abundance"],
            )
    return out


def load_doublets(path: str | Path | None = None) -> dict[str, AnisotropicDoublet]:
    data = _read_data(path)
    out = {}
    for name, d in data.get("doublets", {}).items():
        out[name] = AnisotropicDoublet(
            name=name,
            principal_g=tuple(d["g"]),
            principal_directions=tuple(zip(d["theta"], d["phi"])),
            ground=bool(d.get("ground", False)),
        )
    return out
