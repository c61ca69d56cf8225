"""Planar resonator: vacuum field around the inductor wire, coupling maps and
coupling distributions, Purcell rates.

Sample frame used for the field maps: x along the wire, y lateral, z along the
sample normal.  Spins sit in the substrate below the wire at depth d > 0
(z = -d).  All rates are angular (rad/s) except kappa-type loss rates, which
are energy decay rates in 1/s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import constants

from .species_registry import FieldConfig, SpinSpecies, Transition, sample_axes, transition_matrix_vector

MU0 = constants.mu_0
HBAR = constants.hbar


@dataclass(frozen=True)
class ResonatorParams:
    """Lumped resonator mode.

    ``omega0`` in rad/s, ``kappa_c``/``kappa_i`` in 1/s, ``impedance`` in ohm,
    wire dimensions in metres, ``wire_angle`` in degrees from the a-axis.
    """

    omega0: float
    kappa_c: float
    kappa_i: float
    impedance: float = 35.0
    wire_width: float = 2e-6
    wire_length: float = 630e-6
    wire_angle: float = 51.0

    def __post_init__(self):
        if self.kappa_c < 0 or self.kappa_i < 0 or self.kappa_c + self.kappa_i <= 0:
            raise ValueError("kappa = kappa_c + kappa_i must be positive")
        if self.impedance <= 0:
            raise ValueError("impedance must be positive")
        if self.wire_width <= 0 or self.wire_length <= 0:
            raise ValueError("wire dimensions must be positive")

    @property
    def kappa(self) -> float:
        return self.kappa_c + self.kappa_i


def vacuum_current(params: ResonatorParams) -> float:
    """RMS vacuum current fluctuations in the inductor (A)."""
    return params.omega0 * math.sqrt(HBAR / (2.0 * params.impedance))


def purcell_rate(g0, delta, kappa):
    """Radiative relaxation rate of a spin coupled to the mode (1/s)."""
    if np.any(np.asarray(kappa) <= 0):
        raise ValueError("kappa must be positive")
    g0 = np.asarray(g0, float)
    delta = np.asarray(delta, float)
    out = (4.0 * g0**2 / kappa) / (1.0 + (2.0 * delta / kappa) ** 2)
    return out if out.ndim else float(out)


def coupling_limit(gamma_nr: float, kappa: float) -> float:
    """Coupling at which the Purcell rate equals ``gamma_nr`` on resonance."""
    return math.sqrt(kappa * gamma_nr) / 2.0


# --------------------------------------------------------------------------
# grids and field profile


@dataclass(frozen=True)
class GridSpec:
    """Non-uniform cross-section grid.

    Cells of ``fine_step`` cover the strip plus ``fine_margin`` on each side
    and the first ``fine_margin`` of depth; beyond that cell sizes grow by
    ``growth`` per cell until ``extent`` (measured from the wire) is reached.
    """

    fine_step: float = 10e-9
    fine_margin: float = 2e-6
    extent: float = 500e-6
    growth: float = 1.08

    def _tail(self, start: float, step: float) -> np.ndarray:
        edges = []
        pos = start
        while pos < self.extent:
            step *= self.growth
            pos = min(pos + step, self.extent)
            edges.append(pos)
        return np.array(edges)

    def depth_edges(self) -> np.ndarray:
        n = int(round(self.fine_margin / self.fine_step))
        fine = np.arange(n + 1) * self.fine_step
        return np.concatenate([fine, self._tail(fine[-1], self.fine_step)])

    def lateral_edges(self, wire_width: float) -> np.ndarray:
        half = wire_width / 2 + self.fine_margin
        n = int(math.ceil(half / self.fine_step))
        fine = np.arange(n + 1) * self.fine_step
        side = np.concatenate([fine, self._tail(fine[-1], self.fine_step)])
        return np.concatenate([-side[:0:-1], side])


@dataclass
class FieldMap:
    """Vacuum field amplitude (T) per cell, sample-frame components (x, y, z)."""

    y: np.ndarray
    depth: np.ndarray
    dy: np.ndarray
    dz: np.ndarray
    b1: np.ndarray  # (ny, nz, 3)
    mask: np.ndarray  # True where no spins can sit
    wire_length: float

    @property
    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.b1, axis=-1)


def _strip_field(y, z, y1, y2, current):
    """Field of a thin strip [y1, y2] at z = 0 carrying ``current`` along +x."""
    k = current / (y2 - y1)
    by = -(MU0 * k / (2 * math.pi)) * (np.arctan((y - y1) / z) - np.arctan((y - y2) / z))
    bz = (MU0 * k / (4 * math.pi)) * np.log(((y - y1) ** 2 + z**2) / ((y - y2) ** 2 + z**2))
    return by, bz


def sheet_current_profile(width: float, n_segments: int, kind: str = "uniform",
                          london_length: float = 100e-9) -> np.ndarray:
    """Fraction of the total current carried by each of ``n_segments`` equal slices."""
    if kind == "uniform":
        return np.full(n_segments, 1.0 / n_segments)
    if kind != "edge":
        raise ValueError(f"unknown current profile {kind!r}")
    sub = 64
    edges = np.linspace(-width / 2, width / 2, n_segments + 1)
    x = (edges[:-1, None] + (np.arange(sub)[None, :] + 0.5) / sub * np.diff(edges)[:, None])
    floor = width * london_length
    k = 1.0 / np.sqrt(np.maximum((width / 2) ** 2 - x**2, floor))
    w = k.mean(axis=1)
    return w / w.sum()


def field_profile(params: ResonatorParams, grid: GridSpec | None = None, current_profile: str = "uniform",
                  london_length: float = 100e-9, n_segments: int = 200,
                  y: np.ndarray | None = None, depth: np.ndarray | None = None) -> FieldMap:
    """Magnetic field of the vacuum current on a cross-section grid.

    Either pass a ``GridSpec`` or explicit cell-centre arrays ``y`` and
    ``depth`` (in which case unit cell sizes are assumed).
    """
    current = vacuum_current(params)
    if y is None or depth is None:
        grid = grid or GridSpec()
        ye = grid.lateral_edges(params.wire_width)
        de = grid.depth_edges()
        y = 0.5 * (ye[1:] + ye[:-1])
        depth = 0.5 * (de[1:] + de[:-1])
        dy, dz = np.diff(ye), np.diff(de)
    else:
        y = np.atleast_1d(np.asarray(y, float))
        depth = np.atleast_1d(np.asarray(depth, float))
        dy, dz = np.ones_like(y), np.ones_like(depth)
    yy, dd = np.meshgrid(y, depth, indexing="ij")
    mask = dd <= 0
    z = np.where(mask, -1.0, -dd)
    w = params.wire_width
    if current_profile == "uniform":
        fractions = np.array([1.0])
    else:
        fractions = sheet_current_profile(w, n_segments, current_profile, london_length)
    edges = np.linspace(-w / 2, w / 2, len(fractions) + 1)
    by = np.zeros_like(yy)
    bz = np.zeros_like(yy)
    for frac, y1, y2 in zip(fractions, edges[:-1], edges[1:]):
        sy, sz = _strip_field(yy, z, y1, y2, frac * current)
        by += sy
        bz += sz
    b1 = np.stack([np.zeros_like(by), by, bz], axis=-1)
    b1[mask] = 0.0
    return FieldMap(y, depth, dy, dz, b1, mask, params.wire_length)


# --------------------------------------------------------------------------
# coupling


def coupling_constant(species: SpinSpecies, delta_b1, field: FieldConfig,
                      transition: tuple[int, int] = (0, 1)) -> np.ndarray | float:
    """Single-photon coupling g0 (rad/s) for vacuum field(s) ``delta_b1`` (T, crystal frame).

    Only the part of the field that drives the chosen transition contributes,
    so a field along the quantization axis gives zero.
    """
    m = transition_matrix_vector(species, field, *transition)
    gamma = species.gyro.matrix()
    b = np.asarray(delta_b1, float)
    drive = b @ gamma  # (gamma^T b) for symmetric gamma
    g = 2 * math.pi * np.abs(drive @ m)
    return float(g) if np.ndim(g) == 0 else g


@dataclass
class CouplingMap:
    y: np.ndarray
    depth: np.ndarray
    dy: np.ndarray
    dz: np.ndarray
    g0: np.ndarray  # (ny, nz) rad/s, NaN where masked
    mask: np.ndarray
    wire_length: float
    uniform_along_wire: bool = True

    @property
    def cell_volume(self) -> np.ndarray:
        return np.outer(self.dy, self.dz) * self.wire_length


def coupling_map(field_map: FieldMap, species: SpinSpecies, field: FieldConfig,
                 transition: Transition | tuple[int, int] = (0, 1), wire_angle: float = 51.0) -> CouplingMap:
    """Per-cell coupling for one spin transition at static field ``field``."""
    if isinstance(transition, Transition):
        field = FieldConfig(transition.b_res, field.phi, field.theta_c)
        pair = (transition.lower, transition.upper)
    else:
        pair = tuple(transition)
    axes = sample_axes(wire_angle, field.theta_c)
    b_crystal = field_map.b1 @ axes
    g = coupling_constant(species, b_crystal, field, pair)
    g = np.where(field_map.mask, np.nan, g)
    return CouplingMap(field_map.y, field_map.depth, field_map.dy, field_map.dz, g, field_map.mask,
                       field_map.wire_length)


@dataclass
class Partition:
    v_r: np.ndarray
    v_nr: np.ndarray
    g0_lim: float
    contour: list = field(default_factory=list)  # arrays of (y, depth) points


def purcell_partition(cmap: CouplingMap, gamma_nr: float, kappa: float) -> Partition:
    """Split unmasked cells into the Purcell volume and the spin-lattice volume."""
    g_lim = coupling_limit(gamma_nr, kappa) if math.isfinite(gamma_nr) else math.inf
    valid = ~cmap.mask
    g = np.nan_to_num(cmap.g0, nan=0.0)
    if gamma_nr == 0:
        v_r = valid & (g > 0)
    else:
        v_r = valid & (purcell_rate(g, 0.0, kappa) > gamma_nr)
    v_nr = valid & ~v_r
    contour = []
    if math.isfinite(g_lim) and g_lim > 0:
        import contourpy

        gen = contourpy.contour_generator(cmap.depth, cmap.y, np.where(valid, g, 0.0))
        contour = [np.column_stack([seg[:, 1], seg[:, 0]]) for seg in gen.lines(g_lim)]
    return Partition(v_r, v_nr, g_lim, contour)


# --------------------------------------------------------------------------
# coupling distributions


@dataclass
class CouplingDistribution:
    """Number of spins per coupling bin.

    ``counts[i]`` spins have couplings inside ``[edges[i], edges[i+1])`` and a
    mean coupling ``centroids[i]``.  For the analytic thin-wire mode ``gbar``
    holds the prefactor of rho(g) = gbar^2 / g^3.
    """

    edges: np.ndarray
    counts: np.ndarray
    centroids: np.ndarray
    provenance: str
    gbar: float | None = None

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def density(self) -> np.ndarray:
        return self.counts / self.widths

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    @property
    def g_min(self) -> float:
        return float(self.edges[0])

    @property
    def g_max(self) -> float:
        return float(self.edges[-1])

    def refined(self) -> "CouplingDistribution":
        """Same distribution with every bin split in two (analytic mode only)."""
        if self.provenance != "analytic_thin_wire":
            raise ValueError("only analytic distributions can be refined exactly")
        return thin_wire_distribution(self.gbar, self.g_min, self.g_max, 2 * len(self.counts))


def log_bins(g_min: float, g_max: float, n_bins: int = 60) -> np.ndarray:
    return np.geomspace(g_min, g_max, n_bins + 1)


def coupling_distribution(cmap: CouplingMap, concentration: float,
                          bins: int | Sequence[float] = 60) -> CouplingDistribution:
    """Histogram of the coupling map weighted by cell volume times concentration (m^-3)."""
    if concentration <= 0:
        raise ValueError("spin concentration must be positive")
    valid = ~cmap.mask
    g = cmap.g0[valid]
    w = (cmap.cell_volume[valid]) * concentration
    if np.isscalar(bins) or isinstance(bins, (int, np.integer)):
        positive = g[g > 0]
        lo, hi = positive.min(), positive.max()
        edges = log_bins(lo, hi * (1 + 1e-12), int(bins))
        edges[0] = lo
    else:
        edges = np.asarray(bins, float)
    inside = (g >= edges[0]) & (g <= edges[-1])
    if not np.all(inside):
        missing = float(w[~inside].sum())
        raise ValueError(f"bins do not cover the coupling range: {missing:.6g} spins "
                         f"({missing / w.sum():.3%}) fall outside [{edges[0]:.4g}, {edges[-1]:.4g}] rad/s")
    idx = np.clip(np.searchsorted(edges, g, side="right") - 1, 0, len(edges) - 2)
    counts = np.bincount(idx, weights=w, minlength=len(edges) - 1)
    gsum = np.bincount(idx, weights=w * g, minlength=len(edges) - 1)
    mid = np.sqrt(edges[1:] * edges[:-1]) if edges[0] > 0 else 0.5 * (edges[1:] + edges[:-1])
    centroids = np.where(counts > 0, gsum / np.where(counts > 0, counts, 1.0), mid)
    return CouplingDistribution(edges, counts, centroids, "from_map")


def thin_wire_distribution(gbar: float, g_min: float, g_max: float,
                           bins: int | Sequence[float] = 60) -> CouplingDistribution:
    """Analytic rho(g) = gbar^2/g^3 on [g_min, g_max], integrated exactly per bin."""
    if not 0 < g_min < g_max:
        raise ValueError("need 0 < g_min < g_max")
    edges = log_bins(g_min, g_max, int(bins)) if np.isscalar(bins) else np.asarray(bins, float)
    lo, hi = edges[:-1], edges[1:]
    counts = 0.5 * gbar**2 * (1.0 / lo**2 - 1.0 / hi**2)
    first_moment = gbar**2 * (1.0 / lo - 1.0 / hi)
    return CouplingDistribution(edges, counts, first_moment / counts, "analytic_thin_wire", gbar)


def thin_wire_gbar(concentration: float, wire_length: float, coupling_times_distance: float) -> float:
    """Prefactor gbar for spins filling the half-space below a line current.

    ``coupling_times_distance`` is G in g0(r) = G / r (rad/s * m).
    """
    return math.sqrt(math.pi * concentration * wire_length) * coupling_times_distance


def g_min_default(gamma_nr: float, kappa: float, fraction: float = 1e-4) -> float:
    """Lower coupling cutoff where the Purcell rate is ``fraction`` of ``gamma_nr``."""
    return coupling_limit(gamma_nr, kappa) * math.sqrt(fraction)


def fit_thin_wire_gbar(dist: CouplingDistribution, decades: float = 1.0) -> float:
    """Prefactor gbar of the 1/g^3 law that best matches a histogram.

    Uses the number of spins above each inner bin edge,
    N(>g) = gbar^2/2 (1/g^2 - 1/g_max^2), keeping edges more than ``decades``
    below g_max (where the finite wire width bends the law) and taking the
    median of the per-edge estimates.
    """
    edges = dist.edges[1:-1]
    above = np.cumsum(dist.counts[::-1])[::-1][1:]
    keep = (edges < dist.g_max * 10.0 ** (-decades)) & (above > 0)
    if keep.sum() < 3:
        raise ValueError("coupling range is too narrow to fit a 1/g^3 law")
    g = edges[keep]
    est = 2 * above[keep] / (1 / g**2 - 1 / dist.g_max**2)
    return float(np.sqrt(np.median(est)))
