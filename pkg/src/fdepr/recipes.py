"""Experiment recipes: build the physics objects from a run configuration,
run them and persist CSV results plus a JSON manifest.

Every recipe returns a ``RecipeResult``; files are written by a single
writer after all work items finished, in a fixed order.
"""

from __future__ import annotations

import csv
import json
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import __version__, _kernels
from .analysis_fit import (fit_exponential, fit_lorentzian, fit_rabi, fit_sine, fit_skewed_lorentzian,
                           g0_from_rabi)
from .bloch_dynamics import Pulse, beta_from_power, mean_photon_number, NS
from .config import ConfigError, RunConfig, TWO_PI
from .fluorescence_sim import (FluorescenceCurve, LineShape, SimulationConfig, asymptotic_counts,
                               background_subtract, integrated_counts, simulate_curve)
from .hyperfine_bath import (BathConfig, bath_averaged_rabi, bath_sites, cavity_detunings, enumerate_configs,
                             envelope, retained_mass)
from .photon_counter import (CounterConfig, coarse_grain, count_statistics, export_clicks_csv, id_snr_ensemble,
                             sample_clicks, write_clicks)
from .resonator_mode import (CouplingDistribution, GridSpec, ResonatorParams, coupling_distribution,
                             coupling_map, field_profile, fit_thin_wire_gbar, g_min_default,
                             thin_wire_distribution)
from .species_registry import (FieldConfig, SpinSpecies, field_direction, load_doublets, load_species,
                               rotation_pattern, transition_fields, transition_frequency)

KINDS = ("spectrum", "rotation_pattern", "fluorescence", "count_sweep", "snr_compare", "rabi", "bath_rabi", "fit")
# lines farther than this many (kappa + width) from the cavity are skipped in spectra
_FAR_LINE = 200.0


@dataclass
class ExperimentRecipe:
    kind: str
    config: RunConfig
    output_dir: Path
    prefix: str
    seed: int | None

    @classmethod
    def from_config(cls, kind: str, cfg: RunConfig) -> "ExperimentRecipe":
        if kind not in KINDS:
            raise ConfigError(f"unknown recipe {kind!r}")
        seed = cfg.simulation["seed"]
        if seed is None and _is_stochastic(kind, cfg):
            raise ConfigError(f"{kind} is stochastic here: [simulation].seed is required")
        if seed is not None and seed < 0:
            raise ConfigError("[simulation].seed must be non-negative")
        out = cfg.output
        return cls(kind, cfg, Path(out["directory"]), out["prefix"] or kind, seed)

    def path(self, suffix: str) -> Path:
        return self.output_dir / f"{self.prefix}{suffix}"


def _is_stochastic(kind: str, cfg: RunConfig) -> bool:
    s, c = cfg.simulation, cfg.counter
    if kind == "snr_compare":
        return True
    if kind == "spectrum":
        return s["click_noise"]
    if kind == "fluorescence":
        return c["n_sequences"] > 0
    if kind == "rabi":
        return s["rabi_noise"]
    return False


@dataclass
class RecipeResult:
    kind: str
    tables: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)  # suffix -> (header, rows)
    results: dict = field(default_factory=dict)
    writers: list[tuple[str, Callable[[Path], None]]] = field(default_factory=list)  # binary/other files


# --------------------------------------------------------------------------
# building blocks


@contextmanager
def context(label: str):
    """Prefix any error raised inside with ``label``, keeping its type."""
    try:
        yield
    except ConfigError:
        raise
    except Exception as exc:
        try:
            new = type(exc)(f"{label}: {exc}")
        except Exception:
            raise exc
        raise new from exc


def resonator(cfg: RunConfig) -> ResonatorParams:
    cfg.require("resonator", "frequency", "kappa_c", "kappa_i")
    r = cfg.resonator
    try:
        return ResonatorParams(r["frequency"], r["kappa_c"], r["kappa_i"], r["impedance"], r["wire_width"],
                               r["wire_length"], r["wire_angle"])
    except ValueError as exc:
        raise ConfigError(f"[resonator]: {exc}") from None


def counter(cfg: RunConfig) -> CounterConfig:
    c = cfg.counter
    try:
        return CounterConfig(c["cycle"], c["dark_rate"], c["dead_time"], c["t_rep"])
    except ValueError as exc:
        raise ConfigError(f"[counter]: {exc}") from None


def pulse_beta(cfg: RunConfig, res: ResonatorParams) -> float | None:
    """beta in ns^-1/2 from beta, epsilon/duration or input power/attenuation."""
    p = cfg.pulse
    if p["beta"] is not None:
        return p["beta"]
    if p["input_power"] is not None:
        return beta_from_power(p["input_power"], p["attenuation"], res.omega0)
    if p["epsilon"] is not None:
        cfg.require("pulse", "duration")
        return p["epsilon"] * NS / p["duration"]
    return None


def pulse(cfg: RunConfig, res: ResonatorParams) -> Pulse:
    cfg.require("pulse", "duration")
    beta = pulse_beta(cfg, res)
    if beta is None:
        raise ConfigError("[pulse] needs beta, epsilon or input_power with attenuation")
    try:
        return Pulse(beta, cfg.pulse["duration"], cfg.pulse["detuning"])
    except ValueError as exc:
        raise ConfigError(f"[pulse]: {exc}") from None


def epsilons(cfg: RunConfig, res: ResonatorParams) -> np.ndarray:
    if cfg.pulse["epsilons"] is None:
        raise ConfigError("[pulse].epsilons is required for this recipe")
    eps = np.asarray(cfg.pulse["epsilons"], float)
    if np.any(eps <= 0):
        raise ConfigError("[pulse].epsilons must be positive")
    return eps


def species_entries(cfg: RunConfig) -> list[dict]:
    return [cfg.species, *cfg.species["extra"]]


def resolve_species(entry: dict) -> list[tuple[SpinSpecies, float]]:
    """(species, fraction) pairs for a [species] entry; doublets expand to their four sites."""
    name = entry["name"]
    if name is None:
        raise ConfigError("[species].name is required")
    table = load_species()
    if name in table:
        return [(table[name], 1.0)]
    doublets = load_doublets()
    base, _, site = name.partition("#")
    if base in doublets:
        if site:
            return [(doublets[base].as_species(int(site)), 1.0)]
        return [(doublets[base].as_species(k), 0.25) for k in range(4)]
    raise ConfigError(f"unknown species {name!r}; known: {', '.join(sorted(table) + sorted(doublets))}")


def line_shape(entry: dict, center: float = 0.0) -> LineShape:
    kind = entry["line_shape"]
    if kind == "delta" or entry["linewidth"] is None:
        return LineShape("delta", 0.0, center)
    return LineShape(kind, entry["linewidth"], center)


def gamma_nr(entry: dict) -> float:
    if entry["gamma_nr"] is None:
        raise ConfigError(f"[species] {entry['name']}: gamma_nr is required")
    return entry["gamma_nr"]


class _Maps:
    """Field map computed once per run."""

    def __init__(self, cfg: RunConfig, res: ResonatorParams):
        self.cfg, self.res, self._map = cfg, res, None

    def get(self):
        if self._map is None:
            r = self.cfg.resonator
            grid = GridSpec(fine_step=r["fine_step"], extent=r["grid_extent"])
            self._map = field_profile(self.res, grid, r["current_profile"])
        return self._map


def coupling(cfg: RunConfig, res: ResonatorParams, maps: _Maps, sp: SpinSpecies, transition, n_per_volume: float,
             g_nr: float) -> CouplingDistribution:
    s = cfg.simulation
    phi, theta = s["phi"], s["theta_c"]
    model = s["coupling_model"]
    bins = s["coupling_bins"]
    cmap = coupling_map(maps.get(), sp, FieldConfig(transition.b_res, phi, theta), transition, res.wire_angle)
    if model == "map":
        return coupling_distribution(cmap, n_per_volume, bins)
    dist = coupling_distribution(cmap, n_per_volume, 60)
    gbar = fit_thin_wire_gbar(dist)
    g_max = s["g_max"] if s["g_max"] is not None else dist.g_max
    g_min = s["g_min"] if s["g_min"] is not None else (g_min_default(g_nr, res.kappa) if g_nr > 0 else dist.g_min)
    return thin_wire_distribution(gbar, g_min, g_max, bins)


def sim_config(cfg: RunConfig, entry: dict, dist, line, res) -> SimulationConfig:
    s = cfg.simulation
    return SimulationConfig(dist, line, res, gamma_nr(entry), t_rep=cfg.counter["t_rep"], eta=cfg.counter["eta"],
                            n_detuning_bins=s["detuning_bins"], detuning_span=s["detuning_span"], init=s["init"],
                            gamma_phi=entry["gamma_phi"], method=s["method"])


def curve_grid(t_end: float, n_points: int, t_first: float = 1e-7) -> np.ndarray:
    """Time samples after the pulse: t = 0 then log-spaced up to ``t_end``."""
    if t_end <= 0:
        raise ConfigError("curve end time must be positive")
    t_first = min(t_first, t_end / 10)
    return np.concatenate([[0.0], np.geomspace(t_first, t_end, max(n_points - 1, 2))])


def window_counts(curve: FluorescenceCurve, start: float, length: float) -> float:
    """Expected photons from ``curve`` between ``start`` and ``start + length``."""
    t, r = curve.t, curve.rate
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (r[1:] + r[:-1]) * np.diff(t))])
    a, b = np.interp([start, start + length], t, cum)
    return float(b - a)


def _t_int(cfg: RunConfig) -> float:
    t = cfg.counter["t_int"]
    return cfg.counter["t_rep"] if t is None else t


def _t_end(cfg: RunConfig, need: float) -> float:
    t = cfg.simulation["t_end"]
    if t is None:
        return need
    if t < need * (1 - 1e-12):
        raise ConfigError(f"[simulation].t_end = {t:.6g} s is shorter than the {need:.6g} s the recipe needs")
    return t


def _pmap(fn, items: Iterable, workers: int) -> list:
    items = list(items)
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def child_seeds(seed: int, n: int) -> list[int]:
    return [int(c.generate_state(1, np.uint64)[0] >> np.uint64(1)) for c in np.random.SeedSequence(seed).spawn(n)]


def _selected_transition(cfg: RunConfig, sp: SpinSpecies, res: ResonatorParams):
    s = cfg.simulation
    trs = transition_fields(sp, res.omega0, s["phi"], s["theta_c"], (s["search_min"], s["search_max"]),
                            s["search_step"], min_matrix_element=s["min_matrix_element"])
    if not trs:
        raise ConfigError(f"{sp.name}: no allowed transition in the search range")
    k = s["transition"]
    if not 0 <= k < len(trs):
        raise ConfigError(f"[simulation].transition = {k} but {sp.name} has {len(trs)} transitions")
    return trs[k]


def _single_ensemble(cfg: RunConfig, res: ResonatorParams, maps: _Maps):
    """Species, transition, coupling distribution and line for single-ensemble recipes."""
    entry = cfg.species
    if entry["concentration"] <= 0:
        raise ConfigError("[species].concentration must be positive for this recipe")
    pairs = resolve_species(entry)
    if len(pairs) != 1:
        raise ConfigError("this recipe needs a single site; name one with '<doublet>#<site>'")
    sp, _ = pairs[0]
    tr = _selected_transition(cfg, sp, res)
    n_per_volume = entry["concentration"] / (2 * sp.nuclear_spin + 1)
    dist = coupling(cfg, res, maps, sp, tr, n_per_volume, gamma_nr(entry))
    b = cfg.simulation["field"]
    center = 0.0
    if b is not None:
        s = cfg.simulation
        f = transition_frequency(sp, FieldConfig(b, s["phi"], s["theta_c"]), tr.lower, tr.upper)
        center = TWO_PI * f - res.omega0
    return sp, tr, dist, line_shape(entry, center)


# --------------------------------------------------------------------------
# recipes


def run_spectrum(recipe: ExperimentRecipe) -> RecipeResult:
    cfg = recipe.config
    s = cfg.simulation
    if s["field_grid"] is None:
        raise ConfigError("[simulation].field_grid is required for a spectrum")
    res = resonator(cfg)
    pl = pulse(cfg, res)
    cnt = counter(cfg)
    t_int = _t_int(cfg)
    t_rep = cnt.t_rep
    need = max(t_int, t_rep) if (s["background_subtract"] or s["click_noise"]) else t_int
    t = curve_grid(_t_end(cfg, need), s["n_points"])
    maps = _Maps(cfg, res)

    items = []  # (entry, species, transition, distribution)
    for entry in species_entries(cfg):
        if entry["concentration"] == 0:
            continue
        gamma_nr(entry)
        for sp, fraction in resolve_species(entry):
            with context(f"{sp.name}"):
                trs = transition_fields(sp, res.omega0, s["phi"], s["theta_c"], (s["search_min"], s["search_max"]),
                                        s["search_step"], min_matrix_element=s["min_matrix_element"])
                n_pv = entry["concentration"] * fraction / (2 * sp.nuclear_spin + 1)
                for tr in trs:
                    items.append((entry, sp, tr, coupling(cfg, res, maps, sp, tr, n_pv, entry["gamma_nr"])))

    def point(b):
        with context(f"field point {b * 1e3:.6g} mT"):
            rate = np.zeros_like(t)
            for entry, sp, tr, dist in items:
                f = transition_frequency(sp, FieldConfig(b, s["phi"], s["theta_c"]), tr.lower, tr.upper)
                center = TWO_PI * f - res.omega0
                width = entry["linewidth"] or 0.0
                if abs(center) > _FAR_LINE * (res.kappa + width):
                    continue
                sim = sim_config(cfg, entry, dist, line_shape(entry, center), res)
                rate += simulate_curve(sim, pl, t).rate
            curve = FluorescenceCurve(t, rate)
            c_raw = integrated_counts(curve, t_int) + cnt.dark_rate * t_int
            if s["background_subtract"]:
                c_spin = background_subtract(curve, t_int, cnt.dark_rate, t_rep)
            else:
                c_spin = c_raw - cnt.dark_rate * t_int
            return curve, c_raw, c_spin

    grid = np.asarray(s["field_grid"], float)
    outcomes = _pmap(point, grid, s["workers"])
    header = ["B_mT", "C_raw", "C_spin"]
    rows = [[b * 1e3, c_raw, c_spin] for b, (_, c_raw, c_spin) in zip(grid, outcomes)]
    if s["click_noise"]:
        n_seq = cfg.counter["n_sequences"]
        if n_seq <= 0:
            raise ConfigError("[counter].n_sequences must be positive with click_noise")
        seeds = child_seeds(recipe.seed, len(grid))

        def noisy(k):
            with context(f"field point {grid[k] * 1e3:.6g} mT"):
                streams = sample_clicks(outcomes[k][0], cnt, n_seq, seeds[k], n_spins=s["n_spins"])
                return count_statistics(streams, t_int).mean

        header.append("C_raw_mc")
        for row, c in zip(rows, _pmap(noisy, range(len(grid)), s["workers"])):
            row.append(c)
    out = RecipeResult("spectrum")
    out.tables[".csv"] = (header, rows)
    out.results["n_transitions"] = len(items)
    out.results["transitions"] = [{"species": sp.name, "b_res_mT": tr.b_res * 1e3, "lower": tr.lower,
                                   "upper": tr.upper} for _, sp, tr, _ in items]
    return out


def run_rotation(recipe: ExperimentRecipe) -> RecipeResult:
    cfg = recipe.config
    s = cfg.simulation
    cfg.require("resonator", "frequency")
    if s["phi_grid"] is None:
        raise ConfigError("[simulation].phi_grid is required for a rotation pattern")
    name = cfg.species["name"] or cfg.species["doublet"]
    if name is None:
        raise ConfigError("[species] needs name or doublet")
    doublets = load_doublets()
    target = doublets[name] if name in doublets else resolve_species({**cfg.species, "name": name})[0][0]
    rows = rotation_pattern(target, cfg.resonator["frequency"], s["phi_grid"], s["theta_c"],
                            (s["search_min"], s["search_max"]), s["search_step"], s["min_matrix_element"])
    out = RecipeResult("rotation_pattern")
    out.tables[".csv"] = (["phi_deg", "site_index", "B_res_mT", "matrix_element"],
                          [[r.phi_deg, r.site_index, r.b_res_mT, r.matrix_element] for r in rows])
    if rows:
        by_site: dict[int, list[float]] = {}
        for r in rows:
            by_site.setdefault(r.site_index, []).append(r.b_res_mT)
        out.results["excursion_mT"] = {str(k): max(v) - min(v) for k, v in sorted(by_site.items())}
    return out


def run_fluorescence(recipe: ExperimentRecipe) -> RecipeResult:
    cfg = recipe.config
    s = cfg.simulation
    res = resonator(cfg)
    pl = pulse(cfg, res)
    cnt = counter(cfg)
    maps = _Maps(cfg, res)
    sp, tr, dist, line = _single_ensemble(cfg, res, maps)
    n_seq = cfg.counter["n_sequences"]
    t = curve_grid(_t_end(cfg, cnt.t_rep if n_seq > 0 else _t_int(cfg)), s["n_points"])
    sim = sim_config(cfg, cfg.species, dist, line, res)
    with context(sp.name):
        curve = simulate_curve(sim, pl, t)
    out = RecipeResult("fluorescence")
    out.tables[".csv"] = (["t_s", "rate"], [[a, b] for a, b in zip(t, curve.rate)])
    out.results.update(transition_field_mT=tr.b_res * 1e3, n_spins=dist.total, n_packets=len(curve.amplitude),
                       total_counts=curve.total_counts(), epsilon=pl.epsilon,
                       mean_photon_number=mean_photon_number(pl, res))
    try:
        fit = fit_exponential(t, curve.rate)
        out.results["tail_fit"] = fit.as_dict()
    except Exception as exc:  # the tail fit is a diagnostic, not a product
        out.results["tail_fit"] = {"error": str(exc)}
    if n_seq > 0:
        n_spins = s["n_spins"]
        streams = sample_clicks(curve, cnt, n_seq, recipe.seed, n_spins=n_spins, workers=s["workers"])
        hist = count_statistics(streams, _t_int(cfg))
        out.results.update(count_mean=hist.mean, count_std=hist.std, saturated=streams.saturated)
        if cfg.output["write_clicks"]:
            out.writers.append(("_clicks.bin", lambda p: write_clicks(streams, p)))
            out.writers.append(("_clicks.csv", lambda p: export_clicks_csv(streams, p, 0)))
        out.tables["_histogram.csv"] = (["C", "probability"], [[int(v), p] for v, p in zip(*hist.distribution())])
        if cfg.counter["t_bin"] is not None:
            starts, rate = coarse_grain(streams, cfg.counter["t_bin"])
            out.tables["_binned.csv"] = (["t_s", "rate"], [[a, b] for a, b in zip(starts, rate)])
    return out


def _analytic_config(sim: SimulationConfig, dist: CouplingDistribution) -> SimulationConfig:
    if dist.provenance == "analytic_thin_wire":
        tw = dist
    else:
        tw = thin_wire_distribution(fit_thin_wire_gbar(dist), dist.g_min, dist.g_max, len(dist.counts))
    return SimulationConfig(tw, LineShape("delta"), sim.resonator, sim.gamma_nr, eta=sim.eta)


def run_count_sweep(recipe: ExperimentRecipe) -> RecipeResult:
    cfg = recipe.config
    s = cfg.simulation
    res = resonator(cfg)
    cfg.require("pulse", "duration")
    duration = cfg.pulse["duration"]
    eps = epsilons(cfg, res)
    if eps.max() / eps.min() < 100 * (1 - 1e-9):
        raise ConfigError("[pulse].epsilons must span at least two decades")
    maps = _Maps(cfg, res)
    sp, tr, dist, line = _single_ensemble(cfg, res, maps)
    sim = sim_config(cfg, cfg.species, dist, line, res)
    t_int = cfg.counter["t_int"]
    t = curve_grid(_t_end(cfg, t_int if t_int is not None else 1e-3), s["n_points"])
    analytic = _analytic_config(sim, dist)

    def counts(p):
        curve = simulate_curve(sim, p, t)
        return curve.total_counts() if t_int is None else integrated_counts(curve, t_int)

    # emission left over from the previous repetition does not depend on the pulse
    baseline = counts(Pulse(0.0, duration, cfg.pulse["detuning"]))

    def point(e):
        with context(f"epsilon {e:.6g} ns^1/2"):
            c_sim = counts(Pulse.from_strength(e, duration, cfg.pulse["detuning"])) - baseline
            c_r, c_nr = asymptotic_counts(e, analytic)
            return c_sim, c_r, c_nr

    rows = [[e, *v] for e, v in zip(eps, _pmap(point, eps, s["workers"]))]
    out = RecipeResult("count_sweep")
    out.tables[".csv"] = (["epsilon", "C_spin_sim", "C_R_analytic", "C_NR_analytic"], rows)
    ratio = np.array([r[1] / (r[2] + r[3]) for r in rows if r[2] + r[3] > 0])
    out.results.update(gbar=analytic.coupling.gbar, baseline_counts=baseline, transition_field_mT=tr.b_res * 1e3,
                       ratio_min=float(ratio.min()), ratio_max=float(ratio.max()))
    return out


def run_snr_compare(recipe: ExperimentRecipe) -> RecipeResult:
    cfg = recipe.config
    s = cfg.simulation
    res = resonator(cfg)
    cnt = counter(cfg)
    cfg.require("pulse", "duration")
    duration = cfg.pulse["duration"]
    eps = epsilons(cfg, res)
    n_seq = cfg.counter["n_sequences"]
    if n_seq < 2:
        raise ConfigError("[counter].n_sequences must be at least 2")
    maps = _Maps(cfg, res)
    sp, tr, dist, line = _single_ensemble(cfg, res, maps)
    sim = sim_config(cfg, cfg.species, dist, line, res)
    t_int = _t_int(cfg)
    t = curve_grid(_t_end(cfg, cnt.t_rep), s["n_points"])
    n_spins = s["n_spins"] if s["n_spins"] is not None else int(round(dist.total))
    seeds = child_seeds(recipe.seed, len(eps))
    eta = cfg.counter["eta"]

    # counts expected without a pulse: dark counts plus emission left over from the previous repetition
    idle = simulate_curve(sim, Pulse(0.0, duration, cfg.pulse["detuning"]), t)

    def point(k):
        e = eps[k]
        with context(f"epsilon {e:.6g} ns^1/2"):
            curve = simulate_curve(sim, Pulse.from_strength(e, duration, cfg.pulse["detuning"]), t)
            streams = sample_clicks(curve, cnt, n_seq, seeds[k], n_spins=n_spins)
            hist = count_statistics(streams, t_int)
            background = window_counts(idle, cnt.dead_time, hist.t_int) + cnt.dark_rate * hist.t_int
            signal = hist.mean - background
            fd = signal / hist.std if hist.std > 0 else math.inf
            pk = curve.packets
            idr = id_snr_ensemble(pk.g0, pk.delta, pk.weight, e, res.kappa_c, res.kappa, eta)
            return hist, signal, fd, idr

    outcomes = _pmap(point, range(len(eps)), s["workers"])
    out = RecipeResult("snr_compare")
    rows = []
    for k, (e, (hist, signal, fd, idr)) in enumerate(zip(eps, outcomes)):
        rows.append([e, hist.mean, hist.std, signal, fd, idr, fd / idr if idr > 0 else math.inf])
        out.tables[f"_hist_{k:03d}.csv"] = (["C", "probability"],
                                            [[int(v), p] for v, p in zip(*hist.distribution())])
    out.tables[".csv"] = (["epsilon", "C_mean", "C_std", "C_spin", "snr_fd", "snr_id", "ratio"], rows)
    out.results.update(n_spins=n_spins, t_int_s=t_int, transition_field_mT=tr.b_res * 1e3)
    return out


def run_rabi(recipe: ExperimentRecipe) -> RecipeResult:
    cfg = recipe.config
    s = cfg.simulation
    res = resonator(cfg)
    beta = pulse_beta(cfg, res)
    if beta is None:
        raise ConfigError("[pulse] needs beta or input_power with attenuation for a Rabi scan")
    if cfg.pulse["durations"] is None:
        raise ConfigError("[pulse].durations is required for a Rabi scan")
    durations = np.asarray(cfg.pulse["durations"], float)
    if np.any(durations <= 0):
        raise ConfigError("[pulse].durations must be positive")
    maps = _Maps(cfg, res)
    sp, tr, dist, line = _single_ensemble(cfg, res, maps)
    sim = sim_config(cfg, cfg.species, dist, line, res)
    t_int = _t_int(cfg)
    t = curve_grid(_t_end(cfg, t_int), s["n_points"])

    def point(dt):
        with context(f"duration {dt:.6g} s"):
            return integrated_counts(simulate_curve(sim, Pulse(beta, dt, cfg.pulse["detuning"]), t), t_int)

    counts = np.array(_pmap(point, durations, s["workers"]))
    weights = None
    if s["rabi_noise"]:
        n_seq = max(cfg.counter["n_sequences"], 1)
        rng = np.random.default_rng(recipe.seed)
        counts = rng.poisson(counts * n_seq) / n_seq
        weights = "poisson"
    fit = fit_rabi(durations, counts, weights=weights, min_f=s["rabi_min_f"])
    n_bar = mean_photon_number(Pulse(beta, 1.0, cfg.pulse["detuning"]), res)
    out = RecipeResult("rabi")
    out.tables[".csv"] = (["dt_s", "counts", "fit"], [[a, b, c] for a, b, c in zip(durations, counts, fit(durations))])
    out.results.update(A=fit.A, omega_r=fit.omega_r, t_c1=fit.t_c1, B=fit.B, t_c2=fit.t_c2,
                       errors=list(fit.errors), mean_photon_number=n_bar, g0_rabi=g0_from_rabi(fit.omega_r, n_bar))
    return out


def run_bath_rabi(recipe: ExperimentRecipe) -> RecipeResult:
    cfg = recipe.config
    s = cfg.simulation
    if s["rabi_frequency"] is None:
        raise ConfigError("[simulation].rabi_frequency is required")
    pairs = resolve_species(cfg.species)
    if len(pairs) != 1:
        raise ConfigError("bath simulation needs a single site")
    sp, _ = pairs[0]
    try:
        bath = BathConfig(s["bath_sites"], s["bath_abundance"], s["bath_max_occupied"])
    except ValueError as exc:
        raise ConfigError(f"[simulation] bath: {exc}") from None
    sites = bath_sites(sp, field_direction(s["phi"], s["theta_c"]), bath)
    t = np.linspace(0.0, s["rabi_t_end"], s["rabi_points"])
    n_det = s["cavity_detunings"]
    det = cavity_detunings(resonator(cfg).kappa, n_det) if n_det > 1 else (0.0,)
    p = bath_averaged_rabi(sites, bath, s["rabi_frequency"], t, det, nuclear_larmor=s["nuclear_larmor"])
    period = TWO_PI / s["rabi_frequency"]
    _, contrast = envelope(t, p, period)
    out = RecipeResult("bath_rabi")
    out.tables[".csv"] = (["t_s", "p_up"], [[a, b] for a, b in zip(t, p)])
    out.results.update(n_configurations=len(enumerate_configs(bath)), retained_mass=retained_mass(bath),
                       sites=[{"x_m": st.position[0], "y_m": st.position[1], "z_m": st.position[2],
                               "A_rad_s": st.a, "B_rad_s": st.b} for st in sites],
                       contrast=contrast.tolist())
    return out


_FIT_MODELS = ("exponential", "lorentzian", "skewed_lorentzian", "rabi", "sine")


def read_columns(path: str | Path, x_column: str | None, y_column: str | None) -> tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    if len(rows) < 2:
        raise ConfigError(f"{path}: no data rows")
    header = rows[0]
    xi = header.index(x_column) if x_column in header else 0
    yi = header.index(y_column) if y_column in header else 1
    for name, idx in ((x_column, xi), (y_column, yi)):
        if name is not None and name not in header:
            raise ConfigError(f"{path}: no column {name!r} (have {', '.join(header)})")
    try:
        data = np.array([[float(r[xi]), float(r[yi])] for r in rows[1:] if r])
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{path}: non-numeric data ({exc})") from None
    return data[:, 0], data[:, 1]


def run_fit(recipe: ExperimentRecipe) -> RecipeResult:
    cfg = recipe.config
    s = cfg.simulation
    model = s["fit_model"]
    if model not in _FIT_MODELS:
        raise ConfigError(f"[simulation].fit_model must be one of {', '.join(_FIT_MODELS)}")
    if s["fit_input"] is None:
        raise ConfigError("[simulation].fit_input is required")
    x, y = read_columns(s["fit_input"], s["x_column"], s["y_column"])
    w = s["fit_weights"]
    out = RecipeResult("fit")
    if model == "exponential":
        win = s["fit_window"]
        if win is not None and len(win) != 2:
            raise ConfigError("[simulation].fit_window needs two times")
        res = fit_exponential(x, y, None if win is None else tuple(win), weights=w)
        t0 = res["window_start"]
        curve = np.where(x >= t0, res["amplitude"] * np.exp(-(x - t0) / res["T1_eff"]) + res["offset"], np.nan)
        out.results.update(res.as_dict())
    elif model in ("lorentzian", "skewed_lorentzian"):
        fn = fit_lorentzian if model == "lorentzian" else fit_skewed_lorentzian
        res = fn(x, y, weights=w, field_slope=s["field_slope"])
        x0, width, h, a = (res[k] for k in ("center", "width", "amplitude", "offset"))
        sk = res["skewness"] if model == "skewed_lorentzian" else 0.0
        wx = width * (1 + sk * np.tanh((x - x0) / width))
        curve = a + h / (1 + ((x - x0) / wx) ** 2)
        out.results.update(res.as_dict())
    elif model == "rabi":
        res = fit_rabi(x, y, weights=w, min_f=s["rabi_min_f"])
        curve = res(x)
        out.results.update(A=res.A, omega_r=res.omega_r, t_c1=res.t_c1, B=res.B, t_c2=res.t_c2,
                           errors=list(res.errors))
    else:
        period = s["fit_period"]
        if period is None:
            raise ConfigError("[simulation].fit_period is required for sine fits")
        res = fit_sine(x, y, period)
        curve = res["amplitude"] * np.sin(TWO_PI * (x - res["zero_crossing"]) / period) + res["offset"]
        out.results.update(res.as_dict())
    out.results["model"] = model
    out.tables[".csv"] = (["x", "y", "model"], [[a, b, c] for a, b, c in zip(x, y, curve)])
    return out


RUNNERS = {
    "spectrum": run_spectrum,
    "rotation_pattern": run_rotation,
    "fluorescence": run_fluorescence,
    "count_sweep": run_count_sweep,
    "snr_compare": run_snr_compare,
    "rabi": run_rabi,
    "bath_rabi": run_bath_rabi,
    "fit": run_fit,
}


# --------------------------------------------------------------------------
# persistence


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_table(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def versions() -> dict:
    import numba
    import scipy

    return {"fdepr": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version(), "kernel_backend": _kernels.backend()}


def _finite(o):
    """Replace non-finite floats by strings so the manifest stays strict JSON."""
    if isinstance(o, dict):
        return {k: _finite(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_finite(v) for v in o]
    if isinstance(o, np.ndarray):
        return _finite(o.tolist())
    if isinstance(o, (float, np.floating)) and not math.isfinite(o):
        return repr(float(o))
    return o


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def run(recipe: ExperimentRecipe) -> tuple[RecipeResult, Path]:
    """Run a recipe, write its files and the manifest; returns the result and the manifest path."""
    start = time.perf_counter()
    result = RUNNERS[recipe.kind](recipe)
    wall = time.perf_counter() - start
    recipe.output_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for suffix, (header, rows) in result.tables.items():
        p = recipe.path(suffix)
        write_table(p, header, rows)
        outputs.append(p.name)
    for suffix, writer in result.writers:
        p = recipe.path(suffix)
        writer(p)
        outputs.append(p.name)
    manifest = {
        "recipe": recipe.kind,
        "config_file": recipe.config.source,
        "parameters": recipe.config.resolved(),
        "seed": recipe.seed,
        "versions": versions(),
        "wall_time_s": wall,
        "outputs": outputs,
        "results": result.results,
    }
    mpath = recipe.path("_manifest.json")
    with open(mpath, "w") as fh:
        json.dump(_finite(manifest), fh, indent=2, default=_json_default, allow_nan=False)
    return result, mpath
