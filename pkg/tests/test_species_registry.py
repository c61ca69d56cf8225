import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import constants

from fdepr.species_registry import (BOHR_OVER_H, FieldConfig, build_hamiltonian, field_direction, load_doublets,
                                    load_species, rotation_pattern, transition_fields, transition_frequency,
                                    write_rotation_csv)

TWO_PI = 2 * math.pi
F0 = 6.999e9


@pytest.fixture(scope="module")
def table():
    return load_species()


def brute_force_field(species, f0, lo, hi, step=1e-6, phi=0.0):
    """Independent oracle: scan the lowest splitting on a fine grid and interpolate the crossing."""
    b = np.arange(lo, hi, step)
    split = np.array([np.diff(np.linalg.eigvalsh(build_hamiltonian(species, FieldConfig(x, phi))))[0] for x in b])
    k = int(np.nonzero(np.diff(np.sign(split - f0)))[0][0])
    return b[k] + (f0 - split[k]) / (split[k + 1] - split[k]) * step


def test_zero_field_kramers_degeneracy(table):
    e = np.linalg.eigvalsh(build_hamiltonian(table["Er"], FieldConfig(0.0)))
    assert e[1] - e[0] == pytest.approx(0.0, abs=1e-6)


def test_er_splitting_is_gamma_perp_times_field(table):
    e = np.linalg.eigvalsh(build_hamiltonian(table["Er"], FieldConfig(59.67e-3, phi=17.0)))
    assert e[1] - e[0] == pytest.approx(117.3e9 * 59.67e-3, rel=1e-12)


@pytest.mark.parametrize("name,dim", [("Er", 2), ("143Nd", 16), ("167Er", 16), ("171Yb", 4), ("173Yb", 12)])
def test_hamiltonian_dimension(table, name, dim):
    h = build_hamiltonian(table[name], FieldConfig(0.1))
    assert h.shape == (dim, dim)
    np.testing.assert_allclose(h, h.conj().T, atol=1e-3)


@pytest.mark.parametrize("name,expected_mT", [("Er", 59.67), ("Yb", 127.6)])
def test_resonance_field_matches_brute_force_scan(table, name, expected_mT):
    trs = transition_fields(table[name], TWO_PI * F0)
    assert len(trs) == 1
    b = trs[0].b_res
    oracle = brute_force_field(table[name], F0, b - 2e-4, b + 2e-4)
    assert b == pytest.approx(oracle, abs=1e-9)
    assert b * 1e3 == pytest.approx(expected_mT, abs=0.05)


def test_er_resonance_frozen(table):
    # F0 / (117.3 GHz/T)
    assert transition_fields(table["Er"], TWO_PI * F0)[0].b_res == pytest.approx(0.0596675191815857, rel=1e-9)


def test_nd143_single_branch_in_window(table):
    trs = transition_fields(table["143Nd"], TWO_PI * F0, search_range=(1e-3, 0.125), min_matrix_element=0.05)
    assert len(trs) == 1
    assert trs[0].b_res * 1e3 == pytest.approx(117.5, abs=0.5)


def test_nd143_branches_follow_nuclear_projection(table):
    trs = transition_fields(table["143Nd"], TWO_PI * F0, search_range=(1e-3, 0.4), min_matrix_element=0.05)
    assert len(trs) == 8  # one allowed line per nuclear projection
    assert all(t.lower + t.upper == 15 for t in trs)


def test_transition_frequency_matches_drive_at_resonance(table):
    tr = transition_fields(table["Yb"], TWO_PI * F0)[0]
    f = transition_frequency(table["Yb"], FieldConfig(tr.b_res), tr.lower, tr.upper)
    assert f == pytest.approx(F0, rel=1e-12)


def test_in_plane_rotation_constant_for_axial_species(table):
    rows = rotation_pattern(table["Er"], TWO_PI * F0, np.arange(0, 181, 20))
    b = np.array([r.b_res_mT for r in rows])
    assert len(b) == 10
    assert np.ptp(b) < 1e-9


def test_fe_middle_excursion_small():
    rows = rotation_pattern(load_doublets()["Fe_middle"], TWO_PI * 9.62e9, np.arange(0, 181, 5),
                            search_range=(0.1, 0.25))
    sites = {r.site_index for r in rows}
    assert sites == {0, 1, 2, 3}
    b = np.array([r.b_res_mT for r in rows])
    assert np.all(np.abs(b - 160) < 2)
    assert np.ptp(b) <= 0.5


def test_fe_upper_matches_effective_g_oracle():
    d = load_doublets()["Fe_upper"]
    rows = rotation_pattern(d, TWO_PI * 7e9, np.arange(0, 181, 10), search_range=(0.03, 0.2))
    assert rows
    for r in rows:
        g = d.g_effective(field_direction(r.phi_deg), r.site_index)
        oracle = constants.h * 7e9 / (g * constants.physical_constants["Bohr magneton"][0])
        assert r.b_res_mT == pytest.approx(oracle * 1e3, rel=1e-9)
    # the branch inside 60-90 mT moves monotonically from its minimum near 40 degrees to 90
    site0 = {r.phi_deg: r.b_res_mT for r in rows if r.site_index == 0}
    seq = [site0[p] for p in (40.0, 50.0, 60.0, 70.0, 80.0, 90.0)]
    assert np.all(np.diff(seq) > 0)
    assert 60 <= seq[0] <= 90


def test_rotation_csv_columns(tmp_path, table):
    rows = rotation_pattern(table["Er"], TWO_PI * F0, [0.0, 45.0])
    p = tmp_path / "rot.csv"
    write_rotation_csv(rows, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "phi_deg,site_index,B_res_mT,matrix_element"
    assert len(lines) == 3


def test_bohr_constant():
    assert BOHR_OVER_H == pytest.approx(13.996e9, rel=1e-4)


@settings(max_examples=25, deadline=None)
@given(b=st.floats(0.0, 0.5), phi=st.floats(0, 360), name=st.sampled_from(["Er", "143Nd", "171Yb"]))
def test_hamiltonian_is_traceless(b, phi, name):
    h = build_hamiltonian(load_species()[name], FieldConfig(b, phi))
    assert abs(np.trace(h)) <= 1e-6 * max(1.0, np.abs(h).max())


@settings(max_examples=25, deadline=None)
@given(b=st.floats(1e-3, 0.5), phi=st.floats(0, 360))
def test_effective_spin_splitting_linear_in_field(b, phi):
    sp = load_species()["Yb"]
    e1 = np.diff(np.linalg.eigvalsh(build_hamiltonian(sp, FieldConfig(b, phi))))[0]
    e2 = np.diff(np.linalg.eigvalsh(build_hamiltonian(sp, FieldConfig(2 * b, phi))))[0]
    assert e2 == pytest.approx(2 * e1, rel=1e-9)
