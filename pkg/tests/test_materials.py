from __future__ import annotations

import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from wgtes.errors import DataError, DomainError
from wgtes.materials import (
    GOLD,
    TUNGSTEN,
    MaterialParams,
    available_materials,
    effective_conductivity,
    effective_mean_free_path,
    free_electron_thermal_conductivity,
    get_material,
    heat_capacity,
    load_materials,
    lorenz_constant,
    photon_energy,
    register_material,
    thermal_conductivity,
)

# CODATA values typed in by hand so the oracle does not share code with the package
K_B = 1.380649e-23
Q_E = 1.602176634e-19
M_E = 9.1093837015e-31  # CODATA 2018; scipy may carry a later revision
H = 6.62607015e-34
C = 299792458.0


def test_lorenz_number_matches_sommerfeld_value():
    assert lorenz_constant() == pytest.approx(math.pi**2 / 3 * (K_B / Q_E) ** 2, rel=1e-12)
    assert lorenz_constant() == pytest.approx(2.443e-8, rel=1e-3)


@pytest.mark.parametrize("mat, thickness, expected", [(TUNGSTEN, 40e-9, 0.0122), (GOLD, 80e-9, 0.232)])
def test_kappa_reproduces_table_values(mat, thickness, expected):
    assert thermal_conductivity(mat, thickness, 0.1) == pytest.approx(expected, rel=5e-3)


@pytest.mark.parametrize("mat, thickness", [(TUNGSTEN, 40e-9), (GOLD, 80e-9)])
def test_free_electron_route_agrees_with_wiedemann_franz(mat, thickness):
    l_eff = min(thickness, mat.mfp_bulk)
    oracle = mat.n_free * Q_E**2 * l_eff * lorenz_constant() * 0.1 / (M_E * mat.v_fermi)
    assert free_electron_thermal_conductivity(mat, thickness, 0.1) == pytest.approx(oracle, rel=1e-7)
    assert free_electron_thermal_conductivity(mat, thickness, 0.1) == pytest.approx(
        thermal_conductivity(mat, thickness, 0.1), rel=2e-3)


def test_gold_mean_free_path_is_capped_by_film():
    assert effective_mean_free_path(GOLD, 80e-9) == 80e-9
    assert effective_conductivity(GOLD, 80e-9) == pytest.approx(2.23e10 * 80e-9 / 1.88e-5)
    # tungsten's bulk path is shorter than the film, so nothing changes
    assert effective_conductivity(TUNGSTEN, 40e-9) == TUNGSTEN.sigma_bulk


@given(t=st.floats(1e-3, 10.0), d=st.floats(1e-9, 1e-4))
def test_kappa_linear_in_temperature(t, d):
    k1 = thermal_conductivity(TUNGSTEN, d, t)
    k2 = thermal_conductivity(TUNGSTEN, d, 2 * t)
    assert k2 == pytest.approx(2 * k1, rel=1e-12)


@given(d1=st.floats(1e-9, 1e-4), d2=st.floats(1e-9, 1e-4))
def test_kappa_monotone_in_thickness(d1, d2):
    lo, hi = sorted((d1, d2))
    assert thermal_conductivity(GOLD, lo, 0.1) <= thermal_conductivity(GOLD, hi, 0.1)


def test_heat_capacity_of_tes_square():
    v = 10e-6 * 10e-6 * 40e-9
    assert heat_capacity(TUNGSTEN, v, 0.084) == pytest.approx(140.0 * v * 0.084)


def test_photon_energy_at_1550nm():
    assert photon_energy(1550e-9) == pytest.approx(H * C / 1550e-9)
    assert photon_energy(1550e-9) / Q_E == pytest.approx(0.7999, abs=1e-3)


def test_table_units_round_trip():
    d = GOLD.to_table_units()
    assert d["gamma"] == pytest.approx(71.4)
    assert d["sigma_ep"] == pytest.approx(2.6)
    assert MaterialParams.from_table_units("Au", **d) == GOLD


def test_sigma_ep_conversion_to_si():
    # 0.4 nW um^-3 K^-5 = 0.4e-9 W / 1e-18 m^3
    assert TUNGSTEN.sigma_ep == pytest.approx(4e8)


@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan"), float("inf")])
def test_invalid_inputs_raise(bad):
    with pytest.raises(DomainError):
        thermal_conductivity(TUNGSTEN, 40e-9, bad)
    with pytest.raises(DomainError):
        MaterialParams("X", bad, 1, 1, 1, 1, 1)


def test_registry_and_loader(tmp_path):
    assert {"W", "Au"} <= set(available_materials())
    assert get_material("W") is TUNGSTEN
    with pytest.raises(KeyError):
        get_material("unobtainium")
    doc = {"Al": {"gamma": 135.0, "sigma_ep": 0.2, "sigma_bulk": 1e9, "mfp_bulk": 1e-6,
                  "n_free": 1.8e29, "v_fermi": 2.0e6}}
    p = tmp_path / "m.json"
    p.write_text(json.dumps(doc))
    mats = load_materials(p, register=True)
    assert get_material("Al") == mats["Al"]
    with pytest.raises(ValueError):
        register_material(mats["Al"])
    with pytest.raises(DataError):
        load_materials({"Bad": {"gamma": 1.0}})
