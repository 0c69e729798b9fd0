from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wgtes.errors import ConfigError, DomainError
from wgtes.optics import (
    ChipLayout,
    Segment,
    alpha_to_db_per_cm,
    array_efficiency,
    db_per_cm_to_alpha,
    design_sweep,
    device_absorption,
    double_pass_efficiency,
    propagation_transmission,
    serial_array,
    write_sweep_csv,
)

TM_ETA = (0.437, 0.436, 0.432)


def test_single_device_absorption():
    assert device_absorption(32.6, 210.0) == pytest.approx(1 - math.exp(-32.6 * 0.021), rel=1e-12)
    assert device_absorption(32.6, 210.0) == pytest.approx(0.4957, abs=1e-4)
    assert device_absorption(2.9, 210.0) == pytest.approx(0.0591, abs=1e-4)
    assert device_absorption(0.0, 210.0) == 0.0


def test_db_conversions_are_inverse():
    assert db_per_cm_to_alpha(10 / math.log(10)) == pytest.approx(1.0)
    assert alpha_to_db_per_cm(db_per_cm_to_alpha(0.947)) == pytest.approx(0.947)
    assert propagation_transmission(3.0, 1.0) == pytest.approx(10 ** -0.3)


def test_three_detector_lossless_combined():
    rep = array_efficiency(serial_array([0.503] * 3))
    assert rep.combined_single_pass == pytest.approx(1 - 0.497**3, abs=1e-12)
    assert rep.combined_single_pass == pytest.approx(0.877, abs=1e-3)


def test_per_detector_values_follow_survival():
    rep = array_efficiency(serial_array(TM_ETA))
    oracle = [0.437, 0.563 * 0.436, 0.563 * 0.564 * 0.432]
    np.testing.assert_allclose(rep.per_detector, oracle, rtol=1e-12)


def test_loss_between_detectors():
    chip = serial_array(TM_ETA, 3.0, loss_db_per_cm=0.947)
    t = 10 ** (-0.947 * 0.3 / 10)
    oracle = 0.437 + 0.563 * t * 0.436 + 0.563 * 0.564 * t**2 * 0.432
    rep = array_efficiency(chip)
    assert rep.combined_single_pass == pytest.approx(oracle, rel=1e-12)
    assert rep.combined_lossless == pytest.approx(1 - 0.563 * 0.564 * 0.568, rel=1e-12)


def test_double_pass_with_mirror():
    chip = serial_array(TM_ETA, grating_reflectivity=0.5)
    single = 1 - 0.563 * 0.564 * 0.568
    survive = 0.563 * 0.564 * 0.568
    oracle = single + survive * 0.5 * (1 - survive)
    assert double_pass_efficiency(chip) == pytest.approx(oracle, rel=1e-12)
    assert array_efficiency(chip).combined_double_pass == pytest.approx(oracle, rel=1e-12)
    assert double_pass_efficiency(chip, grating_reflectivity=0.0) == pytest.approx(single)


def test_double_pass_requires_terminal_grating():
    with pytest.raises(DomainError):
        double_pass_efficiency(serial_array(TM_ETA))


@given(etas=st.lists(st.floats(0, 1), min_size=1, max_size=6), loss=st.floats(0, 5),
       spacing=st.floats(0, 10), r=st.floats(0, 1))
def test_probability_is_conserved(etas, loss, spacing, r):
    chip = serial_array(etas, spacing, lead_mm=1.0, loss_db_per_cm=loss, grating_reflectivity=r)
    for d in ("A->B", "B->A"):
        rep = array_efficiency(chip, d)
        assert rep.total == pytest.approx(1.0, abs=1e-12)
        assert 0.0 <= rep.combined_single_pass <= rep.combined_lossless + 1e-12


@given(etas=st.lists(st.floats(0, 1), min_size=1, max_size=6))
def test_lossless_combined_is_order_independent(etas):
    a = array_efficiency(serial_array(etas)).combined_single_pass
    b = array_efficiency(serial_array(etas[::-1])).combined_single_pass
    assert a == pytest.approx(b, abs=1e-12)
    assert a == pytest.approx(1 - np.prod(1 - np.asarray(etas)), abs=1e-12)


def test_reverse_direction_meets_detectors_in_reverse():
    chip = serial_array(TM_ETA)
    rev = array_efficiency(chip, "B->A")
    assert rev.per_detector[0] == pytest.approx(0.432)


def test_design_sweep_and_csv(tmp_path):
    lengths = np.array([50.0, 100.0, 210.0, 400.0])
    eta = design_sweep(32.6, lengths)
    assert np.all(np.diff(eta) > 0)
    p = tmp_path / "sweep.csv"
    write_sweep_csv(p, lengths)
    lines = p.read_text().splitlines()
    assert lines[0].startswith("length_um")
    assert len([ln for ln in lines if not ln.startswith("#")]) == 5


def test_detector_from_absorption_coefficient():
    seg = Segment("detector", length_um=210.0, alpha_abs={"TM": 32.6})
    assert seg.detector_efficiency("TM") == pytest.approx(device_absorption(32.6, 210.0))
    with pytest.raises(DomainError):
        seg.detector_efficiency("TE")


def test_interface_loss_is_accounted():
    chip = ChipLayout((Segment("detector", efficiency={"TM": 0.5}, interface_loss=0.1),))
    rep = array_efficiency(chip)
    assert rep.combined_single_pass == pytest.approx(0.9 * 0.5)
    assert rep.interface_lost == pytest.approx(0.1 + 0.45 * 0.1)


def test_layout_json_round_trip():
    chip = replace(serial_array(TM_ETA, 3.0, lead_mm=5.0, loss_db_per_cm=0.947, grating_reflectivity=0.5),
                   coupling={"A": 0.221, "B": 0.148})
    again = ChipLayout.from_dict(chip.to_dict())
    assert again == chip
    with pytest.raises(ConfigError):
        ChipLayout.from_dict({"segments": [], "extra": 1})
    with pytest.raises(ConfigError):
        ChipLayout.from_dict({"segments": [{"kind": "detector", "colour": "red"}]})


@pytest.mark.parametrize("kwargs", [dict(kind="prism"), dict(kind="waveguide", length_um=0.0),
                                    dict(kind="grating", reflectivity=1.5), dict(kind="detector")])
def test_segment_validation(kwargs):
    with pytest.raises(DomainError):
        Segment(**kwargs)
