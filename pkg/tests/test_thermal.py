from __future__ import annotations

import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp
from scipy.linalg import solve_banded
from scipy.signal import welch

from wgtes.errors import ConfigError, DataError, DomainError, StabilityError
from wgtes.materials import GOLD, TUNGSTEN, lorenz_constant, photon_energy
from wgtes.thermal import (
    BiasCircuit,
    DetectorDesign,
    NoiseSpectrum,
    build_network,
    cell_index,
    colored_noise,
    default_design,
    energy_resolution,
    equilibrium_state,
    impact_weights,
    inject_photon,
    operating_point,
    optimal_filter_resolution,
    run_pulse,
    simulate_pulse,
    step_heat_equation,
    stored_energy,
    tes_rates,
    tes_step,
    uniform_state,
    wf_heat_flow,
)
from wgtes.thermal import _kernels, model
from wgtes.thermal.design import normal_resistance_estimate, operating_temperature
from wgtes.thermal.noise import FWHM_PER_SIGMA

DESIGN = default_design()
E_PH = photon_energy(1550e-9)
FAST = dict(duration=20e-6, dt_sample=10e-9)


# --- design ----------------------------------------------------------------------

def test_default_design_values():
    assert DESIGN.total_length == pytest.approx(210e-6)
    assert normal_resistance_estimate(DESIGN) == pytest.approx(5.0)
    assert DESIGN.tes is TUNGSTEN and DESIGN.spine is GOLD


def test_design_json_round_trip():
    doc = DESIGN.to_dict()
    assert doc["tail_length"] == pytest.approx(100.0) and doc["tes_thickness"] == pytest.approx(40.0)
    assert DetectorDesign.from_json(json.dumps(doc)) == DESIGN


@pytest.mark.parametrize("doc", [{"tail": 3}, {"bias": {"volts": 1}}, {"tail_length": -5}])
def test_design_rejects_bad_config(doc):
    with pytest.raises(ConfigError):
        DetectorDesign.from_dict(doc)


def test_design_domain_checks():
    with pytest.raises(DomainError):
        default_design(bath_temperature=0.09)
    with pytest.raises(DomainError):
        BiasCircuit(operating_fraction=1.0)
    with pytest.raises(DomainError):
        default_design(tes_material="Unobtainium")


# --- kernels ---------------------------------------------------------------------

@given(st.floats(0.07, 0.1))
def test_transition_derivative(temp):
    r, dr = _kernels.transition_resistance(temp, 5.0, 0.084, 1e-3)
    h = 1e-7
    fd = (_kernels.transition_resistance(temp + h, 5.0, 0.084, 1e-3)[0]
          - _kernels.transition_resistance(temp - h, 5.0, 0.084, 1e-3)[0]) / (2 * h)
    assert dr == pytest.approx(fd, rel=1e-4, abs=1e-6)
    assert 0 <= r <= 5.0


def test_resistance_at_tc_is_half_normal():
    assert _kernels.transition_resistance(0.084, 5.0, 0.084, 1e-3)[0] == pytest.approx(2.5)


@given(st.integers(2, 40), st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_twisted_solver_matches_banded_solver(n, seed, where):
    rng = np.random.default_rng(seed)
    twist = min(int(where * n), n - 1)
    sub, sup = -rng.uniform(0, 1, n - 1), -rng.uniform(0, 1, n - 1)
    diag = 2.5 + rng.uniform(0, 1, n)
    rhs = rng.normal(size=n)
    ab = np.zeros((3, n))
    ab[0, 1:], ab[1], ab[2, :-1] = sup, diag, sub
    np.testing.assert_allclose(_kernels.solve_twisted(sub, diag, sup, rhs, twist), solve_banded((1, 1), ab, rhs), rtol=1e-10)


def test_wf_heat_flow_closed_form():
    q = wf_heat_flow(1e7, 1e-13, 0.06, 0.07, 1e-6)
    assert q == pytest.approx(1e7 * 1e-13 * lorenz_constant() * (0.07**2 - 0.06**2) / (2e-6))


# --- network and stepping --------------------------------------------------------

def test_network_heat_capacity_sums_volumes():
    net = build_network(DESIGN, 1e-6)
    t = 1.0
    tails = 2 * DESIGN.tail_length * (TUNGSTEN.gamma * 3.5e-6 * 40e-9 + GOLD.gamma * 2e-6 * 80e-9)
    tes = TUNGSTEN.gamma * DESIGN.tes_volume
    assert net.c.sum() * t == pytest.approx(tails + tes, rel=1e-12)


def test_tail_must_fit_grid():
    with pytest.raises(DomainError):
        build_network(DESIGN, 3e-6)


def test_bath_state_is_stationary_without_bias():
    s = uniform_state(DESIGN, DESIGN.bath_temperature)
    out = step_heat_equation(s, DESIGN, 1e-6)
    np.testing.assert_allclose(out.t_e, s.t_e, rtol=1e-13)


def test_backward_euler_energy_ledger(rng):
    """One implicit step loses exactly dt times the end-of-step e-p power."""
    s = uniform_state(DESIGN, 0.06)
    s = replace(s, t_e=s.t_e * (1 + 0.2 * rng.uniform(size=s.t_e.size)))
    dt = 5e-9
    out = step_heat_equation(s, DESIGN, dt)
    net = build_network(DESIGN, s.dx)
    p_ep = np.sum(net.s * (out.t_e**5 - DESIGN.bath_temperature**5))
    d_stored = stored_energy(out, DESIGN) - stored_energy(s, DESIGN)
    assert d_stored == pytest.approx(-dt * p_ep, rel=1e-9)


def test_heat_step_matches_independent_ode():
    """Many small implicit steps agree with a stiff ODE solve of the same network.

    The right-hand side is written here from the material constants alone:
    c_i T_i dT_i/dt = sum of Wiedemann-Franz flows - Sigma V (T^5 - T_b^5).
    """
    d = replace(DESIGN, tail_length=20e-6)
    dx = 2e-6
    n_tail = 10
    area_w, area_au = 3.5e-6 * 40e-9, 2e-6 * 80e-9
    gam = (TUNGSTEN.gamma * area_w + GOLD.gamma * area_au) * dx
    sep = (TUNGSTEN.sigma_ep * area_w + GOLD.sigma_ep * area_au) * dx
    sig = TUNGSTEN.sigma_bulk * area_w + GOLD.sigma_bulk * 80e-9 / GOLD.mfp_bulk * area_au
    n = 2 * n_tail + 1
    gam_i = np.full(n, gam)
    sep_i = np.full(n, sep)
    gam_i[[0, -1]] /= 2
    sep_i[[0, -1]] /= 2
    gam_i[n_tail] += TUNGSTEN.gamma * d.tes_volume
    sep_i[n_tail] += TUNGSTEN.sigma_ep * d.tes_volume
    k = sig * lorenz_constant() / (2 * dx)

    def rhs(_t, T):
        flow = k * (T[1:] ** 2 - T[:-1] ** 2)
        net_in = np.zeros(n)
        net_in[:-1] += flow
        net_in[1:] -= flow
        return (net_in - sep_i * (T**5 - d.bath_temperature**5)) / (gam_i * T)

    T0 = np.full(n, 0.06)
    T0[3] = 0.2
    ref = solve_ivp(rhs, (0, 50e-9), T0, method="Radau", rtol=1e-10, atol=1e-14).y[:, -1]
    s = replace(uniform_state(d, 0.06, dx=dx), t_e=T0)
    for _ in range(500):
        s = step_heat_equation(s, d, 1e-10)
    np.testing.assert_allclose(s.t_e, ref, rtol=2e-3)


def test_step_rejects_bad_dt():
    with pytest.raises(DomainError):
        step_heat_equation(equilibrium_state(DESIGN), DESIGN, -1.0)


def test_newton_failure_surfaces_as_stability_error(monkeypatch):
    def failing(*args):
        return args[0], args[1], 0.0, 0.0, 1
    monkeypatch.setattr(model._kernels, "be_step", failing)
    with pytest.raises(StabilityError):
        tes_step(equilibrium_state(DESIGN), DESIGN, 1e-9)


# --- operating point -------------------------------------------------------------

def test_operating_point_resistance_and_balance():
    op = operating_point(DESIGN)
    assert op.resistance == pytest.approx(0.3 * DESIGN.r_normal, rel=1e-3)
    net = build_network(DESIGN)
    p_ep = np.sum(net.s * (op.state.t_e**5 - DESIGN.bath_temperature**5))
    assert op.joule_power == pytest.approx(p_ep, rel=1e-8)
    assert op.state.t_tes == pytest.approx(operating_temperature(DESIGN), abs=1e-5)


def test_operating_point_is_stationary():
    dT, dI = tes_rates(equilibrium_state(DESIGN), DESIGN)
    assert abs(dT) < 1e-6 and abs(dI) < 1e-6
    s = tes_step(equilibrium_state(DESIGN), DESIGN, 1e-6)
    np.testing.assert_allclose(s.t_e, equilibrium_state(DESIGN).t_e, rtol=1e-9)


# --- pulses ----------------------------------------------------------------------

def test_injection_adds_exact_energy():
    eq = equilibrium_state(DESIGN)
    for x in (0.0, 37e-6, -100e-6):
        hot = inject_photon(eq, DESIGN, x, E_PH)
        assert stored_energy(hot, DESIGN) - stored_energy(eq, DESIGN) == pytest.approx(E_PH, rel=1e-9)


def test_cell_index_bounds():
    assert cell_index(DESIGN, 0.0) == build_network(DESIGN).tes
    assert cell_index(DESIGN, 100e-6) == build_network(DESIGN).x.size - 1
    assert cell_index(DESIGN, -100e-6) == 0
    with pytest.raises(DomainError):
        cell_index(DESIGN, 101e-6)


@pytest.mark.parametrize("x", [0.0, 30e-6, 100e-6])
def test_energy_conservation(x):
    run = run_pulse(DESIGN, x, **FAST)
    assert abs(run.balance_error) < 1e-3


def test_mirror_symmetry_is_exact():
    a = simulate_pulse(DESIGN, 40e-6, **FAST)
    b = simulate_pulse(DESIGN, -40e-6, **FAST)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_pulse_shape():
    tr = simulate_pulse(DESIGN, 0.0, duration=40e-6)
    assert tr.samples[0] == 0.0
    assert tr.samples.min() < 0  # current drops as the TES heats
    assert abs(tr.samples[-1]) < 1e-3 * tr.peak
    # strong electrothermal feedback: integrated current deficit ~ E / V_bias
    v = operating_point(DESIGN).v_bias
    assert -tr.area * v / E_PH == pytest.approx(1.0, rel=0.2)


def test_pulse_scales_linearly_at_small_energy():
    a = simulate_pulse(DESIGN, 0.0, energy=0.01 * E_PH, **FAST)
    b = simulate_pulse(DESIGN, 0.0, energy=0.02 * E_PH, **FAST)
    np.testing.assert_allclose(b.samples, 2 * a.samples, rtol=0.02, atol=1e-3 * b.peak)


def test_trace_csv_round_trip(tmp_path):
    tr = simulate_pulse(DESIGN, 0.0, duration=2e-6, dt_sample=10e-9)
    p = tmp_path / "p.csv"
    tr.to_csv(p, header_lines=["hello"])
    back = type(tr).from_csv(p)
    np.testing.assert_array_equal(back.samples, tr.samples)
    assert back.dt == pytest.approx(tr.dt)


# --- noise and resolution --------------------------------------------------------

def test_optimal_filter_exponential_oracle():
    """For s(t) = A exp(-t/tau) in white noise N, the integral is A^2 tau / N."""
    tau, amp, level = 2e-6, 3e11, 1e-22
    dt = 1e-9
    t = np.arange(200_000) * dt
    de = optimal_filter_resolution(amp * np.exp(-t / tau), dt, NoiseSpectrum.white(math.sqrt(level)))
    assert de == pytest.approx(FWHM_PER_SIGMA * math.sqrt(level / (amp**2 * tau)), rel=1e-3)


@given(st.floats(0.01, 100.0))
def test_resolution_scales_with_sqrt_psd(factor):
    pulse = np.exp(-np.arange(512) / 50.0)
    n = NoiseSpectrum.white(1e-11)
    assert optimal_filter_resolution(pulse, 1e-8, n.scaled(factor)) == pytest.approx(
        math.sqrt(factor) * optimal_filter_resolution(pulse, 1e-8, n), rel=1e-12)


def test_quarter_psd_halves_resolution():
    pulse = np.exp(-np.arange(512) / 50.0)
    n = NoiseSpectrum.white(1e-11)
    assert optimal_filter_resolution(pulse, 1e-8, n.scaled(0.25)) == pytest.approx(
        0.5 * optimal_filter_resolution(pulse, 1e-8, n))


def test_zero_pulse_rejected():
    with pytest.raises(DataError):
        optimal_filter_resolution(np.zeros(64), 1e-8, NoiseSpectrum.white(1e-11))


def test_noise_spectrum_validation():
    with pytest.raises(DomainError):
        NoiseSpectrum([0.0, 1.0], [1.0, -1.0])
    with pytest.raises(DomainError):
        NoiseSpectrum([1.0, 0.0], [1.0, 1.0])


def test_colored_noise_matches_psd(rng):
    f = np.array([0.0, 1e5, 1e6, 5e7])
    psd = np.array([4e-22, 4e-22, 1e-22, 1e-22])
    spec = NoiseSpectrum(f, psd)
    dt = 1e-8
    x = colored_noise(spec, 4096, dt, rng, size=200)
    fw, pw = welch(x, fs=1 / dt, nperseg=1024, axis=-1)
    est = pw.mean(axis=0)
    sel = (fw > 2e5) & (fw < 4e7)
    np.testing.assert_allclose(est[sel], spec.psd_at(fw[sel]), rtol=0.15)


def test_colored_noise_is_seeded():
    spec = NoiseSpectrum.white(1e-11)
    a = colored_noise(spec, 128, 1e-8, np.random.default_rng(1))
    b = colored_noise(spec, 128, 1e-8, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)


def test_impact_weights():
    pos, w = impact_weights(DESIGN, 5, 32.6)
    assert w.sum() == pytest.approx(1.0)
    assert np.all(w > 0) and pos[0] == 0.0
    pos0, w0 = impact_weights(DESIGN, 5, 0.0)
    assert w0[0] == pytest.approx(10 / 210)
    np.testing.assert_allclose(w0[1:], 40 / 210)


def test_resolution_grows_with_tail_length():
    res = [energy_resolution(DESIGN.with_tail_length(t * 1e-6), n_positions=2, **FAST) for t in (25, 50, 100)]
    assert res[0] < res[1] < res[2]
    assert res[2] < 0.3 * E_PH
