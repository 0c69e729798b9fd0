"""Heat flow in the extended absorber, TES electrothermal response and energy resolution."""
from .design import BiasCircuit, DetectorDesign, default_design
from .model import (
    PulseRun,
    PulseTrace,
    ThermalState,
    build_network,
    cell_index,
    ep_power,
    equilibrium_state,
    inject_photon,
    operating_point,
    run_pulse,
    simulate_pulse,
    step_heat_equation,
    stored_energy,
    tes_rates,
    tes_step,
    uniform_state,
    wf_heat_flow,
)
from .noise import NoiseSpectrum, colored_noise, filter_information, optimal_filter_resolution
from .resolution import averaged_pulse, energy_resolution, impact_weights, pulse_scan
