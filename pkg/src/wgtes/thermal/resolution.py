"""Position-averaged pulse and energy resolution of an extended-absorber TES."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .._validation import check_nonnegative
from ..errors import DataError, DomainError
from .design import DetectorDesign
from .model import (
    DEFAULT_DT_SAMPLE,
    DEFAULT_DURATION,
    DEFAULT_DX,
    PulseTrace,
    run_pulse,
)
from .noise import NoiseSpectrum, optimal_filter_resolution

DEFAULT_ALPHA_PER_CM = 32.6
DEFAULT_NOISE = NoiseSpectrum.white(10e-12)


def pulse_scan(design, positions, *, threads=1, **kwargs):
    """Simulate pulses for several impact points; order of ``positions`` is kept."""
    if threads <= 1:
        return [run_pulse(design, x, **kwargs).trace for x in positions]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda x: run_pulse(design, x, **kwargs).trace, positions))


def impact_weights(design: DetectorDesign, n_positions, alpha_per_cm=DEFAULT_ALPHA_PER_CM):
    """Impact points on one tail and their absorption probabilities.

    Light enters at the far end of one tail, crosses the TES and leaves through the
    other tail, with absorption density alpha exp(-alpha z). Each tail is split into
    ``n_positions`` equal bins; because the device is mirror symmetric, the bins at +x
    and -x share one impact point. Returns (positions [m] with 0 = TES, weights
    normalised to one).
    """
    alpha = check_nonnegative(alpha_per_cm, "alpha_per_cm") * 100.0
    if n_positions < 1:
        raise DomainError("n_positions must be at least 1")
    tail, side = design.tail_length, design.tes_side
    edges = np.linspace(0.0, tail, n_positions + 1)

    def absorbed(z0, z1):
        if alpha == 0.0:
            return z1 - z0
        return np.exp(-alpha * z0) - np.exp(-alpha * z1)

    # z is measured along the propagation direction from the entry tail end
    entry = absorbed(tail - edges[1:], tail - edges[:-1])
    exit_ = absorbed(tail + side + edges[:-1], tail + side + edges[1:])
    w_tes = absorbed(tail, tail + side)
    positions = np.concatenate([[0.0], 0.5 * (edges[1:] + edges[:-1])])
    weights = np.concatenate([[w_tes], entry + exit_])
    return positions, weights / weights.sum()


def averaged_pulse(design: DetectorDesign, *, n_positions=5, alpha_per_cm=DEFAULT_ALPHA_PER_CM,
                   duration=DEFAULT_DURATION, dt_sample=DEFAULT_DT_SAMPLE, dx=DEFAULT_DX,
                   threads=1) -> PulseTrace:
    """Absorption-weighted mean of unit-energy pulses (A/J)."""
    positions, weights = impact_weights(design, n_positions, alpha_per_cm)
    # snap bin centres to grid nodes so every impact lands on a node
    positions = np.round(positions / dx) * dx
    traces = pulse_scan(design, positions, threads=threads, duration=duration,
                        dt_sample=dt_sample, dx=dx)
    samples = sum(w * tr.samples / tr.energy for w, tr in zip(weights, traces))
    return PulseTrace(dt=dt_sample, samples=samples, x_impact=float("nan"), energy=1.0)


def energy_resolution(design: DetectorDesign, noise: NoiseSpectrum | None = None, **kwargs):
    """Optimal-filter FWHM energy resolution [J] of the position-averaged pulse.

    Keyword arguments go to :func:`averaged_pulse`.
    """
    noise = DEFAULT_NOISE if noise is None else noise
    pulse = averaged_pulse(design, **kwargs)
    if not np.any(pulse.samples):
        raise DataError("simulated pulse is identically zero")
    return optimal_filter_resolution(pulse.samples, pulse.dt, noise)
