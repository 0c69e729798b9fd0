"""Current-noise spectra and optimal-filter energy resolution."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .._validation import check_increasing, check_positive
from ..errors import DataError, DomainError

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class NoiseSpectrum:
    """One-sided current-noise PSD [A^2/Hz] tabulated on increasing frequencies [Hz].

    Between table points the PSD is interpolated linearly; outside it is held at the
    end values.
    """

    frequencies: np.ndarray
    psd: np.ndarray

    def __post_init__(self):
        f = check_increasing(self.frequencies, "frequencies")
        p = np.asarray(self.psd, dtype=float)
        if p.shape != f.shape:
            raise DomainError("psd and frequencies must have the same length")
        if not np.all(np.isfinite(p)) or np.any(p <= 0):
            raise DomainError("psd must be positive everywhere")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "psd", p)

    @classmethod
    def white(cls, current_density=10e-12, f_max=1e10):
        """Flat spectrum with amplitude ``current_density`` [A/sqrt(Hz)]."""
        level = check_positive(current_density, "current_density") ** 2
        return cls(np.array([0.0, f_max]), np.array([level, level]))

    def psd_at(self, f):
        return np.interp(np.abs(f), self.frequencies, self.psd)

    def scaled(self, factor):
        return NoiseSpectrum(self.frequencies, self.psd * check_positive(factor, "factor"))


def _one_sided_weights(n):
    w = np.ones(n // 2 + 1)
    w[0] = 0.5
    if n % 2 == 0:
        w[-1] = 0.5
    return w


def filter_information(pulse, dt, noise: NoiseSpectrum):
    """Integral of 4 |s(f)|^2 / S(f) df over the one-sided band of the record.

    ``pulse`` is the response to unit energy (A/J); the continuous transform is
    approximated by dt * DFT.
    """
    pulse = np.asarray(pulse, dtype=float)
    dt = check_positive(dt, "dt")
    n = pulse.size
    spec = dt * np.fft.rfft(pulse)
    freqs = np.fft.rfftfreq(n, dt)
    df = 1.0 / (n * dt)
    return float(np.sum(_one_sided_weights(n) * 4.0 * np.abs(spec) ** 2 / noise.psd_at(freqs)) * df)


def optimal_filter_resolution(pulse, dt, noise: NoiseSpectrum):
    """Optimal-filter energy resolution (FWHM, in the inverse units of ``pulse``)."""
    info = filter_information(pulse, dt, noise)
    if not info > 0:
        raise DataError("pulse is identically zero; resolution is undefined")
    return FWHM_PER_SIGMA / math.sqrt(info)


def colored_noise(noise: NoiseSpectrum, n_samples, dt, rng, size=()):
    """Gaussian noise records whose one-sided PSD matches ``noise`` in expectation.

    Spectral synthesis: independent complex normal bins scaled by sqrt(N S / (2 dt)),
    with real DC and Nyquist bins so the inverse real FFT is Hermitian-consistent.
    """
    n_bins = n_samples // 2 + 1
    freqs = np.fft.rfftfreq(n_samples, dt)
    amp = np.sqrt(n_samples * noise.psd_at(freqs) / (2.0 * dt))
    shape = tuple(np.atleast_1d(size)) + (n_bins,) if size != () else (n_bins,)
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    bins = (re + 1j * im) / math.sqrt(2.0)
    bins[..., 0] = re[..., 0]
    if n_samples % 2 == 0:
        bins[..., -1] = re[..., -1]
    return np.fft.irfft(bins * amp, n=n_samples, axis=-1)
