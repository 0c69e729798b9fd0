"""Coherent-pulse photon counting through a detector array.

Each laser pulse carries a Poisson number of photons. Every photon independently
couples into the chip, and is then absorbed by one detector, escapes through a facet,
or is lost in the guide. Detector traces are the photon number times a one-photon
template plus Gaussian noise of a given PSD, and photon numbers are read back with
an optimal filter.
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_nonnegative, check_positive
from .errors import DataError, DomainError
from .optics import ChipLayout, DIRECTIONS, _single_pass
from .thermal.model import PulseTrace
from .thermal.noise import NoiseSpectrum, colored_noise

BLOCK_SIZE = 1024
BINARY_MAGIC = b"TESD"
BINARY_VERSION = 1
# "<" little endian: magic, version, detectors, traces, dt, samples
_HEADER = struct.Struct("<4sIIIdI")

# stream tags keep the count and noise generators of one block independent
_STREAM_COUNTS = 0
_STREAM_NOISE = 1


def block_rng(seed, stream, block):
    """Philox generator keyed by (seed, stream, block).

    The key does not depend on how many blocks run before it, so blocks can be
    processed in any order or in parallel with identical results.
    """
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise DomainError("seed must be in [0, 2**64)")
    key = seed | (int(stream) << 96) | (int(block) << 64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SourceConfig:
    mean_photons: float = 1.0
    repetition: int = 8192
    wavelength: float = 1550.0  # nm
    seed: int = 0

    def __post_init__(self):
        check_nonnegative(self.mean_photons, "mean_photons")
        if int(self.repetition) != self.repetition or self.repetition < 1:
            raise DomainError("repetition must be a positive integer")
        check_positive(self.wavelength, "wavelength")


@dataclass(frozen=True)
class Routing:
    """Per-photon outcome probabilities for one launch.

    ``detectors`` are in physical order (detector 1 nearest facet A) and include the
    chip coupling; ``escaped`` covers light leaving either facet after entering.
    """

    detectors: np.ndarray
    uncoupled: float
    escaped: float
    lost: float

    @property
    def pvals(self):
        return np.concatenate([self.detectors, [self.escaped, self.lost, self.uncoupled]])


def routing_probabilities(chip: ChipLayout, direction="A->B", polarization="TM") -> Routing:
    """Where a photon arriving at the input fibre ends up.

    A chip that ends in a grating (in the travel direction) sends the reflected
    fraction back through the array.
    """
    if direction not in DIRECTIONS:
        raise DomainError(f"direction must be one of {DIRECTIONS}")
    oriented = chip.oriented(direction)
    eta_in = float(chip.coupling.get("A" if direction == "A->B" else "B", 1.0))
    loss = chip.loss_db_per_cm(polarization)
    segs = oriented.segments
    r_end = segs[-1].reflectivity if segs[-1].kind == "grating" else 0.0
    body = segs[:-1] if r_end > 0 else segs
    det, power, prop, iface, refl = _single_pass(body, polarization, loss)
    det = np.array(det, dtype=float)
    escaped = refl + power * (1.0 - r_end)
    lost = prop + iface
    if r_end > 0:
        back = power * r_end
        det_b, out_b, prop_b, iface_b, refl_b = _single_pass(body[::-1], polarization, loss)
        det = det + back * np.array(det_b[::-1])
        escaped += back * (out_b + refl_b)
        lost += back * (prop_b + iface_b)
    if direction == "B->A":
        det = det[::-1]
    return Routing(det * eta_in, 1.0 - eta_in, escaped * eta_in, lost * eta_in)


@dataclass(frozen=True)
class DetectedCounts:
    """Per-pulse photon numbers: ``counts`` has shape (pulses, detectors)."""

    counts: np.ndarray
    incident: np.ndarray
    escaped: np.ndarray
    lost: np.ndarray
    uncoupled: np.ndarray
    seed: int = 0

    @property
    def n_pulses(self):
        return self.counts.shape[0]

    @property
    def n_detectors(self):
        return self.counts.shape[1]


def sample_detected_counts(source: SourceConfig, chip: ChipLayout, direction="A->B",
                           polarization="TM", *, block_size=BLOCK_SIZE) -> DetectedCounts:
    """Draw Poisson photon numbers per pulse and route each photon multinomially."""
    routing = routing_probabilities(chip, direction, polarization)
    pvals = np.clip(routing.pvals, 0.0, None)
    pvals = pvals / pvals.sum()
    n_det = routing.detectors.size
    total = int(source.repetition)
    outcomes = np.empty((total, pvals.size), dtype=np.int64)
    incident = np.empty(total, dtype=np.int64)
    for b, start in enumerate(range(0, total, block_size)):
        stop = min(start + block_size, total)
        rng = block_rng(source.seed, _STREAM_COUNTS, b)
        n = rng.poisson(source.mean_photons, size=stop - start)
        incident[start:stop] = n
        outcomes[start:stop] = rng.multinomial(n, pvals)
    return DetectedCounts(outcomes[:, :n_det].copy(), incident, outcomes[:, n_det].copy(),
                          outcomes[:, n_det + 1].copy(), outcomes[:, n_det + 2].copy(),
                          seed=int(source.seed))


def expected_counts(source: SourceConfig, chip: ChipLayout, direction="A->B", polarization="TM"):
    """Mean detected photons per pulse at each detector."""
    return source.mean_photons * routing_probabilities(chip, direction, polarization).detectors


def soft_saturation(traces, i_sat):
    """Optional compressive response i_sat * tanh(x / i_sat), off unless requested."""
    i_sat = check_positive(i_sat, "i_sat")
    return i_sat * np.tanh(traces / i_sat)


@dataclass(frozen=True)
class TraceEnsemble:
    """Traces of shape (detectors, pulses, samples) aligned to the laser trigger."""

    traces: np.ndarray
    dt: float
    seed: int = 0
    config_hash: str = ""
    true_counts: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        tr = np.asarray(self.traces)
        if tr.ndim != 3:
            raise DataError("traces must have shape (detectors, pulses, samples)")
        check_positive(self.dt, "dt")
        object.__setattr__(self, "traces", tr)

    @property
    def n_detectors(self):
        return self.traces.shape[0]

    @property
    def n_traces(self):
        return self.traces.shape[1]

    @property
    def n_samples(self):
        return self.traces.shape[2]

    def to_binary(self, path=None):
        """Header then float32 little-endian samples in (detector, trace, sample) order."""
        head = _HEADER.pack(BINARY_MAGIC, BINARY_VERSION, self.n_detectors, self.n_traces,
                            float(self.dt), self.n_samples)
        payload = head + np.ascontiguousarray(self.traces, dtype="<f4").tobytes()
        if path is not None:
            Path(path).write_bytes(payload)
        return payload

    @classmethod
    def from_binary(cls, source):
        raw = Path(source).read_bytes() if isinstance(source, (str, Path)) else bytes(source)
        if len(raw) < _HEADER.size:
            raise DataError("file too short for a trace header")
        magic, version, n_det, n_tr, dt, n_s = _HEADER.unpack_from(raw)
        if magic != BINARY_MAGIC:
            raise DataError("not a trace file (bad magic bytes)")
        if version != BINARY_VERSION:
            raise DataError(f"unsupported trace file version {version}")
        body = raw[_HEADER.size:]
        if len(body) != 4 * n_det * n_tr * n_s:
            raise DataError("trace file length does not match its header")
        data = np.frombuffer(body, dtype="<f4").reshape(n_det, n_tr, n_s)
        return cls(data.astype(np.float32), dt)

    def to_csv(self, path=None, header=()):
        """One row per trace: detector, trace index, then the samples."""
        buf = io.StringIO()
        for line in header:
            buf.write(f"# {line}\n")
        buf.write(f"# dt_s={self.dt!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["detector", "trace"] + [f"s{i}" for i in range(self.n_samples)])
        for d in range(self.n_detectors):
            for t in range(self.n_traces):
                w.writerow([d + 1, t] + [repr(float(v)) for v in self.traces[d, t]])
        if path is not None:
            Path(path).write_text(buf.getvalue())
        return buf.getvalue()


def synthesize_traces(counts, template: PulseTrace, noise: NoiseSpectrum | None, seed=0, *,
                      block_size=BLOCK_SIZE, i_sat=None, config_hash="") -> TraceEnsemble:
    """n times the one-photon template plus coloured noise, per pulse and detector.

    ``counts`` is a :class:`DetectedCounts` or an integer array (pulses, detectors).
    ``noise=None`` gives noiseless traces.
    """
    c = counts.counts if isinstance(counts, DetectedCounts) else np.asarray(counts)
    if c.ndim != 2:
        raise DataError("counts must have shape (pulses, detectors)")
    shape = np.asarray(template.samples, dtype=float)
    n_pulses, n_det = c.shape
    out = np.empty((n_det, n_pulses, shape.size), dtype=np.float32)
    for b, start in enumerate(range(0, n_pulses, block_size)):
        stop = min(start + block_size, n_pulses)
        block = c[start:stop].T[:, :, None] * shape
        if noise is not None:
            rng = block_rng(seed, _STREAM_NOISE, b)
            block = block + colored_noise(noise, shape.size, template.dt, rng, size=(n_det, stop - start))
        if i_sat is not None:
            block = soft_saturation(block, i_sat)
        out[:, start:stop] = block
    return TraceEnsemble(out, template.dt, seed=int(seed), config_hash=config_hash, true_counts=c.copy())


@dataclass(frozen=True)
class CountHistogram:
    """Occurrences of each photon number per detector."""

    histograms: tuple  # one {n: occurrences} dict per detector
    assigned: np.ndarray | None = field(default=None, compare=False)

    @classmethod
    def from_counts(cls, counts):
        """Histogram of an integer (pulses, detectors) array."""
        c = np.asarray(counts)
        hists = []
        for d in range(c.shape[1]):
            vals, occ = np.unique(c[:, d], return_counts=True)
            hists.append({int(v): int(o) for v, o in zip(vals, occ)})
        return cls(tuple(hists), c)

    @property
    def means(self):
        return np.array([sum(n * o for n, o in h.items()) / sum(h.values()) for h in self.histograms])

    @property
    def n_pulses(self):
        return sum(self.histograms[0].values())

    def to_dict(self):
        return {
            "detectors": [
                {"detector": d + 1, "counts": {str(n): o for n, o in sorted(h.items())},
                 "mean": float(m)}
                for d, (h, m) in enumerate(zip(self.histograms, self.means))
            ],
            "n_pulses": self.n_pulses,
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def _optimal_filter(template, dt, noise):
    """Frequency-domain weights for the amplitude estimate and their normalisation."""
    n = template.size
    spec = np.fft.rfft(template)
    psd = noise.psd_at(np.fft.rfftfreq(n, dt)) if noise is not None else np.ones(spec.size)
    w = np.ones(spec.size)
    w[0] = 0.5
    if n % 2 == 0:
        w[-1] = 0.5
    kernel = w * np.conj(spec) / psd
    norm = float(np.real(np.sum(kernel * spec)))
    if not norm > 0:
        raise DataError("template is identically zero")
    return kernel, norm


def filter_amplitudes(traces, template, dt, noise=None):
    """Optimal-filter amplitude of each trace in units of the template."""
    traces = np.asarray(traces, dtype=float)
    template = np.asarray(template, dtype=float)
    if traces.shape[-1] != template.size:
        raise DataError("traces and template differ in length")
    kernel, norm = _optimal_filter(template, dt, noise)
    return np.real(np.fft.rfft(traces, axis=-1) @ kernel) / norm


def discriminate_photon_number(ensemble: TraceEnsemble, template: PulseTrace,
                               noise: NoiseSpectrum | None = None, *, rtol=1e-9) -> CountHistogram:
    """Assign each trace the nearest integer photon number and histogram the result."""
    if abs(ensemble.dt - template.dt) > rtol * template.dt:
        raise DataError(f"ensemble dt {ensemble.dt} differs from template dt {template.dt}")
    assigned = np.empty((ensemble.n_traces, ensemble.n_detectors), dtype=np.int64)
    for d in range(ensemble.n_detectors):
        for start in range(0, ensemble.n_traces, BLOCK_SIZE):
            amp = filter_amplitudes(ensemble.traces[d, start:start + BLOCK_SIZE], template.samples,
                                    template.dt, noise)
            assigned[start:start + BLOCK_SIZE, d] = np.clip(np.rint(amp), 0, None).astype(np.int64)
    return CountHistogram.from_counts(assigned)


def misassignment_rate(histogram: CountHistogram, true_counts):
    """Fraction of (pulse, detector) entries whose photon number was read wrongly."""
    if histogram.assigned is None:
        raise DataError("histogram does not carry per-pulse assignments")
    return float(np.mean(histogram.assigned != np.asarray(true_counts)))


class PhotonNumberDiscriminator(BaseEstimator):
    """Estimator form of the optimal-filter photon-number readout.

    ``fit`` stores the filter for ``template`` (one-photon response) and ``noise``;
    ``transform`` returns amplitudes and ``predict`` integer photon numbers for an
    array of traces (n_traces, n_samples).
    """

    def __init__(self, template=None, dt=1e-9, noise=None):
        self.template = template
        self.dt = dt
        self.noise = noise

    def fit(self, X=None, y=None):
        if self.template is None:
            raise DataError("a one-photon template is required")
        tmpl = np.asarray(self.template.samples if isinstance(self.template, PulseTrace)
                          else self.template, dtype=float)
        self.template_ = tmpl
        self.kernel_, self.norm_ = _optimal_filter(tmpl, self.dt, self.noise)
        return self

    def transform(self, X):
        if not hasattr(self, "kernel_"):
            raise AttributeError("PhotonNumberDiscriminator is not fitted yet; call fit first")
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.template_.size:
            raise DataError("traces and template differ in length")
        return np.real(np.fft.rfft(X, axis=-1) @ self.kernel_) / self.norm_

    def predict(self, X):
        return np.clip(np.rint(self.transform(X)), 0, None).astype(np.int64)
