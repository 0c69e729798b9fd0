"""Ratiometric waveguide loss analysis from weak Bragg gratings.

Each weak grating reflects a small fraction of the guided light. Its peak reflection
seen from facet A (R') and from facet B (R'') carries the round-trip transmission to
that point from either side. The ratio cancels the grating strength and both facet
couplings, leaving the along-guide power profile up to a constant.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit
from sklearn.base import BaseEstimator

from ._validation import is_existing_file, check_array_1d, check_increasing, check_nonnegative
from .errors import ConvergenceError, DataError, DomainError
from .thermal.noise import FWHM_PER_SIGMA

# 10 log10 of the one-way power ratio is a quarter of 10 log10(R'/R'') because both
# reflections are round trips and the ratio doubles the distance dependence
PROFILE_DB_FACTOR = 2.5


@dataclass(frozen=True)
class GratingRecord:
    """Peak reflected powers of one grating from both launch directions."""

    position: float  # cm along the guide from facet A
    r_forward: float
    r_reverse: float
    center_wavelength: float = float("nan")  # nm

    def __post_init__(self):
        if not (self.r_forward > 0 and self.r_reverse > 0):
            raise DataError(f"grating at {self.position} cm has non-positive reflected power")
        if not math.isfinite(self.position):
            raise DataError("grating position must be finite")


@dataclass(frozen=True)
class ReflectionSpectrum:
    wavelengths: np.ndarray  # nm
    power: np.ndarray

    def __post_init__(self):
        wl = check_increasing(self.wavelengths, "wavelengths")
        p = check_array_1d(self.power, "power")
        if p.shape != wl.shape:
            raise DataError("wavelengths and power differ in length")
        if np.any(p < 0):
            raise DataError("reflected power must be non-negative")
        object.__setattr__(self, "wavelengths", wl)
        object.__setattr__(self, "power", p)

    @classmethod
    def gaussian(cls, wavelengths, peak_power, center, bandwidth_3db, background=0.0):
        """Noiseless Gaussian-plus-background spectrum."""
        wl = np.asarray(wavelengths, dtype=float)
        sigma = bandwidth_3db / FWHM_PER_SIGMA
        return cls(wl, background + peak_power * np.exp(-0.5 * ((wl - center) / sigma) ** 2))


@dataclass(frozen=True)
class BraggPeak:
    peak_power: float  # height above the background
    center_wavelength: float
    bandwidth_3db: float
    background: float


def _gauss(x, amp, mu, sigma, bg):
    return bg + amp * np.exp(-0.5 * ((x - mu) / sigma) ** 2)


def fit_bragg_peak(spectrum: ReflectionSpectrum, *, window_sigmas=3.0) -> BraggPeak:
    """Fit a Gaussian on a constant background to the dominant reflection peak.

    The fit is repeated on a window of +-``window_sigmas`` standard deviations around
    the first estimate so that apodisation sidelobes further out do not bias it.
    """
    wl, p = spectrum.wavelengths, spectrum.power
    if wl.size < 5:
        raise DataError("spectrum needs at least five points")
    i_max = int(np.argmax(p))
    bg0 = float(np.median(p))
    amp0 = float(p[i_max] - bg0)
    above = np.nonzero(p - bg0 >= 0.5 * amp0)[0] if amp0 > 0 else np.array([i_max])
    fwhm0 = max(wl[above[-1]] - wl[above[0]], 2.0 * (wl[1] - wl[0]))
    sigma0 = fwhm0 / FWHM_PER_SIGMA

    outside = np.abs(wl - wl[i_max]) > window_sigmas * sigma0
    bg_pts = p[outside] if np.count_nonzero(outside) >= 3 else p
    bg_rms = float(np.sqrt(np.mean((bg_pts - np.median(bg_pts)) ** 2)))
    height = float(p[i_max] - np.median(bg_pts))
    if not height > 3.0 * bg_rms or not height > 0:
        raise DataError("no reflection peak above three times the background RMS")

    p0 = [height, wl[i_max], sigma0, float(np.median(bg_pts))]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OptimizeWarning)
            popt, _ = curve_fit(_gauss, wl, p, p0=p0, maxfev=20000)
            win = np.abs(wl - popt[1]) <= window_sigmas * abs(popt[2])
            if np.count_nonzero(win) >= 5:
                popt, _ = curve_fit(_gauss, wl[win], p[win], p0=popt, maxfev=20000)
    except RuntimeError as exc:
        raise ConvergenceError(f"Bragg peak fit did not converge: {exc}", best=p0) from exc
    amp, mu, sigma, bg = popt
    # noise fits either as a one-sample spike or as a bump wider than the scan
    resid_rms = float(np.sqrt(np.mean((p - _gauss(wl, *popt)) ** 2)))
    resolved = 1.5 * np.min(np.diff(wl)) < abs(sigma) and FWHM_PER_SIGMA * abs(sigma) < 0.5 * (wl[-1] - wl[0])
    if not amp > 3.0 * resid_rms or not resolved or not wl[0] <= mu <= wl[-1]:
        raise DataError("no resolved reflection peak above three times the background RMS")
    return BraggPeak(float(amp), float(mu), float(FWHM_PER_SIGMA * abs(sigma)), float(bg))


def records_from_spectra(positions, forward_spectra, reverse_spectra):
    """Grating records from per-grating reflection spectra of both launches."""
    if not (len(positions) == len(forward_spectra) == len(reverse_spectra)):
        raise DataError("positions and spectra must have equal length")
    out = []
    for x, sf, sr in zip(positions, forward_spectra, reverse_spectra):
        pf, pr = fit_bragg_peak(sf), fit_bragg_peak(sr)
        out.append(GratingRecord(float(x), pf.peak_power, pr.peak_power,
                                 0.5 * (pf.center_wavelength + pr.center_wavelength)))
    return out


@dataclass(frozen=True)
class PowerProfile:
    """Relative one-way power [dB] at each grating, zero at the first grating."""

    positions: np.ndarray
    power_db: np.ndarray

    def to_csv(self, path=None, header=()):
        buf = io.StringIO()
        for line in header:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["position_cm", "relative_power_db"])
        for x, v in zip(self.positions, self.power_db):
            w.writerow([repr(float(x)), repr(float(v))])
        if path is not None:
            Path(path).write_text(buf.getvalue())
        return buf.getvalue()


def relative_power_profile(records) -> PowerProfile:
    """2.5 log10(R'/R'') at each grating, referenced to the first grating.

    The quarter-dB ratio makes the slope equal to the one-way loss in dB/cm.
    """
    records = list(records)
    if len(records) < 2:
        raise DataError("at least two gratings are needed for a profile")
    x = np.array([r.position for r in records], dtype=float)
    if np.any(np.diff(x) <= 0):
        raise DataError("grating positions must be strictly increasing")
    ratio = np.array([r.r_forward / r.r_reverse for r in records], dtype=float)
    db = PROFILE_DB_FACTOR * np.log10(ratio)
    return PowerProfile(x, db - db[0])


def _segment_ids(positions, windows):
    """Label points by the stretch of bare waveguide they sit on; -1 inside a window."""
    windows = sorted((float(a), float(b)) for a, b in windows)
    for a, b in windows:
        if not b > a:
            raise DomainError(f"detector window ({a}, {b}) must have positive length")
    ids = np.empty(positions.size, dtype=int)
    for i, x in enumerate(positions):
        if any(a <= x <= b for a, b in windows):
            ids[i] = -1
        else:
            ids[i] = sum(1 for a, b in windows if x > b)
    return ids


@dataclass(frozen=True)
class LossFit:
    loss_db_per_cm: float
    uncertainty: float
    intercepts: dict = field(default_factory=dict)


def fit_waveguide_loss(profile: PowerProfile, exclude_windows=(), sigma=None) -> LossFit:
    """Common-slope regression of the profile over bare-waveguide stretches.

    Points on either side of an excluded detector window get separate intercepts, so
    the detector steps do not leak into the slope. The returned loss is minus the
    slope in dB/cm; the uncertainty is the standard error from the residual scatter
    (or from ``sigma`` [dB] when provided).
    """
    x = np.asarray(profile.positions, dtype=float)
    y = np.asarray(profile.power_db, dtype=float)
    ids = _segment_ids(x, exclude_windows)
    keep = ids >= 0
    if sigma is None:
        w = np.ones_like(y)
    else:
        sig = np.broadcast_to(np.asarray(sigma, dtype=float), y.shape)
        if np.any(sig <= 0):
            raise DomainError("sigma must be positive")
        w = 1.0 / sig
    x, y, ids, w = x[keep], y[keep], ids[keep], w[keep]
    segs = np.unique(ids)
    counts = np.array([np.count_nonzero(ids == s) for s in segs])
    if x.size < 2 or not np.any(counts >= 2):
        raise DataError("need at least two profile points on one bare-waveguide stretch")
    design = np.column_stack([x] + [(ids == s).astype(float) for s in segs])
    coef, *_ = np.linalg.lstsq(design * w[:, None], y * w, rcond=None)
    resid = (y - design @ coef) * w
    dof = y.size - design.shape[1]
    cov = np.linalg.pinv((design * w[:, None]).T @ (design * w[:, None]))
    if sigma is None:
        cov = cov * (resid @ resid / dof if dof > 0 else 0.0)
    slope_err = float(math.sqrt(max(cov[0, 0], 0.0)))
    return LossFit(float(-coef[0]), slope_err, {int(s): float(c) for s, c in zip(segs, coef[1:])})


@dataclass(frozen=True)
class DetectorLoss:
    absorption: float
    uncertainty: float
    step_db: float
    flagged: bool = False


def detector_absorption(profile: PowerProfile, detector_spans, waveguide_loss, *,
                        loss_uncertainty=0.0, gain_tolerance_db=0.05):
    """Fraction of the guided power removed by each detector.

    The drop between the gratings bracketing a detector, minus the waveguide loss
    over the same distance, is the detector's insertion step in dB.
    Negative steps are clamped to zero; if they exceed ``gain_tolerance_db`` the
    entry is flagged and a warning issued.
    """
    x = np.asarray(profile.positions, dtype=float)
    y = np.asarray(profile.power_db, dtype=float)
    check_nonnegative(gain_tolerance_db, "gain_tolerance_db")
    out = []
    for a, b in detector_spans:
        before = np.nonzero(x <= a)[0]
        after = np.nonzero(x >= b)[0]
        if before.size == 0 or after.size == 0:
            raise DataError(f"detector span ({a}, {b}) cm is not bracketed by gratings")
        i, j = before[-1], after[0]
        distance = x[j] - x[i]
        step = (y[i] - y[j]) - waveguide_loss * distance
        step_err = abs(loss_uncertainty) * distance
        flagged = False
        if step < 0:
            if step < -gain_tolerance_db:
                flagged = True
                warnings.warn(f"detector ({a}, {b}) cm shows a {-step:.3g} dB gain; clamped to zero",
                              RuntimeWarning, stacklevel=2)
            step = 0.0
        absorption = 1.0 - 10.0 ** (-step / 10.0)
        err = math.log(10.0) / 10.0 * 10.0 ** (-step / 10.0) * step_err
        out.append(DetectorLoss(float(absorption), float(err), float(step), flagged))
    return out


@dataclass(frozen=True)
class LossReport:
    waveguide_loss: float
    waveguide_loss_uncertainty: float
    detectors: tuple
    profile: PowerProfile

    @property
    def absorptions(self):
        return np.array([d.absorption for d in self.detectors])

    def to_dict(self):
        return {
            "waveguide_loss_db_per_cm": self.waveguide_loss,
            "waveguide_loss_uncertainty_db_per_cm": self.waveguide_loss_uncertainty,
            "per_detector_absorption": [
                {"absorption": d.absorption, "uncertainty": d.uncertainty, "step_db": d.step_db,
                 "flagged": d.flagged} for d in self.detectors
            ],
            "profile": [[float(a), float(b)] for a, b in zip(self.profile.positions, self.profile.power_db)],
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def analyze_scan(records, detector_spans, *, gain_tolerance_db=0.05) -> LossReport:
    """Profile, loss slope and per-detector absorption in one pass."""
    profile = relative_power_profile(records)
    fit = fit_waveguide_loss(profile, detector_spans)
    dets = detector_absorption(profile, detector_spans, fit.loss_db_per_cm,
                               loss_uncertainty=fit.uncertainty, gain_tolerance_db=gain_tolerance_db)
    return LossReport(fit.loss_db_per_cm, fit.uncertainty, tuple(dets), profile)


def read_scan_csv(source):
    """Grating records from CSV with columns position_cm, r_forward, r_reverse."""
    text = Path(source).read_text() if is_existing_file(source) else str(source)
    reader = csv.DictReader(line for line in text.splitlines() if line and not line.startswith("#"))
    needed = ("position_cm", "r_forward", "r_reverse")
    if reader.fieldnames is None or any(c not in reader.fieldnames for c in needed):
        raise DataError(f"scan CSV needs columns {', '.join(needed)}")
    out = []
    for row in reader:
        try:
            out.append(GratingRecord(float(row["position_cm"]), float(row["r_forward"]),
                                     float(row["r_reverse"])))
        except (TypeError, ValueError) as exc:
            raise DataError(f"malformed scan row {row}") from exc
    return out


def write_scan_csv(records, path=None, header=()):
    buf = io.StringIO()
    for line in header:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["position_cm", "r_forward", "r_reverse"])
    for r in records:
        w.writerow([repr(float(r.position)), repr(float(r.r_forward)), repr(float(r.r_reverse))])
    if path is not None:
        Path(path).write_text(buf.getvalue())
    return buf.getvalue()


# Seven weak gratings with three detectors in the gaps, all in cm
EXAMPLE_GRATINGS = (0.20, 0.45, 0.70, 0.95, 1.20, 1.45, 1.70)
EXAMPLE_DETECTORS = ((0.565, 0.586), (1.065, 1.086), (1.565, 1.586))
EXAMPLE_CHIP_LENGTH = 2.0


def one_way_transmission(x0, x1, loss_db_per_cm, detector_spans, absorptions):
    """Power transmission from x0 to x1 (x0 <= x1) through waveguide and detectors."""
    t = 10.0 ** (-loss_db_per_cm * (x1 - x0) / 10.0)
    for (a, b), eta in zip(detector_spans, absorptions):
        if x0 <= a and b <= x1:
            t *= 1.0 - eta
    return t


def synthetic_scan(loss_db_per_cm, absorptions, *, grating_positions=EXAMPLE_GRATINGS,
                   detector_spans=EXAMPLE_DETECTORS, chip_length=EXAMPLE_CHIP_LENGTH,
                   coupling_a=0.3, coupling_b=0.3, reflectivity=1e-3):
    """Forward model of a scan: R' = C_A rho T(A->x)^2 and R'' = C_B rho T(x->B)^2.

    ``reflectivity`` may be a scalar or one value per grating.
    """
    rho = np.broadcast_to(np.asarray(reflectivity, dtype=float), (len(grating_positions),))
    if len(absorptions) != len(detector_spans):
        raise DomainError("one absorption per detector span is required")
    out = []
    for x, r in zip(grating_positions, rho):
        ta = one_way_transmission(0.0, x, loss_db_per_cm, detector_spans, absorptions)
        tb = one_way_transmission(x, chip_length, loss_db_per_cm, detector_spans, absorptions)
        out.append(GratingRecord(float(x), coupling_a * r * ta ** 2, coupling_b * r * tb ** 2))
    return out


class LossProfileAnalyzer(BaseEstimator):
    """Estimator wrapper around :func:`analyze_scan`.

    ``fit`` takes a list of :class:`GratingRecord`; ``transform`` returns the
    (position, relative dB) profile as an (n, 2) array.
    """

    def __init__(self, detector_spans=EXAMPLE_DETECTORS, gain_tolerance_db=0.05):
        self.detector_spans = detector_spans
        self.gain_tolerance_db = gain_tolerance_db

    def fit(self, X, y=None):
        report = analyze_scan(X, self.detector_spans, gain_tolerance_db=self.gain_tolerance_db)
        self.report_ = report
        self.loss_db_per_cm_ = report.waveguide_loss
        self.loss_uncertainty_ = report.waveguide_loss_uncertainty
        self.absorption_ = report.absorptions
        return self

    def transform(self, X):
        prof = relative_power_profile(X)
        return np.column_stack([prof.positions, prof.power_db])
