"""Evanescent absorption, propagation loss and serial multiplexing of waveguide detectors.

A chip is an ordered list of segments from facet A to facet B. Each polarization is
an independent scalar channel. Probabilities here exclude fibre-to-chip coupling.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._validation import is_existing_file, check_nonnegative, check_positive, check_probability
from .errors import ConfigError, DomainError

POLARIZATIONS = ("TM", "TE")
DIRECTIONS = ("A->B", "B->A")

# predicted absorption coefficients of the 2 x 100 um device [cm^-1]
DESIGN_ALPHA_PER_CM = {"TM": 32.6, "TE": 2.9}


def device_absorption(alpha_per_cm, length_um):
    """Beer-Lambert absorption 1 - exp(-alpha l) for alpha in cm^-1 and l in um."""
    alpha = check_nonnegative(alpha_per_cm, "alpha_per_cm")
    length = check_nonnegative(length_um, "length_um")
    return -math.expm1(-alpha * length * 1e-4)


def propagation_transmission(alpha_db_per_cm, length_cm):
    """Power transmission 10^(-alpha l / 10) of a guide with loss in dB/cm."""
    alpha = check_nonnegative(alpha_db_per_cm, "alpha_db_per_cm")
    length = check_nonnegative(length_cm, "length_cm")
    return 10.0 ** (-alpha * length / 10.0)


def db_per_cm_to_alpha(alpha_db_per_cm):
    """Convert dB/cm to the natural extinction coefficient [cm^-1]."""
    return alpha_db_per_cm * math.log(10.0) / 10.0


def alpha_to_db_per_cm(alpha_per_cm):
    return alpha_per_cm * 10.0 / math.log(10.0)


def design_sweep(alpha_per_cm, lengths_um):
    """Device absorption for each whole-device length (strictly ascending, um)."""
    lengths = np.asarray(lengths_um, dtype=float)
    if lengths.ndim != 1 or lengths.size == 0:
        raise DomainError("lengths_um must be a non-empty list")
    if np.any(lengths <= 0) or np.any(np.diff(lengths) <= 0):
        raise DomainError("lengths_um must be positive and strictly ascending")
    return np.array([device_absorption(alpha_per_cm, ell) for ell in lengths])


def write_sweep_csv(path, lengths_um, alpha_tm=DESIGN_ALPHA_PER_CM["TM"],
                    alpha_te=DESIGN_ALPHA_PER_CM["TE"], header_lines=()):
    tm = design_sweep(alpha_tm, lengths_um)
    te = design_sweep(alpha_te, lengths_um)
    with Path(path).open("w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["length_um", "eta_tm", "eta_te"])
        for ell, a, b in zip(lengths_um, tm, te):
            w.writerow([repr(float(ell)), repr(float(a)), repr(float(b))])
    return tm, te


@dataclass(frozen=True)
class Segment:
    """One piece of the chip.

    ``kind`` is "waveguide", "detector" or "grating". Detectors take either
    per-polarization absorption coefficients (``alpha_abs``, cm^-1, with ``length_um``)
    or per-polarization efficiencies (``efficiency``) directly. ``interface_loss`` is a
    fractional loss applied at each of the detector's two bare-guide interfaces.
    """

    kind: str
    length_um: float = 0.0
    alpha_abs: dict = field(default_factory=dict)
    efficiency: dict = field(default_factory=dict)
    reflectivity: float = 0.0
    interface_loss: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("waveguide", "detector", "grating"):
            raise DomainError(f"unknown segment kind {self.kind!r}")
        check_nonnegative(self.length_um, "length_um")
        if self.kind == "waveguide" and self.length_um <= 0:
            raise DomainError("waveguide segments need a positive length")
        check_probability(self.reflectivity, "reflectivity")
        check_probability(self.interface_loss, "interface_loss")
        for v in self.alpha_abs.values():
            check_nonnegative(v, "alpha_abs")
        for v in self.efficiency.values():
            check_probability(v, "efficiency")
        if self.kind == "detector" and not (self.alpha_abs or self.efficiency):
            raise DomainError("detector segments need alpha_abs or efficiency")

    def detector_efficiency(self, polarization):
        if polarization in self.efficiency:
            return float(self.efficiency[polarization])
        if polarization in self.alpha_abs:
            return device_absorption(self.alpha_abs[polarization], self.length_um)
        raise DomainError(f"segment {self.name or self.kind} has no data for {polarization}")

    def __hash__(self):
        return hash((self.kind, self.length_um, tuple(sorted(self.alpha_abs.items())),
                     tuple(sorted(self.efficiency.items())), self.reflectivity,
                     self.interface_loss, self.name))


@dataclass(frozen=True)
class ChipLayout:
    """Segments ordered from facet A to facet B plus waveguide loss per polarization.

    ``coupling`` holds the fibre-to-chip efficiencies at each facet; they only enter
    photon-counting simulations, never the on-chip probabilities.
    """

    segments: tuple
    propagation_db_per_cm: dict = field(default_factory=lambda: {"TM": 0.0, "TE": 0.0})
    coupling: dict = field(default_factory=lambda: {"A": 1.0, "B": 1.0})

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise DomainError("a chip needs at least one segment")
        for v in self.propagation_db_per_cm.values():
            check_nonnegative(v, "propagation_db_per_cm")
        for k, v in self.coupling.items():
            if k not in ("A", "B"):
                raise DomainError("coupling keys must be 'A' and 'B'")
            check_probability(v, f"coupling[{k}]")

    @property
    def n_detectors(self):
        return sum(1 for s in self.segments if s.kind == "detector")

    def reversed(self):
        return replace(self, segments=self.segments[::-1],
                       coupling={"A": self.coupling.get("B", 1.0), "B": self.coupling.get("A", 1.0)})

    def oriented(self, direction):
        if direction not in DIRECTIONS:
            raise DomainError(f"direction must be one of {DIRECTIONS}")
        return self if direction == "A->B" else self.reversed()

    def loss_db_per_cm(self, polarization):
        if polarization not in POLARIZATIONS:
            raise DomainError(f"polarization must be one of {POLARIZATIONS}")
        return float(self.propagation_db_per_cm.get(polarization, 0.0))

    def to_dict(self):
        segs = []
        for s in self.segments:
            d = {"kind": s.kind}
            if s.length_um:
                d["length_um"] = s.length_um
            if s.alpha_abs:
                d["alpha_abs"] = dict(s.alpha_abs)
            if s.efficiency:
                d["efficiency"] = dict(s.efficiency)
            if s.kind == "grating":
                d["reflectivity"] = s.reflectivity
            if s.interface_loss:
                d["interface_loss"] = s.interface_loss
            if s.name:
                d["name"] = s.name
            segs.append(d)
        return {"segments": segs, "propagation_db_per_cm": dict(self.propagation_db_per_cm),
                "coupling": dict(self.coupling)}

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict) or "segments" not in doc:
            raise ConfigError("chip layout must be an object with a 'segments' list")
        unknown = set(doc) - {"segments", "propagation_db_per_cm", "coupling"}
        if unknown:
            raise ConfigError(f"unknown chip layout keys: {sorted(unknown)}")
        seg_keys = {"kind", "length_um", "alpha_abs", "efficiency", "reflectivity",
                    "interface_loss", "name"}
        segs = []
        for entry in doc["segments"]:
            if not isinstance(entry, dict) or set(entry) - seg_keys:
                raise ConfigError(f"segment entries accept only {sorted(seg_keys)}")
            segs.append(Segment(**entry))
        kwargs = {"segments": tuple(segs)}
        if "propagation_db_per_cm" in doc:
            kwargs["propagation_db_per_cm"] = dict(doc["propagation_db_per_cm"])
        if "coupling" in doc:
            kwargs["coupling"] = dict(doc["coupling"])
        try:
            return cls(**kwargs)
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, source):
        if is_existing_file(source):
            return cls.from_dict(json.loads(Path(source).read_text()))
        return cls.from_dict(json.loads(source))


def serial_array(efficiencies, spacing_mm=0.0, *, lead_mm=None, loss_db_per_cm=0.0,
                 polarization="TM", grating_reflectivity=None, tail_mm=0.0):
    """Build a chip of detectors with uniform waveguide gaps between them.

    ``lead_mm`` adds waveguide before the first and after the last detector; a
    terminal grating is appended after ``tail_mm`` of guide when a reflectivity is given.
    """
    segs = []
    if lead_mm:
        segs.append(Segment("waveguide", length_um=lead_mm * 1e3))
    for k, eta in enumerate(efficiencies):
        if k and spacing_mm > 0:
            segs.append(Segment("waveguide", length_um=spacing_mm * 1e3))
        segs.append(Segment("detector", efficiency={polarization: float(eta)}, name=f"TES{k + 1}"))
    if lead_mm:
        segs.append(Segment("waveguide", length_um=lead_mm * 1e3))
    if grating_reflectivity is not None:
        if tail_mm > 0:
            segs.append(Segment("waveguide", length_um=tail_mm * 1e3))
        segs.append(Segment("grating", reflectivity=grating_reflectivity, name="terminal"))
    return ChipLayout(tuple(segs), propagation_db_per_cm={polarization: loss_db_per_cm})


@dataclass(frozen=True)
class EfficiencyReport:
    """Where a photon entering the chip ends up, for one direction and polarization.

    ``per_detector`` is in the order the light meets the detectors. ``combined_lossless``
    repeats the calculation with waveguide loss switched off.
    """

    direction: str
    polarization: str
    per_detector: tuple
    combined_single_pass: float
    transmission_to_far_facet: float
    propagation_lost: float
    interface_lost: float
    reflected: float
    combined_lossless: float
    combined_double_pass: float | None = None

    @property
    def total(self):
        return (self.combined_single_pass + self.transmission_to_far_facet
                + self.propagation_lost + self.interface_lost + self.reflected)


def _single_pass(segments, polarization, loss_db_per_cm):
    power = 1.0
    detected, prop_lost, iface_lost, reflected = [], 0.0, 0.0, 0.0
    for seg in segments:
        if seg.kind == "waveguide":
            t = propagation_transmission(loss_db_per_cm, seg.length_um * 1e-4)
            prop_lost += power * (1.0 - t)
            power *= t
        elif seg.kind == "grating":
            reflected += power * seg.reflectivity
            power *= 1.0 - seg.reflectivity
        else:
            iface_lost += power * seg.interface_loss
            power *= 1.0 - seg.interface_loss
            eta = seg.detector_efficiency(polarization)
            detected.append(power * eta)
            power *= 1.0 - eta
            iface_lost += power * seg.interface_loss
            power *= 1.0 - seg.interface_loss
    return detected, power, prop_lost, iface_lost, reflected


def array_efficiency(chip: ChipLayout, direction="A->B", polarization="TM") -> EfficiencyReport:
    """Per-detector detection probabilities and the fate of undetected light."""
    oriented = chip.oriented(direction)
    loss = chip.loss_db_per_cm(polarization)
    detected, power, prop, iface, refl = _single_pass(oriented.segments, polarization, loss)
    lossless = _single_pass(oriented.segments, polarization, 0.0)[0]
    report = EfficiencyReport(
        direction=direction,
        polarization=polarization,
        per_detector=tuple(detected),
        combined_single_pass=float(sum(detected)),
        transmission_to_far_facet=power,
        propagation_lost=prop,
        interface_lost=iface,
        reflected=refl,
        combined_lossless=float(sum(lossless)),
        combined_double_pass=(double_pass_efficiency(chip, None, direction, polarization)
                              if oriented.segments[-1].kind == "grating" else None),
    )
    if abs(report.total - 1.0) > 1e-12:
        raise AssertionError(f"probability leak in array_efficiency: {report.total!r}")
    return report


def double_pass_efficiency(chip: ChipLayout, grating_reflectivity=None, direction="A->B",
                           polarization="TM"):
    """Combined detection with a terminal grating returning light through the array.

    The chip must end, in the travel direction, with a grating segment. Its
    reflectivity is taken from the segment unless ``grating_reflectivity`` overrides it.
    """
    oriented = chip.oriented(direction)
    last = oriented.segments[-1]
    if last.kind != "grating":
        raise DomainError(f"chip does not end with a grating in direction {direction}")
    r = check_probability(last.reflectivity if grating_reflectivity is None
                          else grating_reflectivity, "grating_reflectivity")
    body = oriented.segments[:-1]
    loss = chip.loss_db_per_cm(polarization)
    detected, at_grating, _p, _i, _r = _single_pass(body, polarization, loss)
    back = _single_pass(body[::-1], polarization, loss)[0]
    return float(sum(detected) + at_grating * r * sum(back))
