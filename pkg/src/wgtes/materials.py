"""Low-temperature material constants and the transport quantities derived from them.

Everything is stored in SI units. The customary presentation units for thin-film
calorimetry (aJ, um^3, nW) only appear in :meth:`MaterialParams.from_table_units`
and :meth:`MaterialParams.to_table_units`.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from scipy import constants as _sc

from ._validation import check_positive, is_existing_file
from .errors import DataError

# conversion factors from presentation units to SI
_GAMMA_UNIT = 1.0  # aJ um^-3 K^-2 is numerically equal to J m^-3 K^-2
_SIGMA_EP_UNIT = 1e-9 / 1e-18  # nW um^-3 K^-5 -> W m^-3 K^-5


@dataclass(frozen=True)
class PhysicalConstants:
    lorenz: float
    boltzmann: float = _sc.k
    electron_charge: float = _sc.e
    electron_mass: float = _sc.m_e
    planck: float = _sc.h
    light_speed: float = _sc.c


@dataclass(frozen=True)
class MaterialParams:
    """Electrical and thermal constants of one metal film.

    Attributes
    ----------
    gamma : float
        Electron specific-heat coefficient [J m^-3 K^-2].
    sigma_ep : float
        Electron-phonon coupling constant [W m^-3 K^-5].
    sigma_bulk : float
        Bulk low-temperature electrical conductivity [S/m].
    mfp_bulk : float
        Bulk electron mean free path [m].
    n_free : float
        Free-electron density [m^-3].
    v_fermi : float
        Mean Fermi velocity [m/s].
    """

    name: str
    gamma: float
    sigma_ep: float
    sigma_bulk: float
    mfp_bulk: float
    n_free: float
    v_fermi: float

    def __post_init__(self):
        for f in fields(self):
            if f.name != "name":
                check_positive(getattr(self, f.name), f"{self.name}.{f.name}")

    @classmethod
    def from_table_units(cls, name, gamma, sigma_ep, sigma_bulk, mfp_bulk, n_free, v_fermi):
        """Build from gamma in aJ/um^3/K^2 and sigma_ep in nW/um^3/K^5 (others SI)."""
        return cls(
            name=name,
            gamma=gamma * _GAMMA_UNIT,
            sigma_ep=sigma_ep * _SIGMA_EP_UNIT,
            sigma_bulk=sigma_bulk,
            mfp_bulk=mfp_bulk,
            n_free=n_free,
            v_fermi=v_fermi,
        )

    def to_table_units(self):
        d = asdict(self)
        d.pop("name")
        d["gamma"] = self.gamma / _GAMMA_UNIT
        d["sigma_ep"] = self.sigma_ep / _SIGMA_EP_UNIT
        return d


# n_free/v_fermi for Au are the free-electron values; for W the atomic density is
# used and v_fermi is chosen so n e^2 l / (m v_F) reproduces the tabulated sigma_bulk.
TUNGSTEN = MaterialParams.from_table_units(
    "W", gamma=140.0, sigma_ep=0.4, sigma_bulk=5e6, mfp_bulk=2.8e-9,
    n_free=6.31e28, v_fermi=9.955e5,
)
GOLD = MaterialParams.from_table_units(
    "Au", gamma=71.4, sigma_ep=2.6, sigma_bulk=2.23e10, mfp_bulk=1.88e-5,
    n_free=5.90e28, v_fermi=1.40e6,
)

_REGISTRY: dict[str, MaterialParams] = {"W": TUNGSTEN, "Au": GOLD}


def register_material(material: MaterialParams, *, overwrite=False):
    if material.name in _REGISTRY and not overwrite:
        raise ValueError(f"material {material.name!r} already registered")
    _REGISTRY[material.name] = material


def get_material(name) -> MaterialParams:
    if isinstance(name, MaterialParams):
        return name
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown material {name!r}; known: {sorted(_REGISTRY)}") from None


def available_materials():
    return sorted(_REGISTRY)


def load_materials(source, *, register=False):
    """Read materials from a JSON document keyed by material name.

    Each entry holds the six material fields in presentation units
    (gamma in aJ/um^3/K^2, sigma_ep in nW/um^3/K^5, the rest SI).
    """
    if is_existing_file(source):
        doc = json.loads(Path(source).read_text())
    elif isinstance(source, str):
        doc = json.loads(source)
    else:
        doc = source
    if not isinstance(doc, dict):
        raise DataError("material document must be a JSON object keyed by name")
    expected = {"gamma", "sigma_ep", "sigma_bulk", "mfp_bulk", "n_free", "v_fermi"}
    out = {}
    for name, entry in doc.items():
        if not isinstance(entry, dict) or set(entry) != expected:
            raise DataError(f"material {name!r} must define exactly {sorted(expected)}")
        out[name] = MaterialParams.from_table_units(name, **{k: float(v) for k, v in entry.items()})
        if register:
            register_material(out[name], overwrite=True)
    return out


def lorenz_constant():
    """Sommerfeld value of the Lorenz number, pi^2 k_B^2 / (3 e^2) [W Ohm K^-2]."""
    return math.pi**2 * _sc.k**2 / (3.0 * _sc.e**2)


def physical_constants() -> PhysicalConstants:
    return PhysicalConstants(lorenz=lorenz_constant())


def effective_mean_free_path(m: MaterialParams, film_thickness):
    return min(m.mfp_bulk, check_positive(film_thickness, "film_thickness"))


def effective_conductivity(m: MaterialParams, film_thickness):
    """Film conductivity with the mean free path capped at the film thickness [S/m]."""
    return m.sigma_bulk * effective_mean_free_path(m, film_thickness) / m.mfp_bulk


def thermal_conductivity(m: MaterialParams, film_thickness, temperature):
    """Electronic thermal conductivity kappa = sigma_eff L T [W m^-1 K^-1]."""
    temperature = check_positive(temperature, "temperature")
    return effective_conductivity(m, film_thickness) * lorenz_constant() * temperature


def free_electron_thermal_conductivity(m: MaterialParams, film_thickness, temperature):
    """kappa = n e^2 l L T / (m v_F) evaluated directly from the free-electron parameters."""
    temperature = check_positive(temperature, "temperature")
    mfp = effective_mean_free_path(m, film_thickness)
    return m.n_free * _sc.e**2 * mfp * lorenz_constant() * temperature / (_sc.m_e * m.v_fermi)


def heat_capacity(m: MaterialParams, volume, temperature):
    """Electron heat capacity C = gamma V T [J/K] for ``volume`` in m^3."""
    volume = check_positive(volume, "volume")
    temperature = check_positive(temperature, "temperature")
    return m.gamma * volume * temperature


def photon_energy(wavelength):
    """Photon energy h c / lambda [J] for ``wavelength`` in m."""
    return _sc.h * _sc.c / check_positive(wavelength, "wavelength")
