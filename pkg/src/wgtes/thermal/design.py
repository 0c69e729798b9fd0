"""Device geometry, bias circuit and JSON loading for the extended-absorber TES."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .._validation import check_nonnegative, check_positive, is_existing_file
from ..errors import ConfigError, DomainError
from ..materials import MaterialParams, get_material

_UM = 1e-6
_NM = 1e-9

# JSON presentation units for each geometric field
_LENGTH_UNITS = {
    "tes_side": _UM,
    "tes_thickness": _NM,
    "tail_length": _UM,
    "tungsten_tail_width": _UM,
    "tungsten_tail_thickness": _NM,
    "gold_spine_width": _UM,
    "gold_spine_thickness": _NM,
}


@dataclass(frozen=True)
class BiasCircuit:
    """Thevenin voltage bias: V_bias in series with R_shunt and the TES.

    If ``v_bias`` is None the voltage is chosen so the equilibrium TES resistance
    equals ``operating_fraction * r_normal``. ``inductance`` of zero means the current
    follows the resistance instantly.
    """

    r_shunt: float = 0.05
    v_bias: float | None = None
    operating_fraction: float = 0.3
    inductance: float = 0.0

    def __post_init__(self):
        check_nonnegative(self.r_shunt, "r_shunt")
        check_nonnegative(self.inductance, "inductance")
        if self.v_bias is not None:
            check_positive(self.v_bias, "v_bias")
        if not 0.0 < self.operating_fraction < 1.0:
            raise DomainError("operating_fraction must lie strictly between 0 and 1")


@dataclass(frozen=True)
class DetectorDesign:
    """Geometry and materials of one extended-absorber TES, SI units throughout.

    Each tail is a tungsten strip with a gold spine on top; the TES is a tungsten
    square lumped into a single thermal node.
    """

    tes_side: float = 10e-6
    tes_thickness: float = 40e-9
    tail_length: float = 100e-6
    tungsten_tail_width: float = 3.5e-6
    tungsten_tail_thickness: float = 40e-9
    gold_spine_width: float = 2e-6
    gold_spine_thickness: float = 80e-9
    t_c: float = 0.084
    transition_width: float = 1e-3
    r_normal: float = 5.0
    bath_temperature: float = 0.05
    bias: BiasCircuit = field(default_factory=BiasCircuit)
    tes_material: str = "W"
    absorber_material: str = "W"
    spine_material: str = "Au"

    def __post_init__(self):
        for name in _LENGTH_UNITS:
            check_positive(getattr(self, name), name)
        check_positive(self.t_c, "t_c")
        check_positive(self.transition_width, "transition_width")
        check_positive(self.r_normal, "r_normal")
        check_positive(self.bath_temperature, "bath_temperature")
        if self.bath_temperature >= self.t_c:
            raise DomainError("bath_temperature must be below t_c")
        for name in ("tes_material", "absorber_material", "spine_material"):
            try:
                get_material(getattr(self, name))
            except KeyError as exc:
                raise DomainError(str(exc)) from None

    @property
    def tes(self) -> MaterialParams:
        return get_material(self.tes_material)

    @property
    def absorber(self) -> MaterialParams:
        return get_material(self.absorber_material)

    @property
    def spine(self) -> MaterialParams:
        return get_material(self.spine_material)

    @property
    def total_length(self):
        return 2 * self.tail_length + self.tes_side

    @property
    def tes_volume(self):
        return self.tes_side**2 * self.tes_thickness

    def with_tail_length(self, tail_length):
        return replace(self, tail_length=tail_length)

    def to_dict(self):
        """Serialise in JSON presentation units (um, nm, K, Ohm, V, H)."""
        d = asdict(self)
        for name, unit in _LENGTH_UNITS.items():
            d[name] = getattr(self, name) / unit
        return d

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("detector design must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown detector design keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in doc.items():
            if key == "bias":
                bias_known = {f.name for f in fields(BiasCircuit)}
                if not isinstance(value, dict) or set(value) - bias_known:
                    raise ConfigError(f"bias accepts only {sorted(bias_known)}")
                kwargs[key] = BiasCircuit(**value)
            elif key in _LENGTH_UNITS:
                kwargs[key] = float(value) * _LENGTH_UNITS[key]
            else:
                kwargs[key] = value
        try:
            return cls(**kwargs)
        except (TypeError, DomainError) as exc:
            raise ConfigError(f"invalid detector design: {exc}") from exc

    @classmethod
    def from_json(cls, source):
        if is_existing_file(source):
            return cls.from_dict(json.loads(Path(source).read_text()))
        return cls.from_dict(json.loads(source))


def default_design(**overrides) -> DetectorDesign:
    """The 2 x 100 um gold-spined device at T_c = 84 mK."""
    return replace(DetectorDesign(), **overrides)


def normal_resistance_estimate(design: DetectorDesign):
    """Sheet resistance of the TES film times one square."""
    return 1.0 / (design.tes.sigma_bulk * design.tes_thickness)


def operating_temperature(design: DetectorDesign):
    """Temperature at which the logistic transition gives the target resistance fraction."""
    f = design.bias.operating_fraction
    return design.t_c + design.transition_width * math.log(f / (1.0 - f))
