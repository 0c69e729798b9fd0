"""Electron-temperature model of the absorber tails and the lumped TES.

Grid convention: positions are measured along each tail from the TES edge. Nodes sit
at x = k dx (uniform spacing). The TES is the node at x = 0 and also carries the two
tail half-cells touching it; tail node k owns the control volume
[(k - 1/2) dx, (k + 1/2) dx], with a half cell at the insulated tail end. Time
integration is backward Euler in u = T**2 (unconditionally stable), see ``_kernels``.
"""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .._validation import check_nonnegative, check_positive
from ..errors import DomainError, StabilityError
from ..materials import effective_conductivity, lorenz_constant, photon_energy
from . import _kernels
from .design import DetectorDesign, operating_temperature

DEFAULT_DX = 1e-6
DEFAULT_DURATION = 40e-6
DEFAULT_DT_SAMPLE = 5e-9
DEFAULT_WAVELENGTH = 1550e-9
# internal backward-Euler steps: start small after the injection, grow to the cap
DEFAULT_DT_MAX = 1e-9
_DT_FIRST = 1e-12
_GROWTH = 1.25


@dataclass(frozen=True)
class _Network:
    x: np.ndarray
    c: np.ndarray
    s: np.ndarray
    g: np.ndarray
    tes: int
    n_tail: int
    dx: float
    tp5: float


@functools.lru_cache(maxsize=64)
def build_network(design: DetectorDesign, dx=DEFAULT_DX) -> _Network:
    """Per-node heat capacity, e-p coupling and link conductance arrays."""
    dx = check_positive(dx, "dx")
    n_tail = int(round(design.tail_length / dx))
    if n_tail < 1 or abs(n_tail * dx - design.tail_length) > 1e-9 * design.tail_length:
        raise DomainError("tail_length must be an integer multiple of dx")
    w, au = design.absorber, design.spine
    area_w = design.tungsten_tail_width * design.tungsten_tail_thickness
    area_au = design.gold_spine_width * design.gold_spine_thickness
    # layers share one electron temperature: capacities and conductances add
    gamma_a = w.gamma * area_w + au.gamma * area_au
    sigma_ep_a = w.sigma_ep * area_w + au.sigma_ep * area_au
    sigma_a = (effective_conductivity(w, design.tungsten_tail_thickness) * area_w
               + effective_conductivity(au, design.gold_spine_thickness) * area_au)
    lorenz = lorenz_constant()

    n = 2 * n_tail + 1
    tes = n_tail
    c = np.full(n, gamma_a * dx)
    s = np.full(n, sigma_ep_a * dx)
    c[[0, -1]] *= 0.5
    s[[0, -1]] *= 0.5
    c[tes] = design.tes.gamma * design.tes_volume + gamma_a * dx
    s[tes] = design.tes.sigma_ep * design.tes_volume + sigma_ep_a * dx
    g = np.full(n - 1, sigma_a * lorenz / (2.0 * dx))
    x = (np.arange(n) - tes) * dx
    for arr in (x, c, s, g):
        arr.flags.writeable = False
    return _Network(x=x, c=c, s=s, g=g, tes=tes, n_tail=n_tail, dx=dx,
                    tp5=design.bath_temperature**5)


@dataclass(frozen=True)
class ThermalState:
    """Electron temperatures on the grid (TES node included) plus circuit current."""

    grid_x: np.ndarray
    t_e: np.ndarray
    current: float
    time: float = 0.0
    dx: float = DEFAULT_DX

    def __post_init__(self):
        if self.grid_x.shape != self.t_e.shape:
            raise DomainError("grid_x and t_e must have the same shape")
        if not np.all(np.isfinite(self.t_e)) or np.any(self.t_e <= 0):
            raise DomainError("temperatures must be finite and positive")

    @property
    def tes_index(self):
        return self.grid_x.size // 2

    @property
    def t_tes(self):
        return float(self.t_e[self.tes_index])

    @property
    def tails(self):
        mask = np.ones(self.t_e.size, dtype=bool)
        mask[self.tes_index] = False
        return self.grid_x[mask], self.t_e[mask]


def stored_energy(state: ThermalState, design: DetectorDesign):
    """Electron energy sum(gamma V T^2 / 2) over all nodes [J]."""
    net = build_network(design, state.dx)
    return float(0.5 * np.sum(net.c * state.t_e**2))


def ep_power(sigma_ep, volume, t_e, t_p):
    """Electron-phonon power Sigma V (T_e^5 - T_p^5) [W]."""
    check_positive(volume, "volume")
    return sigma_ep * volume * (t_e**5 - t_p**5)


def wf_heat_flow(sigma_eff, area, t_left, t_right, dx):
    """Discrete Wiedemann-Franz heat flow between two cells [W].

    Uses the interface mean temperature, so the result equals
    sigma A L (t_right^2 - t_left^2) / (2 dx). Positive when heat flows leftwards,
    i.e. toward decreasing x.
    """
    check_positive(dx, "dx")
    check_positive(t_left, "t_left")
    check_positive(t_right, "t_right")
    t_mean = 0.5 * (t_left + t_right)
    return sigma_eff * area * lorenz_constant() * t_mean * (t_right - t_left) / dx


def _bias_voltage(design: DetectorDesign, net: _Network):
    if design.bias.v_bias is not None:
        return design.bias.v_bias
    # tails relaxed against a TES clamped at the target temperature
    t0 = operating_temperature(design)
    u = np.full(net.c.size, t0**2)
    u = _relax(design, net, u, 0.0, 0.0, joule_on=False, fix_tes=True)[0]
    tes = net.tes
    p_out = (net.s[tes] * (u[tes] ** 2.5 - net.tp5)
             + net.g[tes - 1] * (u[tes] - u[tes - 1])
             + net.g[tes] * (u[tes] - u[tes + 1]))
    r0, _ = _kernels.transition_resistance(t0, design.r_normal, design.t_c,
                                           design.transition_width)
    i0 = math.sqrt(p_out / r0)
    return i0 * (r0 + design.bias.r_shunt)


def _relax(design, net, u, current, v_bias, *, joule_on, fix_tes):
    """Pseudo-transient relaxation to the stationary state."""
    dt = 1e-9
    b = design.bias
    for _ in range(400):
        u_new, current, _pj, _pep, status = _kernels.be_step(
            u, current, net.c, net.s, net.g, net.tp5, net.tes, dt, v_bias, b.r_shunt,
            design.r_normal, design.t_c, design.transition_width, b.inductance,
            joule_on, fix_tes)
        if status != 0:
            raise StabilityError(f"relaxation step failed (status {status}) at dt={dt:g}")
        change = np.max(np.abs(u_new - u) / u)
        u = u_new
        if dt >= 1.0 and change < 1e-14:
            return u, current
        dt = min(dt * 2.0, 1e3)
    raise StabilityError("equilibrium relaxation did not settle")


@dataclass(frozen=True)
class OperatingPoint:
    state: ThermalState
    v_bias: float
    resistance: float
    joule_power: float


@functools.lru_cache(maxsize=64)
def operating_point(design: DetectorDesign, dx=DEFAULT_DX) -> OperatingPoint:
    """Stationary bias point found by relaxing the full electrothermal system."""
    net = build_network(design, dx)
    v_bias = _bias_voltage(design, net)
    u0 = np.full(net.c.size, operating_temperature(design) ** 2)
    if design.bias.v_bias is not None:
        u0[:] = design.t_c**2
    r0, _ = _kernels.transition_resistance(math.sqrt(u0[net.tes]), design.r_normal,
                                           design.t_c, design.transition_width)
    i0 = v_bias / (r0 + design.bias.r_shunt)
    u, current = _relax(design, net, u0, i0, v_bias, joule_on=True, fix_tes=False)
    pj, _d, current, r = _kernels.joule_power(
        u[net.tes], current, 1.0, v_bias, design.bias.r_shunt, design.r_normal,
        design.t_c, design.transition_width, design.bias.inductance)
    t_e = np.sqrt(u)
    t_e.flags.writeable = False
    state = ThermalState(grid_x=net.x, t_e=t_e, current=current, time=0.0, dx=dx)
    return OperatingPoint(state=state, v_bias=v_bias, resistance=r, joule_power=pj)


def equilibrium_state(design: DetectorDesign, dx=DEFAULT_DX) -> ThermalState:
    return operating_point(design, dx).state


def uniform_state(design: DetectorDesign, temperature, dx=DEFAULT_DX, current=0.0):
    net = build_network(design, dx)
    return ThermalState(grid_x=net.x, t_e=np.full(net.x.size, float(temperature)),
                        current=current, dx=dx)


def _step(state, design, dt, *, joule_on):
    dt = check_positive(dt, "dt")
    net = build_network(design, state.dx)
    if state.grid_x.size != net.x.size:
        raise DomainError("state grid does not match the design at this dx")
    b = design.bias
    v_bias = operating_point(design, state.dx).v_bias if joule_on else 0.0
    u, current, _pj, _pep, status = _kernels.be_step(
        state.t_e**2, state.current, net.c, net.s, net.g, net.tp5, net.tes, dt, v_bias,
        b.r_shunt, design.r_normal, design.t_c, design.transition_width, b.inductance,
        joule_on, False)
    if status != 0 or not np.all(np.isfinite(u)):
        raise StabilityError(f"implicit step did not converge (status {status}, dt={dt:g})")
    return replace(state, t_e=np.sqrt(u), current=current, time=state.time + dt)


def step_heat_equation(state: ThermalState, design: DetectorDesign, dt) -> ThermalState:
    """Advance the electron temperatures by ``dt`` with diffusion and e-p escape only.

    The TES node participates as a lumped cell but receives no Joule heating, and the
    bias current is left unchanged. Tail ends are insulated.
    """
    return _step(state, design, dt, joule_on=False)


def tes_step(state: ThermalState, design: DetectorDesign, dt) -> ThermalState:
    """Advance the full electrothermal system (heat network, Joule heating, bias circuit)."""
    return _step(state, design, dt, joule_on=True)


def tes_rates(state: ThermalState, design: DetectorDesign):
    """Instantaneous (dT_tes/dt, dI/dt) of the electrothermal system."""
    net = build_network(design, state.dx)
    op = operating_point(design, state.dx)
    b = design.bias
    u = state.t_e**2
    tes = net.tes
    pj, dpj, current, r = _kernels.joule_power(
        u[tes], state.current, 1.0, op.v_bias, b.r_shunt, design.r_normal, design.t_c,
        design.transition_width, b.inductance)
    flux_out = (net.g[tes - 1] * (u[tes] - u[tes - 1])
                + net.g[tes] * (u[tes] - u[tes + 1]))
    p_net = pj - flux_out - net.s[tes] * (u[tes] ** 2.5 - net.tp5)
    dT_dt = p_net / (net.c[tes] * state.t_tes)
    if b.inductance > 0:
        dI_dt = (op.v_bias - state.current * (b.r_shunt + r)) / b.inductance
    else:
        # current slaved to resistance: dI/dt = dI/dR dR/dT dT/dt
        _, dr_dt = _kernels.transition_resistance(state.t_tes, design.r_normal,
                                                  design.t_c, design.transition_width)
        dI_dt = -op.v_bias / (r + b.r_shunt) ** 2 * dr_dt * dT_dt
    return dT_dt, dI_dt


def cell_index(design: DetectorDesign, x_impact, dx=DEFAULT_DX):
    """Grid node whose control volume holds ``x_impact`` [m]; x = 0 is the TES."""
    net = build_network(design, dx)
    x = float(x_impact)
    if abs(x) > design.tail_length * (1 + 1e-12):
        raise DomainError(f"x_impact={x:g} m lies outside the device (|x| <= {design.tail_length:g})")
    k = min(int(math.floor(abs(x) / dx + 0.5)), net.n_tail)
    return net.tes + k if x >= 0 else net.tes - k


def inject_photon(state: ThermalState, design: DetectorDesign, x_impact, energy) -> ThermalState:
    """Deposit ``energy`` [J] into the electrons of the cell containing ``x_impact``."""
    energy = check_nonnegative(energy, "energy")
    net = build_network(design, state.dx)
    idx = cell_index(design, x_impact, state.dx)
    t_e = state.t_e.copy()
    t_e[idx] = math.sqrt(t_e[idx] ** 2 + 2.0 * energy / net.c[idx])
    return replace(state, t_e=t_e)


@dataclass(frozen=True)
class PulseTrace:
    """Change of bias current after an absorption, sampled every ``dt`` seconds."""

    dt: float
    samples: np.ndarray
    x_impact: float = 0.0
    energy: float = 0.0

    @property
    def times(self):
        return np.arange(self.samples.size) * self.dt

    @property
    def peak(self):
        """Largest excursion |dI| [A]."""
        return float(np.max(np.abs(self.samples)))

    @property
    def area(self):
        return float(np.sum(self.samples) * self.dt)

    def scaled(self, factor):
        return replace(self, samples=self.samples * factor, energy=self.energy * factor)

    def to_csv(self, path, header_lines=()):
        path = Path(path)
        with path.open("w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["time_s", "delta_current_A"])
            for t, v in zip(self.times, self.samples):
                w.writerow([repr(float(t)), repr(float(v))])

    @classmethod
    def from_csv(cls, path, x_impact=0.0, energy=0.0):
        rows = [r for r in Path(path).read_text().splitlines() if r and not r.startswith("#")]
        data = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
        dt = float(data[1, 0] - data[0, 0])
        return cls(dt=dt, samples=data[:, 1].copy(), x_impact=x_impact, energy=energy)


@dataclass(frozen=True)
class PulseRun:
    """A pulse simulation with its energy ledger.

    ``joule_excess`` and ``ep_excess`` are time integrals of the Joule and e-p powers
    above their equilibrium values; ``stored_excess`` is the final stored energy
    above equilibrium. Conservation reads
    energy + joule_excess = ep_excess + stored_excess.
    """

    trace: PulseTrace
    energy: float
    joule_excess: float
    ep_excess: float
    stored_excess: float
    field: np.ndarray | None = field(default=None, repr=False)

    @property
    def balance_error(self):
        lhs = self.energy + self.joule_excess
        rhs = self.ep_excess + self.stored_excess
        return (lhs - rhs) / self.energy if self.energy else lhs - rhs


def run_pulse(design: DetectorDesign, x_impact, duration=DEFAULT_DURATION, *,
              energy=None, dt_sample=DEFAULT_DT_SAMPLE, dx=DEFAULT_DX,
              record_field=False, dt_max=None) -> PulseRun:
    """Inject one photon at ``x_impact`` and integrate the electrothermal response."""
    duration = check_positive(duration, "duration")
    dt_sample = check_positive(dt_sample, "dt_sample")
    if energy is None:
        energy = photon_energy(DEFAULT_WAVELENGTH)
    net = build_network(design, dx)
    op = operating_point(design, dx)
    eq = op.state
    start = inject_photon(eq, design, x_impact, energy)
    n_samples = int(round(duration / dt_sample)) + 1
    field_buf = np.empty((n_samples if record_field else 0, net.x.size))
    b = design.bias
    p_ep0 = float(np.sum(net.s * (eq.t_e**5 - design.bath_temperature**5)))
    samples, u_end, _i_end, e_joule, e_ep, status = _kernels.integrate(
        start.t_e**2, eq.current, net.c, net.s, net.g, net.tp5, net.tes, op.v_bias,
        b.r_shunt, design.r_normal, design.t_c, design.transition_width, b.inductance,
        True, dt_sample, n_samples, _DT_FIRST, _GROWTH,
        min(dt_sample, DEFAULT_DT_MAX if dt_max is None else dt_max), op.joule_power,
        p_ep0, field_buf)
    if status != 0:
        raise StabilityError(f"pulse integration failed (status {status})")
    stored = 0.5 * float(np.sum(net.c * (u_end - eq.t_e**2)))
    trace = PulseTrace(dt=dt_sample, samples=samples - eq.current,
                       x_impact=float(x_impact), energy=float(energy))
    return PulseRun(trace=trace, energy=float(energy), joule_excess=e_joule,
                    ep_excess=e_ep, stored_excess=stored,
                    field=field_buf if record_field else None)


def simulate_pulse(design: DetectorDesign, x_impact, duration=DEFAULT_DURATION, **kwargs) -> PulseTrace:
    """Current pulse dI(t) for a photon absorbed at ``x_impact`` [m]."""
    return run_pulse(design, x_impact, duration, **kwargs).trace
