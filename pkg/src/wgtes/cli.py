"""Command-line entry point: one subcommand per reproduced table or figure.

Every command is a pure function of (config, input files, seed). Outputs carry a
provenance record (package version, command, config hash, seed) and a
``manifest.json`` lists each written file with its SHA-256.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import CalibrationMeasurementSet, CalibrationModel, solve_efficiencies
from .errors import ConfigError, ConvergenceError, DataError, DomainError, StabilityError
from .loss_profile import EXAMPLE_DETECTORS, analyze_scan, read_scan_csv
from .materials import (
    GOLD,
    TUNGSTEN,
    MaterialParams,
    effective_conductivity,
    free_electron_thermal_conductivity,
    photon_energy,
    thermal_conductivity,
)
from .optics import ChipLayout, DESIGN_ALPHA_PER_CM, db_per_cm_to_alpha, design_sweep, serial_array
from .photon_sim import (
    CountHistogram,
    SourceConfig,
    discriminate_photon_number,
    expected_counts,
    sample_detected_counts,
    synthesize_traces,
)
from .thermal import DetectorDesign, NoiseSpectrum, averaged_pulse, energy_resolution, run_pulse

log = logging.getLogger("wgtes")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
EV = 1.602176634e-19

# reference TM efficiencies and the assumed spacings used for bundled fixtures
TM_ETA = (0.437, 0.436, 0.432)
TM_COUPLING = {"A": 0.221, "B": 0.148}
DEFAULT_L1_CM = 0.5
DEFAULT_L2_CM = 0.3


def data_path(name):
    """Path of a file bundled in ``wgtes/data``."""
    return Path(str(resources.files("wgtes") / "data" / name))


# --- configuration --------------------------------------------------------------

_SCHEMAS = {
    "materials": {"temperature_K": 0.1, "materials": None},
    "pulse": {"design": {}, "positions_um": None, "duration_us": 40.0, "dt_sample_ns": 5.0,
              "dx_um": 1.0, "wavelength_nm": 1550.0},
    "sweep": {"design": {}, "lengths_um": [25, 50, 100, 150, 210, 300, 400, 500],
              "tail_lengths_um": [25, 50, 100, 150], "alpha_tm_per_cm": DESIGN_ALPHA_PER_CM["TM"],
              "alpha_te_per_cm": DESIGN_ALPHA_PER_CM["TE"], "n_positions": 5,
              "noise_pA_per_rtHz": 10.0, "duration_us": 40.0, "dt_sample_ns": 5.0, "dx_um": 1.0},
    "calibrate": {"measurements": None, "alpha_db_per_cm": 0.947, "l1_cm": DEFAULT_L1_CM,
                  "l2_cm": DEFAULT_L2_CM, "n_in": 1.0, "n_starts": 16, "weighting": "relative",
                  "fit_alpha": False},
    "loss": {"scan": None, "detector_spans_cm": [list(s) for s in EXAMPLE_DETECTORS],
             "gain_tolerance_db": 0.05},
    "montecarlo": {"mean_photons": 1.0, "pulses": 8192, "wavelength_nm": 1550.0, "chip": None,
                   "direction": "A->B", "polarization": "TM", "design": {},
                   "noise_pA_per_rtHz": 10.0, "dt_sample_ns": 50.0, "n_samples": 512,
                   "n_positions": 5, "formats": ["binary"]},
}
_MATERIAL_KEYS = {"gamma", "sigma_ep", "sigma_bulk", "mfp_bulk", "n_free", "v_fermi", "thickness_nm"}


def load_config(command, path=None):
    """Defaults for ``command`` overlaid with a JSON file; unknown keys are rejected."""
    cfg = json.loads(json.dumps(_SCHEMAS[command]))
    if path is None:
        return cfg
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(cfg)
    if unknown:
        raise ConfigError(f"unknown keys for '{command}': {sorted(unknown)}")
    cfg.update(doc)
    return cfg


def config_hash(cfg):
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


class Output:
    """Writes files into the output directory and records them for the manifest."""

    def __init__(self, out_dir, command, cfg, seed):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.provenance = {"package": "wgtes", "version": __version__, "command": command,
                           "config_sha256": config_hash(cfg), "seed": int(seed)}
        self.files = {}

    @property
    def header(self):
        p = self.provenance
        return [f"wgtes {p['version']} command={p['command']} config_sha256={p['config_sha256']} "
                f"seed={p['seed']}"]

    def _record(self, name, payload: bytes):
        (self.dir / name).write_bytes(payload)
        self.files[name] = hashlib.sha256(payload).hexdigest()
        log.info("wrote %s", self.dir / name)

    def text(self, name, text):
        self._record(name, text.encode())

    def json(self, name, doc):
        doc = dict(doc, provenance=self.provenance)
        self._record(name, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())

    def csv(self, name, columns, rows):
        lines = [f"# {h}" for h in self.header] + [",".join(columns)]
        lines += [",".join(v if isinstance(v, str) else repr(float(v)) for v in row) for row in rows]
        self.text(name, "\n".join(lines) + "\n")

    def binary(self, name, payload):
        self._record(name, payload)

    def finish(self):
        self.json("manifest.json", {"files": dict(sorted(self.files.items()))})


def _design(doc):
    return DetectorDesign.from_dict(doc) if doc else DetectorDesign()


def _grid(values, name):
    if values is None or len(values) == 0:
        raise ConfigError(f"'{name}' must be a non-empty list")
    return [float(v) for v in values]


# --- commands -------------------------------------------------------------------

def cmd_materials(cfg, out: Output, args):
    temperature = float(cfg["temperature_K"])
    rows_in = {"W": (TUNGSTEN, 40.0), "Au": (GOLD, 80.0)}
    for name, entry in (cfg["materials"] or {}).items():
        if not isinstance(entry, dict) or set(entry) != _MATERIAL_KEYS:
            raise ConfigError(f"material {name!r} must define exactly {sorted(_MATERIAL_KEYS)}")
        params = {k: float(v) for k, v in entry.items() if k != "thickness_nm"}
        try:
            rows_in[name] = (MaterialParams.from_table_units(name, **params), float(entry["thickness_nm"]))
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc
    columns = ["name", "gamma_aJ_per_um3_K2", "sigma_ep_nW_per_um3_K5", "sigma_bulk_S_per_m",
               "mfp_bulk_m", "n_free_per_m3", "v_fermi_m_per_s", "thickness_nm", "temperature_K",
               "sigma_eff_S_per_m", "kappa_W_per_mK", "kappa_free_electron_W_per_mK",
               "c_per_volume_J_per_m3K"]
    rows = []
    for name, (m, t_nm) in rows_in.items():
        tu = m.to_table_units()
        rows.append([name, tu["gamma"], tu["sigma_ep"], tu["sigma_bulk"], tu["mfp_bulk"],
                     tu["n_free"], tu["v_fermi"], t_nm, temperature,
                     effective_conductivity(m, t_nm * 1e-9),
                     thermal_conductivity(m, t_nm * 1e-9, temperature),
                     free_electron_thermal_conductivity(m, t_nm * 1e-9, temperature),
                     m.gamma * temperature])
    out.csv("materials.csv", columns, rows)


def cmd_pulse(cfg, out: Output, args):
    design = _design(cfg["design"])
    if args.positions is not None:
        positions = _grid(args.positions, "--positions")
    elif cfg["positions_um"] is not None:
        positions = _grid(cfg["positions_um"], "positions_um")
    else:
        positions = list(np.arange(0.0, design.tail_length * 1e6 + 1e-9, 10.0))
    energy = photon_energy(float(cfg["wavelength_nm"]) * 1e-9)
    kw = dict(duration=float(cfg["duration_us"]) * 1e-6, dt_sample=float(cfg["dt_sample_ns"]) * 1e-9,
              dx=float(cfg["dx_um"]) * 1e-6, energy=energy)

    def one(x_um):
        return run_pulse(design, x_um * 1e-6, **kw)

    if args.threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            runs = list(pool.map(one, positions))
    else:
        runs = [one(x) for x in positions]
    summary = []
    for x_um, run in zip(positions, runs):
        tr = run.trace
        out.csv(f"pulse_x{x_um:06.1f}um.csv", ["time_s", "delta_current_A"], zip(tr.times, tr.samples))
        summary.append([x_um, tr.peak, tr.area, run.balance_error])
    out.csv("pulse_summary.csv", ["x_impact_um", "peak_abs_A", "area_A_s", "energy_balance_error"], summary)


def cmd_sweep(cfg, out: Output, args):
    lengths = _grid(cfg["lengths_um"], "lengths_um")
    tails = _grid(cfg["tail_lengths_um"], "tail_lengths_um")
    a_tm, a_te = float(cfg["alpha_tm_per_cm"]), float(cfg["alpha_te_per_cm"])
    eta_tm, eta_te = design_sweep(a_tm, lengths), design_sweep(a_te, lengths)
    out.csv("sweep_efficiency.csv", ["length_um", "eta_tm", "eta_te"], zip(lengths, eta_tm, eta_te))

    base = _design(cfg["design"])
    noise = NoiseSpectrum.white(float(cfg["noise_pA_per_rtHz"]) * 1e-12)
    rows = []
    for tail in tails:
        d = base.with_tail_length(tail * 1e-6)
        de = energy_resolution(d, noise, n_positions=int(cfg["n_positions"]), alpha_per_cm=a_tm,
                               duration=float(cfg["duration_us"]) * 1e-6,
                               dt_sample=float(cfg["dt_sample_ns"]) * 1e-9,
                               dx=float(cfg["dx_um"]) * 1e-6, threads=args.threads)
        total_um = d.total_length * 1e6
        rows.append([tail, total_um, float(design_sweep(a_tm, [total_um])[0]), de / EV])
    out.csv("sweep_resolution.csv", ["tail_length_um", "total_length_um", "eta_tm", "delta_e_fwhm_eV"], rows)


def cmd_calibrate(cfg, out: Output, args):
    source = args.measurements or cfg["measurements"]
    if source is None:
        raise ConfigError("no measurement CSV given (argument or 'measurements' key)")
    if not Path(source).exists():
        raise DataError(f"measurement file not found: {source}")
    meas = CalibrationMeasurementSet.from_csv(Path(source))
    model = CalibrationModel(meas.n_detectors, db_per_cm_to_alpha(float(cfg["alpha_db_per_cm"])),
                             float(cfg["l1_cm"]), float(cfg["l2_cm"]), float(cfg["n_in"]))
    sol = solve_efficiencies(model, meas, n_starts=int(cfg["n_starts"]), random_state=args.seed,
                             weighting=cfg["weighting"], fit_alpha=bool(cfg["fit_alpha"]))
    out.json("calibration.json", sol.to_dict())


def cmd_loss(cfg, out: Output, args):
    source = args.scan or cfg["scan"]
    if source is None:
        raise ConfigError("no scan CSV given (argument or 'scan' key)")
    if not Path(source).exists():
        raise DataError(f"scan file not found: {source}")
    spans = [tuple(float(v) for v in s) for s in cfg["detector_spans_cm"]]
    report = analyze_scan(read_scan_csv(Path(source)), spans,
                          gain_tolerance_db=float(cfg["gain_tolerance_db"]))
    out.json("loss_report.json", report.to_dict())
    out.text("loss_profile.csv", report.profile.to_csv(header=out.header))


def default_chip(polarization="TM", loss_db_per_cm=0.947):
    chip = serial_array(TM_ETA, DEFAULT_L2_CM * 10, lead_mm=DEFAULT_L1_CM * 10,
                        loss_db_per_cm=loss_db_per_cm, polarization=polarization)
    return replace(chip, coupling=dict(TM_COUPLING))


def cmd_montecarlo(cfg, out: Output, args):
    formats = set(cfg["formats"])
    if formats - {"binary", "csv"}:
        raise ConfigError("formats may contain only 'binary' and 'csv'")
    pol = cfg["polarization"]
    chip = ChipLayout.from_dict(cfg["chip"]) if cfg["chip"] else default_chip(pol)
    try:
        source = SourceConfig(float(cfg["mean_photons"]), int(cfg["pulses"]),
                              float(cfg["wavelength_nm"]), args.seed)
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    counts = sample_detected_counts(source, chip, cfg["direction"], pol)

    design = _design(cfg["design"])
    dt = float(cfg["dt_sample_ns"]) * 1e-9
    n_samples = int(cfg["n_samples"])
    if n_samples < 2:
        raise ConfigError("n_samples must be at least 2")
    # the pulse grid includes both end points
    unit = averaged_pulse(design, n_positions=int(cfg["n_positions"]), dt_sample=dt,
                          duration=(n_samples - 1) * dt, threads=args.threads)
    template = unit.scaled(photon_energy(source.wavelength * 1e-9))
    noise = NoiseSpectrum.white(float(cfg["noise_pA_per_rtHz"]) * 1e-12) \
        if cfg["noise_pA_per_rtHz"] else None
    ens = synthesize_traces(counts, template, noise, seed=args.seed,
                            config_hash=out.provenance["config_sha256"])
    hist = discriminate_photon_number(ens, template, noise)

    if "binary" in formats:
        out.binary("traces.tesd", ens.to_binary())
    if "csv" in formats:
        out.text("traces.csv", ens.to_csv(header=out.header))
    out.csv("template.csv", ["time_s", "delta_current_A"], zip(template.times, template.samples))
    true_hist = CountHistogram.from_counts(counts.counts)
    n = counts.n_pulses
    doc = hist.to_dict()
    doc.update({
        "true_means": [float(v) for v in true_hist.means],
        "expected_means": [float(v) for v in expected_counts(source, chip, cfg["direction"], pol)],
        "standard_errors": [float(v) for v in counts.counts.std(axis=0) / np.sqrt(n)],
        "misassigned_fraction": float(np.mean(hist.assigned != counts.counts)),
    })
    out.json("histogram.json", doc)


COMMANDS = {
    "materials": (cmd_materials, "material transport table (kappa, C, sigma_eff)"),
    "pulse": (cmd_pulse, "current pulses versus impact position"),
    "sweep": (cmd_sweep, "absorption and energy resolution versus length"),
    "calibrate": (cmd_calibrate, "detector and facet efficiencies from bidirectional counts"),
    "loss": (cmd_loss, "waveguide loss and detector absorption from a grating scan"),
    "montecarlo": (cmd_montecarlo, "coherent-pulse trace ensemble and photon-number histogram"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config overriding the defaults")
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--out-dir", type=Path, default=Path("."), help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="wgtes", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common], help=text) for name, (_f, text) in COMMANDS.items()}
    parsers["pulse"].add_argument("--positions", type=float, nargs="+", metavar="UM",
                                  help="impact positions in um (overrides the config)")
    parsers["calibrate"].add_argument("measurements", nargs="?", help="measurement CSV")
    parsers["loss"].add_argument("scan", nargs="?", help="grating scan CSV")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = load_config(args.command, args.config)
        out = Output(args.out_dir, args.command, cfg, args.seed)
        func(cfg, out, args)
        out.finish()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DomainError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (StabilityError, ConvergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
