"""Command-line entry point.

Subcommands
-----------
simulate     preparation, sequence and processing from an experiment config
predict-qc   table of coherence frequencies with folding
fit-weights  non-negative fit of 1D component spectra to a target
decompose    coherence-order map of a prepared state
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .dynamics import DensityState, hard_pulse, uniform_flip
from .sabre import SabrePreparation, prepare_longitudinal, prepare_sabre
from .sequences import (
    AcquisitionParams,
    PhaseCycleScheme,
    fourier_coefficients,
    run_cosy,
    run_cosy_cycled,
    run_fafos,
    t1_grid,
    write_cosy_csv,
)
from .spectra import (
    Spectrum1D,
    assign_peaks,
    coherence_decompose,
    fft_2d,
    fit_composite_weights,
    format_qc_table,
    predict_qc_frequencies,
    write_qc_csv,
)
from .spinsys import PRESETS, SpinSystem, build_hamiltonian, load_spin_system

DEFAULT_B0_TESLA = 91.18e-6
SEQUENCES = ("fafos", "cosy", "cosy-cycled")
PREPARATIONS = ("sabre", "longitudinal")
TARGETS = ("substrate", "complex", "h2")


class ConfigError(ValueError):
    pass


def _g(x: float) -> str:
    return f"{x:.12g}"


# ---------------------------------------------------------------- config


DEFAULTS: dict[str, Any] = {
    "system": "3fpy",
    "complex_system": None,
    "b0_tesla": DEFAULT_B0_TESLA,
    "bp_tesla": 5.2e-3,
    "decohere_tol_hz": 0.01,
    "preparation": {"kind": "sabre", "target": "substrate", "polarization": {}},
    "sequence": {
        "kind": "cosy",
        "L": 101,
        "export_flip_deg": 90.0,
        "k_max": 5,
        "t1_start_s": 0.02,
        "dt1_s": 0.25e-3,
        "n1": 256,
        "scheme": "A",
    },
    "acquisition": {"n_points": 1024, "dwell_s": 50e-6, "broadening_hz": 0.5, "broadening_indirect_hz": 0.5},
    "pulse": {"flip_scale": {}},
    "analysis": {"threshold_rel": 1e-4, "window_bins": 2.0, "include_opposed": False, "write_raw": False},
    "timing": {},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; ``data`` holds the normalized document."""

    data: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        unknown = set(raw) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
        data = _merge(DEFAULTS, raw)
        cls._validate(data)
        return cls(data)

    @staticmethod
    def _validate(d: dict) -> None:
        def need(ok: bool, msg: str):
            if not ok:
                raise ConfigError(msg)

        need(isinstance(d["system"], str) and d["system"] != "", "system must be a preset name or path")
        need(d["b0_tesla"] >= 0, "b0_tesla must be >= 0")
        need(d["bp_tesla"] >= 0, "bp_tesla must be >= 0")
        need(d["decohere_tol_hz"] >= 0, "decohere_tol_hz must be >= 0")
        prep = d["preparation"]
        need(prep["kind"] in PREPARATIONS, f"preparation.kind must be one of {PREPARATIONS}")
        need(prep["target"] in TARGETS, f"preparation.target must be one of {TARGETS}")
        for label, p in prep["polarization"].items():
            need(-1 <= p <= 1, f"polarization of {label} must lie in [-1, 1]")
        seq = d["sequence"]
        need(seq["kind"] in SEQUENCES, f"sequence.kind must be one of {SEQUENCES}")
        need(int(seq["L"]) >= 8, "sequence.L must be >= 8")
        need(int(seq["k_max"]) >= 1, "sequence.k_max must be >= 1")
        need(seq["dt1_s"] > 0, "sequence.dt1_s must be > 0")
        need(int(seq["n1"]) >= 2, "sequence.n1 must be >= 2")
        need(seq["t1_start_s"] >= 0, "sequence.t1_start_s must be >= 0")
        if seq["kind"] == "cosy-cycled":
            try:
                PhaseCycleScheme.named(seq["scheme"])
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        acq = d["acquisition"]
        need(int(acq["n_points"]) >= 1, "acquisition.n_points must be >= 1")
        need(acq["dwell_s"] > 0, "acquisition.dwell_s must be > 0")
        need(acq["broadening_hz"] >= 0, "acquisition.broadening_hz must be >= 0")
        need(acq["broadening_indirect_hz"] >= 0, "acquisition.broadening_indirect_hz must be >= 0")
        for sp, scale in d["pulse"]["flip_scale"].items():
            need(np.isfinite(scale), f"flip_scale of {sp} must be finite")
        ana = d["analysis"]
        need(0 < ana["threshold_rel"] < 1, "analysis.threshold_rel must lie in (0, 1)")
        need(ana["window_bins"] > 0, "analysis.window_bins must be > 0")

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    @property
    def acquisition(self) -> AcquisitionParams:
        a = self.data["acquisition"]
        return AcquisitionParams(int(a["n_points"]), float(a["dwell_s"]), float(a["broadening_hz"]))


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    raw: dict = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    if getattr(args, "preset", None):
        raw["system"] = args.preset
    return ExperimentConfig.from_dict(raw)


# --------------------------------------------------------------- helpers


def _systems(cfg: dict) -> tuple[SpinSystem, SpinSystem | None]:
    name = cfg["system"]
    substrate = load_spin_system(name)
    cpx_name = cfg["complex_system"]
    if cpx_name is None and name in PRESETS and not name.endswith("-complex"):
        cpx_name = f"{name}-complex"
    return substrate, load_spin_system(cpx_name) if cpx_name else None


def prepare_state(cfg: dict) -> DensityState:
    substrate, cpx = _systems(cfg)
    prep = cfg["preparation"]
    if prep["kind"] == "longitudinal":
        return prepare_longitudinal(substrate, prep["polarization"])
    if cpx is None:
        raise ConfigError("sabre preparation needs complex_system for a non-preset substrate")
    states = prepare_sabre(SabrePreparation(substrate, cpx, cfg["bp_tesla"], cfg["decohere_tol_hz"]))
    return {"substrate": states.rho_substrate, "complex": states.rho_complex, "h2": states.rho_h2}[prep["target"]]


def _flips(cfg: dict, system: SpinSystem) -> dict[str, float]:
    flips = uniform_flip(system, np.pi / 2)
    for sp, scale in cfg["pulse"]["flip_scale"].items():
        if sp not in flips:
            raise ConfigError(f"flip_scale names species {sp} absent from the system")
        flips[sp] *= float(scale)
    return flips


def _sha_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_spectrum1d_csv(freq: np.ndarray, amp: np.ndarray, path: Path) -> None:
    Spectrum1D(freq, amp).to_csv(path)


def _error(kind: str, message: str, code: int = 2) -> int:
    print(json.dumps({"error": {"type": kind, "message": message}}), file=sys.stderr)
    return code


def _out_dir(args: argparse.Namespace) -> Path:
    out = os.environ.get("ULFSPIN_OUT") or args.out or "ulfspin-out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------- simulate


def simulate(config: ExperimentConfig, out: Path, threads: int = 1) -> dict[str, Path]:
    """Run ``config`` and write its outputs into ``out``; returns name -> path."""
    cfg = config.data
    rho = prepare_state(cfg)
    system = rho.system
    H = build_hamiltonian(system, cfg["b0_tesla"])
    acq = config.acquisition
    seq = cfg["sequence"]
    files: dict[str, Path] = {}

    if seq["kind"] == "fafos":
        flips_scale = {sp: float(s) for sp, s in cfg["pulse"]["flip_scale"].items()}
        if flips_scale:
            raise ConfigError("flip_scale is only supported for COSY sequences")
        res = run_fafos(rho, H, int(seq["L"]), acq)
        path = out / "fafos_spectra.csv"
        with open(path, "w") as fh:
            fh.write("phi_deg,freq_hz,re,im,mag\n")
            for j, phi in enumerate(res.flip_angles):
                for f, a in zip(res.freq_axis, res.spectra[:, j]):
                    fh.write(f"{_g(np.degrees(phi))},{_g(f)},{_g(a.real)},{_g(a.imag)},{_g(abs(a))}\n")
        files["fafos_spectra"] = path
        coeffs = fourier_coefficients(res, int(seq["k_max"]))
        path = out / "fafos_coefficients.csv"
        with open(path, "w") as fh:
            fh.write("k,freq_hz,re,im,mag\n")
            for k, row in enumerate(coeffs, start=1):
                for f, c in zip(res.freq_axis, row):
                    fh.write(f"{k},{_g(f)},{_g(c.real)},{_g(c.imag)},{_g(abs(c))}\n")
        files["fafos_coefficients"] = path
        j = int(np.argmin(np.abs(np.degrees(res.flip_angles) - float(seq["export_flip_deg"]))))
        path = out / "spectrum_1d.csv"
        _write_spectrum1d_csv(res.freq_axis, res.spectra[:, j], path)
        files["spectrum_1d"] = path
    else:
        flips = _flips(cfg, system)
        t1 = t1_grid(float(seq["t1_start_s"]), float(seq["dt1_s"]), int(seq["n1"]))
        if seq["kind"] == "cosy":
            raw = run_cosy(rho, H, t1[0], float(seq["dt1_s"]), len(t1), (0.0, 0.0, 0.0), acq, flips)
            data = raw.combined()
            if cfg["analysis"]["write_raw"]:
                path = out / "cosy_raw.csv"
                write_cosy_csv(raw, path)
                files["cosy_raw"] = path
        else:
            scheme = PhaseCycleScheme.named(seq["scheme"])
            data = run_cosy_cycled(rho, H, t1, scheme, acq, flips, threads=threads)
        spec = fft_2d(data, (acq.broadening_hz, float(cfg["acquisition"]["broadening_indirect_hz"])))
        path = out / "spectrum_2d.csv"
        spec.to_csv(path)
        files["spectrum_2d"] = path
        path = out / "f2_projection.csv"
        with open(path, "w") as fh:
            fh.write("f2_hz,mag\n")
            for f, m in zip(spec.f2_hz, spec.f2_projection()):
                fh.write(f"{_g(f)},{_g(m)}\n")
        files["f2_projection"] = path
        sw = 1.0 / float(seq["dt1_s"])
        table = predict_qc_frequencies(system, cfg["b0_tesla"], sw, bool(cfg["analysis"]["include_opposed"]))
        if seq["kind"] == "cosy-cycled":
            table = PhaseCycleScheme.named(seq["scheme"]).filter_table(table)
        path = out / "qc_table.csv"
        write_qc_csv(table, path)
        files["qc_table"] = path
        ana = cfg["analysis"]
        assignments = assign_peaks(spec, table, float(ana["threshold_rel"]), float(ana["window_bins"]))
        path = out / "assignments.json"
        assignments.write(path)
        files["assignments"] = path

    manifest = {
        "tool": "ulfspin",
        "version": __version__,
        "config": cfg,
        "config_sha256": config.sha256,
        "outputs": {name: {"file": p.name, "sha256": _sha_file(p)} for name, p in sorted(files.items())},
    }
    digest = hashlib.sha256()
    for name in sorted(manifest["outputs"]):
        digest.update(f"{name}:{manifest['outputs'][name]['sha256']}\n".encode())
    manifest["content_sha256"] = digest.hexdigest()
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    files["manifest"] = path
    return files


def cmd_simulate(args: argparse.Namespace) -> int:
    config = load_config(args)
    out = _out_dir(args)
    files = simulate(config, out, threads=max(1, int(args.threads)))
    print(json.dumps({"status": "ok", "out": str(out), "files": sorted(p.name for p in files.values())}))
    return 0


# ------------------------------------------------------------- other cmds


def cmd_predict_qc(args: argparse.Namespace) -> int:
    system = load_spin_system(args.config or args.preset or "3fpy")
    if not args.sw > 0:
        raise ConfigError(f"sw must be > 0, got {args.sw}")
    table = predict_qc_frequencies(system, args.b0, args.sw, args.include_opposed)
    print(format_qc_table(table))
    if args.out or os.environ.get("ULFSPIN_OUT"):
        write_qc_csv(table, _out_dir(args) / "qc_table.csv")
    return 0


def cmd_fit_weights(args: argparse.Namespace) -> int:
    try:
        comps = [Spectrum1D.from_csv(p) for p in args.components]
        target = Spectrum1D.from_csv(args.target)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read spectra: {exc}") from None
    names = args.names or [Path(p).stem for p in args.components]
    if len(names) != len(comps):
        raise ConfigError("--names must match the number of components")
    result = fit_composite_weights(comps, target, names)
    doc = result.to_json(names)
    text = json.dumps(doc, indent=2)
    print(text)
    if args.out or os.environ.get("ULFSPIN_OUT"):
        (_out_dir(args) / "weights.json").write_text(text)
    return 0


def cmd_decompose(args: argparse.Namespace) -> int:
    config = load_config(args)
    cfg = config.data
    rho = prepare_state(cfg)
    if args.after_pulse:
        rho = hard_pulse(rho, _flips(cfg, rho.system), 0.0)
    dec = coherence_decompose(rho, traceless=True)
    rows = [
        {"p_h": lab.p_h, "p_f": lab.p_f, "label": lab.name, "magnitude": float(_g(mag))}
        for lab, mag in sorted(dec.items())
        if mag > 0
    ]
    text = json.dumps({"system": cfg["system"], "after_pulse": bool(args.after_pulse), "coherences": rows}, indent=2)
    print(text)
    if args.out or os.environ.get("ULFSPIN_OUT"):
        (_out_dir(args) / "decompose.json").write_text(text)
    return 0


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ulfspin", description="Ultralow-field NMR spin-dynamics simulator")
    parser.add_argument("--version", action="version", version=f"ulfspin {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (predict-qc: spin-system JSON)")
    common.add_argument("--preset", choices=PRESETS, help="bundled spin system")
    common.add_argument("--out", help="output directory (ULFSPIN_OUT overrides)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for phase-cycle steps")
    common.add_argument("--seed", type=int, default=None, help="reserved; the simulator is deterministic")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="run an experiment config")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("predict-qc", parents=[common], help="coherence frequency table")
    p.add_argument("--b0", type=float, default=DEFAULT_B0_TESLA, help="static field, T")
    p.add_argument("--sw", type=float, default=4000.0, help="indirect spectral width, Hz")
    p.add_argument("--include-opposed", action="store_true", help="also list T^H-F classes")
    p.set_defaults(func=cmd_predict_qc)

    p = sub.add_parser("fit-weights", parents=[common], help="fit component spectra to a target")
    p.add_argument("--components", nargs="+", required=True, help="Spectrum1D CSV files")
    p.add_argument("--target", required=True, help="Spectrum1D CSV file")
    p.add_argument("--names", nargs="+", help="component names")
    p.set_defaults(func=cmd_fit_weights)

    p = sub.add_parser("decompose", parents=[common], help="coherence map of a prepared state")
    p.add_argument("--after-pulse", action="store_true", help="apply the first 90 deg pulse before decomposing")
    p.set_defaults(func=cmd_decompose)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _error("ConfigError", str(exc))
    except (ValueError, KeyError, OSError) as exc:
        return _error(type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
