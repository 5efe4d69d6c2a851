"""FAFOS and COSY experiments with four-step phase cycling.

Pulses are ideal and act on every species. A coherence of total order
``p`` picks up ``exp(-i p phi)`` under a pulse of phase ``phi``; the detector
reads the ``+1`` coherence, and receiver rotation multiplies each record by
``exp(-i phi_rec)`` before the records are summed.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dynamics import DensityState, Fid, acquire, detection_operator, hard_pulse, rotation_operator, uniform_flip
from .spectra import Spectrum1D, TimeData2D, fft_1d, order_block
from .spinsys import Hamiltonian, SpinSystem

DEG = np.pi / 180


@dataclass(frozen=True)
class AcquisitionParams:
    """Direct-dimension sampling and processing."""

    n_points: int = 1024
    dwell_s: float = 50e-6
    broadening_hz: float = 0.5

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if not self.dwell_s > 0:
            raise ValueError("dwell_s must be > 0")
        if self.broadening_hz < 0:
            raise ValueError("broadening_hz must be >= 0")


# ------------------------------------------------------------------ FAFOS


@dataclass(frozen=True, eq=False)
class FafosResult:
    """``spectra[i, j]``: amplitude at ``freq_axis[i]`` for flip ``flip_angles[j]``."""

    flip_angles: np.ndarray
    spectra: np.ndarray
    freq_axis: np.ndarray
    labels: tuple[str, ...] = ()


def fafos_angles(L: int) -> np.ndarray:
    """``phi_j = 2 pi j / L`` for ``j = 1..L``."""
    if L < 8:
        raise ValueError(f"FAFOS needs L >= 8, got {L}")
    return 2 * np.pi * np.arange(1, L + 1) / L


def run_fafos(rho0: DensityState, H: Hamiltonian, L: int, acq: AcquisitionParams = AcquisitionParams()) -> FafosResult:
    """Flip-angle sweep: x pulse of ``phi_j`` on every species, acquire, FFT."""
    phis = fafos_angles(L)
    cols = []
    freq = None
    for phi in phis:
        rho = hard_pulse(rho0, uniform_flip(rho0.system, phi), 0.0)
        spec = fft_1d(acquire(rho, H, acq.n_points, acq.dwell_s), acq.broadening_hz)
        freq = spec.freq_hz
        cols.append(spec.amp)
    return FafosResult(flip_angles=phis, spectra=np.column_stack(cols), freq_axis=freq)


def antiphase_operator(system: SpinSystem, spin: int, partners: Sequence[int]) -> np.ndarray:
    """``I_+^spin prod_k 2 I_z^k``: the detected coherence of ``spin`` dressed by partners."""
    op = system.op("p", spin).copy()
    for k in partners:
        op = op @ (2 * system.op("z", k))
    return op


def coherence_amplitude(state: DensityState, operator: np.ndarray) -> complex:
    """Coefficient of ``operator`` in the deviation of ``state``.

    Scaled by the Hilbert dimension, and rotated by ``-i`` so that an x pulse
    of angle ``phi`` on the order ``2 I_z`` reads ``sin(phi)``.
    """
    num = np.vdot(operator, state.matrix)
    den = np.vdot(operator, operator).real
    return complex(-1j * state.dim * num / den)


def fafos_amplitudes(
    rho0: DensityState,
    L: int,
    targets: Sequence[tuple[int, Sequence[int]]],
) -> FafosResult:
    """Flip-angle sweep read out by projection onto detected coherences.

    Each target ``(spin, partners)`` is the antiphase coherence
    ``I_+^spin prod 2 I_z^partner``, taken immediately after the pulse. This
    stays meaningful on uncoupled systems, where antiphase terms give no net
    signal in an acquisition.
    """
    phis = fafos_angles(L)
    ops = [antiphase_operator(rho0.system, s, p) for s, p in targets]
    amps = np.empty((len(ops), L), dtype=complex)
    for j, phi in enumerate(phis):
        rho = hard_pulse(rho0, uniform_flip(rho0.system, phi), 0.0)
        for i, op in enumerate(ops):
            amps[i, j] = coherence_amplitude(rho, op)
    labels = tuple(
        "I+" + rho0.system.labels[s] + "".join("·2Iz" + rho0.system.labels[k] for k in p) for s, p in targets
    )
    return FafosResult(flip_angles=phis, spectra=amps, freq_axis=np.zeros(len(ops)), labels=labels)


def fourier_coefficients(result: FafosResult, k_max: int) -> np.ndarray:
    """``c_k = sum_j S(:, phi_j) sin(k phi_j)`` for ``k = 1..k_max``; shape ``(k_max, n_freq)``."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    k = np.arange(1, k_max + 1)
    basis = np.sin(np.outer(k, result.flip_angles))
    return basis @ result.spectra.T


def analytic_fafos_response(n: int, phi) -> np.ndarray | float:
    """``sin(phi) cos(phi)^(n-1)`` for a pure n-spin longitudinal order."""
    if not 1 <= n <= 5:
        raise ValueError(f"n must be 1..5, got {n}")
    phi = np.asarray(phi, dtype=float)
    out = np.sin(phi) * np.cos(phi) ** (n - 1)
    return float(out) if out.ndim == 0 else out


# ------------------------------------------------------------------- COSY


@dataclass(frozen=True)
class PhaseCycleScheme:
    """Four-step ``(phi1, phi2, phi_rec)`` cycle in degrees."""

    name: str
    steps: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        if not self.steps:
            raise ValueError("a phase cycle needs at least one step")
        if self.name in NAMED_RECEIVER:
            if len(self.steps) != 4 or any(v % 90 for st in self.steps for v in st):
                raise ValueError(f"scheme {self.name} needs four steps in multiples of 90 deg")

    @classmethod
    def named(cls, name: str) -> "PhaseCycleScheme":
        try:
            rec = NAMED_RECEIVER[name]
        except KeyError:
            raise ValueError(f"unknown phase-cycle scheme {name!r}; choose from A, B, C, D") from None
        return cls(name, tuple((p1, 0.0, r) for p1, r in zip((0.0, 90.0, 180.0, 270.0), rec)))

    def pathway_gain(self, p1: int, p2: int = 1) -> complex:
        """Summed phase factor of the pathway ``0 -> p1 -> p2``."""
        total = 0j
        for phi1, phi2, rec in self.steps:
            total += np.exp(-1j * (p1 * phi1 + (p2 - p1) * phi2 + rec) * DEG)
        return total

    def selected_orders(self, max_order: int = 8) -> list[int]:
        """``p1`` values passed with full gain."""
        return [p for p in range(-max_order, max_order + 1) if self.passes(p)]

    def passes(self, p1: int) -> bool:
        """True when the pathway ``0 -> p1 -> 1`` survives the cycle."""
        return abs(self.pathway_gain(p1)) > len(self.steps) - 1e-9

    def filter_table(self, table):
        """Table entries whose total order the cycle passes."""
        return [e for e in table if self.passes(e.label.order)]

    @property
    def residue(self) -> int | None:
        """Selected class of ``p1`` modulo 4 (``None`` for irregular cycles)."""
        sel = {p % 4 for p in self.selected_orders()}
        return sel.pop() if len(sel) == 1 else None


NAMED_RECEIVER = {
    "A": (0.0, 270.0, 180.0, 90.0),
    "B": (0.0, 90.0, 180.0, 270.0),
    "C": (0.0, 180.0, 0.0, 180.0),
    "D": (0.0, 0.0, 0.0, 0.0),
}


@dataclass(frozen=True, eq=False)
class CosyRaw:
    t1_values: np.ndarray
    fids: list[Fid]
    phases: list[tuple[float, float, float]]
    t1_index: np.ndarray = field(default=None)
    step_index: np.ndarray = field(default=None)

    def records(self, step: int = 0) -> np.ndarray:
        """FIDs of one phase step stacked as ``(n1, n_points)``."""
        sel = np.flatnonzero(self.step_index == step)
        return np.stack([self.fids[i].samples for i in sel])

    def combined(self, step: int = 0) -> TimeData2D:
        fid = self.fids[0]
        dt1 = float(self.t1_values[1] - self.t1_values[0])
        return TimeData2D(self.records(step), fid.dwell_s, dt1, float(self.t1_values[0]))


def t1_grid(t1_start: float, dt1: float, n1: int) -> np.ndarray:
    if not dt1 > 0:
        raise ValueError("dt1 must be > 0")
    if n1 < 2:
        raise ValueError("n1 must be >= 2")
    if t1_start < 0:
        raise ValueError("t1_start must be >= 0")
    return t1_start + dt1 * np.arange(n1)


def _cosy_block(
    rho1: np.ndarray,
    H: Hamiltonian,
    t1: np.ndarray,
    u2: np.ndarray,
    detector: np.ndarray,
    acq: AcquisitionParams,
) -> np.ndarray:
    """FIDs for every ``t1`` from the post-first-pulse matrix ``rho1``.

    Works in the eigenbasis of ``H``: free evolution there is a phase per
    element, and the acquisition is a sum of exponentials shared by all
    ``t1`` records.
    """
    e = H.energies
    w = e[:, None] - e[None, :]
    r1 = H.to_eigenbasis(rho1)
    u2e = H.to_eigenbasis(u2)
    de = H.to_eigenbasis(detector)
    mask = np.abs(de.T) > 1e-14 * max(1.0, np.abs(de).max())
    d_sel = de.T[mask]
    w_sel = -w[mask]
    t = acq.dwell_s * np.arange(acq.n_points)
    kernel = np.exp(1j * np.outer(w_sel, t))
    out = np.empty((len(t1), acq.n_points), dtype=complex)
    for k, tk in enumerate(t1):
        r = r1 * np.exp(-1j * w * tk)
        r2 = u2e @ r @ u2e.conj().T
        out[k] = (r2[mask] * d_sel) @ kernel
    return out


def run_cosy(
    rho0: DensityState,
    H: Hamiltonian,
    t1_start: float,
    dt1: float,
    n1: int,
    phases: tuple[float, float, float] = (0.0, 0.0, 0.0),
    acq: AcquisitionParams = AcquisitionParams(),
    flips: dict[str, float] | None = None,
) -> CosyRaw:
    """Two-pulse COSY: ``90(phi1) - t1 - 90(phi2) - acquire(phi_rec)``.

    ``phases`` are radians. ``flips`` overrides the nominal 90 deg per species.
    """
    t1 = t1_grid(t1_start, dt1, n1)
    data = _run_cosy_data(rho0, H, t1, phases, acq, flips)
    fids = [Fid(row, acq.dwell_s) for row in data]
    return CosyRaw(
        t1_values=t1,
        fids=fids,
        phases=[tuple(phases)] * n1,
        t1_index=np.arange(n1),
        step_index=np.zeros(n1, dtype=int),
    )


def _deviation(rho: DensityState) -> np.ndarray:
    """Traceless part of ``rho``; the identity carries no signal and stays exact."""
    m = rho.matrix
    return m - np.trace(m) / rho.dim * np.eye(rho.dim)


def _run_cosy_data(rho0, H, t1, phases, acq, flips=None) -> np.ndarray:
    system = rho0.system
    flips = flips or uniform_flip(system, np.pi / 2)
    phi1, phi2, rec = phases
    u1 = rotation_operator(system, flips, phi1)
    rho1 = u1 @ _deviation(rho0) @ u1.conj().T
    u2 = rotation_operator(system, flips, phi2)
    data = _cosy_block(rho1, H, t1, u2, detection_operator(system), acq)
    return np.exp(-1j * rec) * data


def run_cosy_cycled(
    rho0: DensityState,
    H: Hamiltonian,
    t1: np.ndarray,
    scheme: PhaseCycleScheme,
    acq: AcquisitionParams = AcquisitionParams(),
    flips: dict[str, float] | None = None,
    threads: int = 1,
) -> TimeData2D:
    """Sum of the receiver-rotated records of every step of ``scheme``."""
    t1 = np.asarray(t1, dtype=float)
    if t1.size < 2 or np.any(np.diff(t1) <= 0) or not np.allclose(np.diff(t1), t1[1] - t1[0]):
        raise ValueError("t1 grid must be uniform and increasing with at least 2 points")
    steps = [tuple(v * DEG for v in st) for st in scheme.steps]

    def one(st):
        return _run_cosy_data(rho0, H, t1, st, acq, flips)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, steps))
    else:
        parts = [one(st) for st in steps]
    total = np.zeros_like(parts[0])
    for part in parts:
        total = total + part
    return TimeData2D(total, acq.dwell_s, float(t1[1] - t1[0]), float(t1[0]))


def order_resolved_cosy(
    rho0: DensityState,
    H: Hamiltonian,
    t1: np.ndarray,
    acq: AcquisitionParams = AcquisitionParams(),
    flips: dict[str, float] | None = None,
) -> dict[int, TimeData2D]:
    """Uncycled COSY split by the total order ``p1`` present during ``t1``."""
    system = rho0.system
    flips = flips or uniform_flip(system, np.pi / 2)
    t1 = np.asarray(t1, dtype=float)
    u2 = rotation_operator(system, flips, 0.0)
    rho1 = u2 @ _deviation(rho0) @ u2.conj().T
    det = detection_operator(system)
    out = {}
    n = len(system)
    for p in range(-n, n + 1):
        block = order_block(rho1, system, [p])
        if not np.any(block):
            continue
        data = _cosy_block(block, H, t1, u2, det, acq)
        out[p] = TimeData2D(data, acq.dwell_s, float(t1[1] - t1[0]), float(t1[0]))
    return out


# ----------------------------------------------------------------- export


def write_cosy_csv(raw: CosyRaw, path: str | Path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t1_s", "phase_step", "t_s", "re", "im"])
        for fid, t1i, step in zip(raw.fids, raw.t1_index, raw.step_index):
            t1 = raw.t1_values[t1i]
            for t, s in zip(fid.times, fid.samples):
                w.writerow([f"{t1:.12g}", int(step), f"{t:.12g}", f"{s.real:.12g}", f"{s.imag:.12g}"])


def write_cosy_sidecar(raw: CosyRaw, path: str | Path, timing: dict | None = None) -> None:
    meta = {
        "t1_start_s": float(raw.t1_values[0]),
        "dt1_s": float(raw.t1_values[1] - raw.t1_values[0]),
        "n1": int(len(raw.t1_values)),
        "phases_deg": sorted({tuple(round(float(v) / DEG, 9) for v in ph) for ph in raw.phases}),
        "dwell_s": raw.fids[0].dwell_s,
        "n_points": int(raw.fids[0].samples.size),
        "timing": timing or {},
    }
    Path(path).write_text(json.dumps(meta, indent=2))
