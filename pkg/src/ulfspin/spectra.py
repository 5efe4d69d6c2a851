"""Spectral processing, coherence bookkeeping, QC prediction and fitting."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import nnls

from .dynamics import DensityState, Fid
from .spinsys import SpinSystem, larmor_frequency

logger = logging.getLogger(__name__)

SPECIES_TAG = {"H1": "H", "F19": "F"}


# ---------------------------------------------------------------- containers


@dataclass(frozen=True, eq=False)
class Spectrum1D:
    freq_hz: np.ndarray
    amp: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.freq_hz, dtype=float)
        a = np.asarray(self.amp, dtype=complex)
        if f.shape != a.shape or f.ndim != 1:
            raise ValueError("axis and amplitudes must be matching 1D arrays")
        if f.size > 1:
            d = np.diff(f)
            if np.any(d <= 0) or not np.allclose(d, d[0], rtol=1e-9, atol=0):
                raise ValueError("frequency axis must be strictly increasing and uniform")
        object.__setattr__(self, "freq_hz", f)
        object.__setattr__(self, "amp", a)

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.amp)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["freq_hz", "re", "im", "mag"])
            for f, a in zip(self.freq_hz, self.amp):
                w.writerow([_g(f), _g(a.real), _g(a.imag), _g(abs(a))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Spectrum1D":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1] + 1j * data[:, 2])


@dataclass(frozen=True, eq=False)
class Spectrum2D:
    """2D spectrum; ``amp[i2, i1]`` pairs ``f2_hz[i2]`` (indirect) with ``f1_hz[i1]`` (direct)."""

    f1_hz: np.ndarray
    f2_hz: np.ndarray
    amp: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.amp, dtype=complex)
        if a.shape != (len(self.f2_hz), len(self.f1_hz)):
            raise ValueError(f"amp shape {a.shape} does not match axes")
        object.__setattr__(self, "amp", a)

    @property
    def sw2_hz(self) -> float:
        return len(self.f2_hz) * self.bin2_hz

    @property
    def bin2_hz(self) -> float:
        return float(self.f2_hz[1] - self.f2_hz[0]) if len(self.f2_hz) > 1 else 0.0

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.amp)

    def f2_projection(self, f1_range: tuple[float, float] | None = None) -> np.ndarray:
        """Skyline (max magnitude over ``f1``) along the indirect axis."""
        mag = self.magnitude
        if f1_range is not None:
            sel = (self.f1_hz >= f1_range[0]) & (self.f1_hz <= f1_range[1])
            mag = mag[:, sel]
        return mag.max(axis=1) if mag.size else np.zeros(len(self.f2_hz))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["f1_hz", "f2_hz", "re", "im", "mag"])
            for i2, f2 in enumerate(self.f2_hz):
                for i1, f1 in enumerate(self.f1_hz):
                    a = self.amp[i2, i1]
                    w.writerow([_g(f1), _g(f2), _g(a.real), _g(a.imag), _g(abs(a))])


@dataclass(frozen=True, eq=False)
class TimeData2D:
    """Complex ``data[k, j]`` sampled at ``t1 = t1_start + k dt1`` and ``t = j dwell``."""

    data: np.ndarray
    dwell_s: float
    dt1_s: float
    t1_start_s: float = 0.0

    @property
    def t1_values(self) -> np.ndarray:
        return self.t1_start_s + self.dt1_s * np.arange(self.data.shape[0])


def _g(x: float) -> str:
    return f"{x:.12g}"


# ------------------------------------------------------------------- FFT


def _next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def _apodize_fft(data: np.ndarray, dwell_s: float, broadening_hz: float, axis: int) -> tuple[np.ndarray, np.ndarray]:
    if broadening_hz < 0:
        raise ValueError("broadening must be >= 0")
    n = data.shape[axis]
    t = dwell_s * np.arange(n)
    shape = [1] * data.ndim
    shape[axis] = n
    window = np.exp(-np.pi * broadening_hz * t).reshape(shape)
    nfft = _next_pow2(n)
    spec = np.fft.fftshift(np.fft.fft(data * window, n=nfft, axis=axis), axes=axis)
    freq = np.fft.fftshift(np.fft.fftfreq(nfft, d=dwell_s))
    return freq, spec


def fft_1d(fid: Fid, broadening_hz: float = 0.5) -> Spectrum1D:
    """Exponential line broadening, zero fill to a power of two, FFT.

    Apodization time is measured from the first sample.
    """
    freq, spec = _apodize_fft(np.asarray(fid.samples), fid.dwell_s, broadening_hz, axis=0)
    return Spectrum1D(freq, spec)


def fft_2d(cosy: TimeData2D, broadening: tuple[float, float] = (0.5, 0.5)) -> Spectrum2D:
    """FFT along the direct time, then along ``t1``; both axes centered.

    ``broadening`` is ``(direct, indirect)`` in Hz.
    """
    f1, s = _apodize_fft(np.asarray(cosy.data, dtype=complex), cosy.dwell_s, broadening[0], axis=1)
    f2, s = _apodize_fft(s, cosy.dt1_s, broadening[1], axis=0)
    return Spectrum2D(f1_hz=f1, f2_hz=f2, amp=s)


# ------------------------------------------------------------- coherences


@dataclass(frozen=True, order=True)
class CoherenceLabel:
    """Per-species coherence orders (summed over spins of each species)."""

    p_h: int
    p_f: int = 0

    @property
    def order(self) -> int:
        return self.p_h + self.p_f

    @property
    def name(self) -> str:
        return qc_name(self.p_h, self.p_f)


def qc_name(p_h: int, p_f: int) -> str:
    """Label in the ``T_n^H`` / ``T_n^HF`` / ``T_n^H-F`` convention.

    ``H-F`` marks a fluorine quantum opposed to the net order; the
    zero-order H/F flip-flop keeps the ``HF`` tag.
    """
    n = p_h + p_f
    if p_f == 0:
        kind = "H"
    elif n != 0 and np.sign(p_f) != np.sign(n):
        kind = "H-F"
    else:
        kind = "HF"
    return f"T{n:+d}^{kind}" if n else f"T0^{kind}"


def _species_orders(system: SpinSystem) -> tuple[np.ndarray, np.ndarray]:
    kinds = set(system.species)
    unsupported = kinds - set(SPECIES_TAG)
    if unsupported:
        raise ValueError(f"unsupported species {sorted(unsupported)}")
    mh = system.species_m("H1")
    mf = system.species_m("F19")
    p_h = np.rint(mh[:, None] - mh[None, :]).astype(int)
    p_f = np.rint(mf[:, None] - mf[None, :]).astype(int)
    return p_h, p_f


def coherence_decompose(
    state: DensityState | np.ndarray,
    system: SpinSystem | None = None,
    traceless: bool = False,
) -> dict[CoherenceLabel, float]:
    """Frobenius weight of each ``(p_h, p_f)`` coherence class.

    Element ``(r, s)`` belongs to the class ``(M_H(r) - M_H(s), M_F(r) - M_F(s))``.
    Returns the square root of the summed squared magnitudes per class.
    ``traceless`` removes the identity part first, so that only the spin
    order (deviation) is decomposed.
    """
    if isinstance(state, DensityState):
        matrix, system = state.matrix, state.system
    else:
        matrix = np.asarray(state)
        if system is None:
            raise ValueError("a raw matrix needs its spin system")
    if traceless:
        matrix = matrix - np.trace(matrix) / system.dim * np.eye(system.dim)
    p_h, p_f = _species_orders(system)
    w2 = np.abs(matrix) ** 2
    out: dict[CoherenceLabel, float] = {}
    for ph, pf in sorted(set(zip(p_h.ravel().tolist(), p_f.ravel().tolist()))):
        mask = (p_h == ph) & (p_f == pf)
        out[CoherenceLabel(ph, pf)] = float(np.sqrt(w2[mask].sum()))
    return out


def total_order_weights(decomposition: dict[CoherenceLabel, float]) -> dict[int, float]:
    """Collapse a decomposition onto total order ``p_h + p_f``."""
    acc: dict[int, float] = {}
    for lab, w in decomposition.items():
        acc[lab.order] = acc.get(lab.order, 0.0) + w**2
    return {p: float(np.sqrt(v)) for p, v in sorted(acc.items())}


def total_order_matrix(system: SpinSystem) -> np.ndarray:
    m = system.total_m
    return np.rint(m[:, None] - m[None, :]).astype(int)


def order_block(matrix: np.ndarray, system: SpinSystem, orders: Iterable[int]) -> np.ndarray:
    """Keep only elements whose total coherence order is in ``orders``."""
    p = total_order_matrix(system)
    return np.where(np.isin(p, list(orders)), matrix, 0)


# --------------------------------------------------------------- QC table


def alias_frequency(nu_hz, sw_hz: float):
    """Fold ``nu`` into ``[-sw/2, sw/2)``; a tie at ``+sw/2`` maps to ``-sw/2``."""
    if not sw_hz > 0:
        raise ValueError(f"spectral width must be > 0, got {sw_hz}")
    nu = np.asarray(nu_hz, dtype=float)
    out = nu - sw_hz * np.floor(nu / sw_hz + 0.5)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class QcTableEntry:
    label: CoherenceLabel
    true_freq_hz: float
    aliased_freq_hz: float

    @property
    def name(self) -> str:
        return self.label.name

    @property
    def opposed(self) -> bool:
        return self.name.endswith("H-F")

    def as_row(self) -> dict:
        return {
            "p_h": self.label.p_h,
            "p_f": self.label.p_f,
            "label": self.name,
            "true_hz": self.true_freq_hz,
            "aliased_hz": self.aliased_freq_hz,
        }


def predict_qc_frequencies(
    system: SpinSystem,
    b0_tesla: float,
    sw_hz: float,
    include_opposed: bool = False,
) -> list[QcTableEntry]:
    """Enumerate coherence classes with their precession and folded frequencies.

    A class ``(p_h, p_f)`` precesses at ``p_h nu_H + p_f nu_F`` (bare Larmor
    frequencies). ``include_opposed`` adds the ``T^H-F`` classes, whose
    fluorine quantum runs against the net order.
    """
    if not sw_hz > 0:
        raise ValueError(f"spectral width must be > 0, got {sw_hz}")
    kinds = set(system.species)
    if len(kinds) > 2 or kinds - set(SPECIES_TAG):
        raise ValueError(f"need at most the species H1 and F19, got {sorted(kinds)}")
    n_h = len(system.indices_of("H1"))
    n_f = len(system.indices_of("F19"))
    nu_h = larmor_frequency("H1", b0_tesla)
    nu_f = larmor_frequency("F19", b0_tesla)
    rows = []
    for p_h in range(-n_h, n_h + 1):
        for p_f in range(-n_f, n_f + 1):
            lab = CoherenceLabel(p_h, p_f)
            true = p_h * nu_h + p_f * nu_f
            entry = QcTableEntry(lab, true, alias_frequency(true, sw_hz))
            if entry.opposed and not include_opposed:
                continue
            rows.append(entry)
    rows.sort(key=lambda e: (abs(e.label.order), e.label.order, e.label.p_h))
    return rows


def write_qc_csv(table: Sequence[QcTableEntry], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p_h", "p_f", "label", "true_hz", "aliased_hz"])
        for e in table:
            w.writerow([e.label.p_h, e.label.p_f, e.name, _g(e.true_freq_hz), _g(e.aliased_freq_hz)])


def format_qc_table(table: Sequence[QcTableEntry]) -> str:
    lines = [f"{'label':<10}{'p_h':>5}{'p_f':>5}{'true_hz':>14}{'aliased_hz':>14}"]
    for e in table:
        lines.append(
            f"{e.name:<10}{e.label.p_h:>5}{e.label.p_f:>5}{e.true_freq_hz:>14.1f}{e.aliased_freq_hz:>14.1f}"
        )
    return "\n".join(lines)


# ------------------------------------------------------------- assignment


@dataclass
class PeakAssignment:
    f2_hz: float
    height_rel: float
    candidates: list[QcTableEntry]
    f1_hz: float = 0.0

    @property
    def status(self) -> str:
        if not self.candidates:
            return "unassigned"
        return "assigned" if len(self.candidates) == 1 else "ambiguous"

    @property
    def key(self) -> frozenset:
        return frozenset(c.label for c in self.candidates)

    def as_dict(self) -> dict:
        return {
            "f1_hz": float(_g(self.f1_hz)),
            "f2_hz": float(_g(self.f2_hz)),
            "height_rel": float(_g(self.height_rel)),
            "status": self.status,
            "labels": [c.name for c in self.candidates],
            "orders": [[c.label.p_h, c.label.p_f] for c in self.candidates],
            "table_hz": [float(_g(c.aliased_freq_hz)) for c in self.candidates],
        }


@dataclass
class Assignments:
    peaks: list[PeakAssignment] = field(default_factory=list)
    bin_hz: float = 0.0

    def __iter__(self):
        return iter(self.peaks)

    def __len__(self):
        return len(self.peaks)

    @property
    def matched(self) -> list[PeakAssignment]:
        return [p for p in self.peaks if p.candidates]

    @property
    def groups(self) -> list[frozenset]:
        """Distinct candidate sets hit by at least one peak."""
        return sorted({p.key for p in self.matched}, key=lambda g: sorted(g))

    @property
    def distinct_frequencies(self) -> int:
        return len(self.groups)

    @property
    def ambiguous_groups(self) -> list[frozenset]:
        return [g for g in self.groups if len(g) > 1]

    def orders_above(self, rel: float) -> set[int]:
        """Absolute total orders of unambiguously assigned peaks above ``rel``."""
        return {
            abs(p.candidates[0].label.order)
            for p in self.peaks
            if p.status == "assigned" and p.height_rel > rel
        }

    def candidate_orders_above(self, rel: float) -> set[int]:
        """Absolute total orders of every candidate of matched peaks above ``rel``."""
        return {abs(c.label.order) for p in self.matched if p.height_rel > rel for c in p.candidates}

    def to_json(self) -> dict:
        return {
            "bin_hz": float(_g(self.bin_hz)),
            "distinct_frequencies": self.distinct_frequencies,
            "ambiguous_groups": [sorted(qc_name(l.p_h, l.p_f) for l in g) for g in self.ambiguous_groups],
            "peaks": [p.as_dict() for p in self.peaks],
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def _circular_distance(a: np.ndarray, b: float, period: float) -> np.ndarray:
    d = np.abs(a - b) % period
    return np.minimum(d, period - d)


def assign_peaks(
    spec: Spectrum2D,
    table: Sequence[QcTableEntry],
    threshold_rel: float = 0.01,
    window_bins: float = 2.0,
    reference_max: float | None = None,
) -> Assignments:
    """Match 2D magnitude maxima to predicted coherence frequencies by ``f2``.

    A peak is a point no smaller than its eight neighbours (both axes
    periodic) and at least ``threshold_rel * reference_max``; the reference
    defaults to the spectrum's own maximum. Every table entry within
    ``window_bins`` indirect bins of a peak is a candidate: one candidate is
    an assignment, several make the peak ambiguous, none leaves it
    unassigned. Peaks are listed by decreasing height.
    """
    from scipy.ndimage import maximum_filter

    if not 0 < threshold_rel < 1:
        raise ValueError("threshold_rel must lie in (0, 1)")
    mag = spec.magnitude
    out = Assignments(bin_hz=spec.bin2_hz)
    top = float(mag.max()) if mag.size else 0.0
    ref = top if reference_max is None else float(reference_max)
    if top <= 0 or ref <= 0:
        return out
    is_peak = (mag == maximum_filter(mag, size=3, mode="wrap")) & (mag >= threshold_rel * ref) & (mag > 0)
    i2, i1 = np.nonzero(is_peak)
    order = np.lexsort((i1, i2, -mag[i2, i1]))
    table_f = np.array([e.aliased_freq_hz for e in table])
    sw = spec.sw2_hz
    window = window_bins * spec.bin2_hz * (1 + 1e-9)
    for k in order:
        f2 = float(spec.f2_hz[i2[k]])
        cands: list[QcTableEntry] = []
        if table_f.size:
            dist = _circular_distance(table_f, f2, sw)
            near = np.argsort(dist, kind="stable")
            cands = [table[j] for j in near if dist[j] <= window]
        out.peaks.append(PeakAssignment(f2, float(mag[i2[k], i1[k]] / ref), cands, float(spec.f1_hz[i1[k]])))
    return out


# ---------------------------------------------------------------- fitting


class FitError(ValueError):
    pass


@dataclass
class FitResult:
    weights: np.ndarray
    residual_rel: float
    warnings: list[str] = field(default_factory=list)

    def to_json(self, names: Sequence[str] | None = None) -> dict:
        names = list(names) if names is not None else [f"c{i}" for i in range(len(self.weights))]
        return {
            "weights": {n: float(f"{w:.12g}") for n, w in zip(names, self.weights)},
            "residual_rel": float(f"{self.residual_rel:.12g}"),
            "normalization": "each component scaled to unit maximum magnitude",
            "warnings": self.warnings,
        }


def _on_axis(spec: Spectrum1D, axis: np.ndarray) -> np.ndarray:
    return np.interp(axis, spec.freq_hz, spec.magnitude, left=0.0, right=0.0)


def fit_composite_weights(
    components: Sequence[Spectrum1D],
    target: Spectrum1D,
    names: Sequence[str] | None = None,
) -> FitResult:
    """Non-negative least-squares weights of magnitude spectra.

    Each component is scaled to unit maximum magnitude first; the weights
    are reported in that normalization. Spectra on a different axis than the
    first component are linearly resampled onto it (with a warning).
    """
    if not components:
        raise FitError("need at least one component")
    names = list(names) if names is not None else [f"component {i}" for i in range(len(components))]
    axis = components[0].freq_hz
    notes = []
    cols = []
    for name, comp in zip(names, components):
        if comp.freq_hz.shape == axis.shape and np.allclose(comp.freq_hz, axis):
            mag = comp.magnitude
        else:
            notes.append(f"{name} resampled onto the first component's axis")
            mag = _on_axis(comp, axis)
        peak = mag.max() if mag.size else 0.0
        if not peak > 0:
            raise FitError(f"{name} is identically zero")
        cols.append(mag / peak)
    if target.freq_hz.shape == axis.shape and np.allclose(target.freq_hz, axis):
        b = target.magnitude
    else:
        notes.append("target resampled onto the component axis")
        b = _on_axis(target, axis)
    a = np.column_stack(cols)
    w, _ = nnls(a, b)
    norm_b = np.linalg.norm(b)
    resid = np.linalg.norm(a @ w - b) / norm_b if norm_b > 0 else 0.0
    for note in notes:
        logger.warning(note)
    return FitResult(weights=w, residual_rel=float(resid), warnings=notes)
