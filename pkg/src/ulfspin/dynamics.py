"""Density matrices, pulses, free evolution and FID acquisition."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.linalg import expm

from .spinsys import MAX_SPINS, Hamiltonian, Nucleus, SpinSystem

logger = logging.getLogger(__name__)

HERMITIAN_TOL = 1e-12
DEFAULT_DECOHERE_TOL_HZ = 0.01


class NyquistWarning(UserWarning):
    """Detectable transitions fall outside the sampled bandwidth."""


@dataclass(frozen=True, eq=False)
class DensityState:
    """Hermitian, unit-trace density matrix living on ``system``."""

    matrix: np.ndarray
    system: SpinSystem

    def __post_init__(self):
        rho = np.array(self.matrix, dtype=complex)
        d = self.system.dim
        if rho.shape != (d, d):
            raise ValueError(f"density matrix must be {d}x{d}, got {rho.shape}")
        scale = max(1.0, float(np.abs(rho).max()))
        if np.abs(rho - rho.conj().T).max() > HERMITIAN_TOL * scale:
            raise ValueError("density matrix is not Hermitian")
        if abs(np.trace(rho) - 1) > 1e-10:
            raise ValueError(f"density matrix trace is {np.trace(rho)!r}, expected 1")
        rho.setflags(write=False)
        object.__setattr__(self, "matrix", rho)

    @property
    def dim(self) -> int:
        return self.system.dim

    def expect(self, operator: np.ndarray) -> complex:
        return complex(np.trace(self.matrix @ operator))

    def _replace(self, matrix: np.ndarray) -> "DensityState":
        return DensityState(matrix=matrix, system=self.system)


def maximally_mixed(system: SpinSystem) -> DensityState:
    return DensityState(np.eye(system.dim, dtype=complex) / system.dim, system)


@dataclass(frozen=True, eq=False)
class Fid:
    samples: np.ndarray
    dwell_s: float
    t0_s: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=complex)
        if s.ndim != 1 or s.size < 1:
            raise ValueError("FID needs at least one sample")
        if not self.dwell_s > 0:
            raise ValueError(f"dwell must be > 0, got {self.dwell_s}")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def times(self) -> np.ndarray:
        return self.t0_s + self.dwell_s * np.arange(self.samples.size)

    def to_csv(self, path: str | Path) -> None:
        write_fid_csv(self, path)


def write_fid_csv(fid: Fid, path: str | Path) -> None:
    """Write ``t_s, re, im`` columns."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "re", "im"])
        for t, s in zip(fid.times, fid.samples):
            w.writerow([f"{t:.12g}", f"{s.real:.12g}", f"{s.imag:.12g}"])


def read_fid_csv(path: str | Path) -> Fid:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, 0]
    dwell = float(t[1] - t[0]) if len(t) > 1 else 1.0
    return Fid(samples=data[:, 1] + 1j * data[:, 2], dwell_s=dwell, t0_s=float(t[0]))


def detection_operator(system: SpinSystem) -> np.ndarray:
    """Gamma-weighted quadrature pickup ``sum_i (gamma_i / gamma_H) I_-^i``.

    ``Tr(rho D)`` returns the ``I_+`` content of ``rho``, which precesses at
    ``+nu``, so detected lines sit at positive frequencies.
    """
    d = np.zeros((system.dim, system.dim), dtype=complex)
    g_ref = 42.5770
    for i, nuc in enumerate(system.nuclei):
        d += (nuc.gamma / g_ref) * system.op("m", i)
    return d


def singlet_pair_density() -> np.ndarray:
    """``|S><S|`` for two spins-1/2, ``|S> = (|ud> - |du>)/sqrt(2)``."""
    s = np.array([0, 1, -1, 0], dtype=complex) / np.sqrt(2)
    return np.outer(s, s.conj())


def _merged_system(a: SpinSystem, b: SpinSystem) -> SpinSystem:
    n = len(a) + len(b)
    j = np.zeros((n, n))
    j[: len(a), : len(a)] = a.j_hz
    j[len(a) :, len(a) :] = b.j_hz
    return SpinSystem(nuclei=a.nuclei + b.nuclei, j_hz=j, name=f"{a.name}+{b.name}")


def tensor_state(a: DensityState, b: DensityState, system: SpinSystem | None = None) -> DensityState:
    """Kronecker product ``a (x) b``.

    ``system`` supplies the combined spin system (with cross couplings); when
    omitted the two systems are concatenated without cross couplings.
    """
    n = len(a.system) + len(b.system)
    if n > MAX_SPINS:
        raise ValueError(f"combined state has {n} spins, limit is {MAX_SPINS}")
    if system is None:
        system = _merged_system(a.system, b.system)
    elif len(system) != n:
        raise ValueError(f"target system has {len(system)} spins, state has {n}")
    return DensityState(np.kron(a.matrix, b.matrix), system)


def rotation_operator(system: SpinSystem, flip_by_species: Mapping[str, float], phase: float) -> np.ndarray:
    """``exp(-i sum_i theta_i (cos(phase) I_x^i + sin(phase) I_y^i))`` as a Kronecker product."""
    u = np.ones((1, 1), dtype=complex)
    for nuc in system.nuclei:
        theta = float(flip_by_species.get(nuc.species, 0.0))
        c, s = np.cos(theta / 2), np.sin(theta / 2)
        local = np.array(
            [[c, -1j * s * np.exp(-1j * phase)], [-1j * s * np.exp(1j * phase), c]],
            dtype=complex,
        )
        u = np.kron(u, local)
    return u


def hard_pulse(state: DensityState, flip_by_species: Mapping[str, float], phase: float = 0.0) -> DensityState:
    """Ideal instantaneous rotation of every spin by its species' flip angle."""
    flips = dict(flip_by_species)
    present = set(state.system.species)
    unknown = set(flips) - present
    if unknown:
        raise ValueError(f"species not in system: {sorted(unknown)}")
    if not all(np.isfinite(v) for v in flips.values()):
        raise ValueError("flip angles must be finite")
    u = rotation_operator(state.system, flips, phase)
    return state._replace(u @ state.matrix @ u.conj().T)


def uniform_flip(system: SpinSystem, angle: float) -> dict[str, float]:
    """Same flip angle for every species present."""
    return {sp: angle for sp in set(system.species)}


def evolve(state: DensityState, H: Hamiltonian, t_s: float) -> DensityState:
    """Free evolution ``U rho U^dagger`` with ``U = V exp(-i Lambda t) V^dagger``."""
    if t_s < 0:
        raise ValueError(f"evolution time must be >= 0, got {t_s}")
    if t_s == 0:
        return state
    u = H.propagator(t_s)
    return state._replace(u @ state.matrix @ u.conj().T)


def decohere_in_eigenbasis(
    state: DensityState, H: Hamiltonian, tol_hz: float = DEFAULT_DECOHERE_TOL_HZ
) -> DensityState:
    """Drop every eigenbasis coherence that oscillates faster than ``tol_hz``."""
    if H.system.dim != state.dim:
        raise ValueError("state and Hamiltonian live on different systems")
    rho = H.to_eigenbasis(state.matrix)
    rho[np.abs(H.gaps_hz) > tol_hz] = 0
    out = H.from_eigenbasis(rho)
    return state._replace((out + out.conj().T) / 2)


def partial_trace_matrix(matrix: np.ndarray, n_spins: int, remove: Sequence[int]) -> np.ndarray:
    remove = sorted(set(remove))
    keep = [i for i in range(n_spins) if i not in remove]
    t = matrix.reshape([2] * (2 * n_spins))
    letters = "abcdefghijklmnopqrstuvwxyz"
    row = list(letters[:n_spins])
    col = list(letters[n_spins : 2 * n_spins])
    for i in remove:
        col[i] = row[i]
    out = "".join(row[i] for i in keep) + "".join(col[i] for i in keep)
    reduced = np.einsum("".join(row) + "".join(col) + "->" + out, t)
    d = 2 ** len(keep)
    return reduced.reshape(d, d)


def partial_trace(state: DensityState, remove: Sequence[int], name: str = "") -> DensityState:
    """Trace out the spins in ``remove``; the rest keep their order."""
    n = len(state.system)
    remove = sorted(set(remove))
    if any(not 0 <= i < n for i in remove):
        raise IndexError(f"spin indices {remove} out of range for {n} spins")
    keep = [i for i in range(n) if i not in remove]
    if not keep:
        raise ValueError("cannot trace out every spin")
    reduced = partial_trace_matrix(state.matrix, n, remove)
    return DensityState(reduced, state.system.subsystem(keep, name=name))


def _nyquist_check(H: Hamiltonian, d_eig: np.ndarray, dwell_s: float) -> None:
    gaps = np.abs(H.gaps_hz)[np.abs(d_eig.T) > 1e-12]
    if gaps.size and gaps.max() >= 0.5 / dwell_s:
        warnings.warn(
            f"detectable transition at {gaps.max():.1f} Hz exceeds Nyquist {0.5 / dwell_s:.1f} Hz",
            NyquistWarning,
            stacklevel=3,
        )


def acquire(
    state: DensityState,
    H: Hamiltonian,
    n_points: int,
    dwell_s: float,
    receiver_phase: float = 0.0,
    detector: np.ndarray | None = None,
) -> Fid:
    """Record ``exp(-i phi_rec) Tr(rho(t_k) D)`` on a uniform grid.

    The state is stepped by the fixed-dwell propagator, applied in the
    eigenbasis of ``H`` where it is diagonal.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if not dwell_s > 0:
        raise ValueError("dwell must be > 0")
    d = detection_operator(state.system) if detector is None else detector
    dev = state.matrix - np.trace(state.matrix) / state.dim * np.eye(state.dim)
    rho_e = H.to_eigenbasis(dev)
    d_e = H.to_eigenbasis(d)
    _nyquist_check(H, d_e, dwell_s)
    amp = rho_e * d_e.T
    mask = np.abs(amp) > 0
    a = amp[mask]
    w = -(H.energies[:, None] - H.energies[None, :])[mask]
    samples = _sum_of_exponentials(a, w, n_points, dwell_s)
    return Fid(samples=np.exp(-1j * receiver_phase) * samples, dwell_s=dwell_s)


def _sum_of_exponentials(a: np.ndarray, w: np.ndarray, n_points: int, dwell_s: float) -> np.ndarray:
    step = np.exp(1j * w * dwell_s)
    out = np.empty(n_points, dtype=complex)
    cur = a.astype(complex)
    for k in range(n_points):
        out[k] = cur.sum()
        cur = cur * step
    return out


def dual_sinc_waveform(t: np.ndarray, freq_a_hz: float, freq_b_hz: float, t_end_s: float) -> np.ndarray:
    """Two-tone carrier under a sinc envelope.

    ``f(t) = (sin(w_a t) + sin(w_b t)) * sinc(4 (t - t_end/2) / t_end)``
    with the unnormalized ``sinc(x) = sin(x)/x``, so the envelope is a single
    lobe and the amplitude spectrum peaks at the two carriers.
    """
    t = np.asarray(t, dtype=float)
    carrier = np.sin(2 * np.pi * freq_a_hz * t) + np.sin(2 * np.pi * freq_b_hz * t)
    return carrier * np.sinc(4 * (t - t_end_s / 2) / t_end_s / np.pi)


def shaped_pulse(
    state: DensityState,
    H: Hamiltonian,
    envelope: np.ndarray | Callable[[np.ndarray], np.ndarray],
    b1_amplitude_tesla: float,
    duration_s: float,
    n_slices: int = 2000,
    method: str | None = None,
) -> DensityState:
    """Lab-frame propagation under ``H - 2 pi gamma_i B1 f(t) I_x^i``.

    ``method="midpoint"`` holds each slice at its midpoint value (second
    order in the slice width). ``method="magnus4"`` uses the two-point
    Gauss-Legendre Magnus step (fourth order). ``envelope`` is a callable
    ``f(t)``, or for the midpoint method ``f`` sampled at the slice midpoints.
    The default is ``magnus4`` for callables and ``midpoint`` for samples.
    """
    if method is None:
        method = "magnus4" if callable(envelope) else "midpoint"
    if n_slices < 1:
        raise ValueError("n_slices must be >= 1")
    if method not in ("midpoint", "magnus4"):
        raise ValueError(f"unknown method {method!r}")
    dt = duration_s / n_slices
    mid = (np.arange(n_slices) + 0.5) * dt
    if method == "magnus4":
        if not callable(envelope):
            raise ValueError("magnus4 needs a callable envelope")
        off = dt / (2 * np.sqrt(3))
        f = np.stack([envelope(mid - off), envelope(mid + off)], axis=1)
    else:
        f = envelope(mid) if callable(envelope) else np.asarray(envelope, dtype=float)
        if f.shape != (n_slices,):
            raise ValueError(f"envelope has {f.shape} samples, expected {n_slices}")
    if not np.all(np.isfinite(f)):
        raise ValueError("waveform contains non-finite values")
    if b1_amplitude_tesla == 0:
        return evolve(state, H, duration_s)
    system = state.system
    hx = np.zeros((system.dim, system.dim), dtype=complex)
    for i, nuc in enumerate(system.nuclei):
        hx -= 2 * np.pi * nuc.gamma * 1e6 * b1_amplitude_tesla * system.op("x", i)
    u_total = np.eye(system.dim, dtype=complex)
    if method == "midpoint":
        for fk in f:
            u_total = expm(-1j * (H.matrix + fk * hx) * dt) @ u_total
    else:
        c = np.sqrt(3) / 12 * dt**2
        for f1, f2 in f:
            a1 = -1j * (H.matrix + f1 * hx)
            a2 = -1j * (H.matrix + f2 * hx)
            omega = dt / 2 * (a1 + a2) + c * (a2 @ a1 - a1 @ a2)
            u_total = expm(omega) @ u_total
    return state._replace(u_total @ state.matrix @ u_total.conj().T)


def single_spin_flip_angle(
    species: str,
    H_field_tesla: float,
    envelope: Callable[[np.ndarray], np.ndarray],
    b1_amplitude_tesla: float,
    duration_s: float,
    n_slices: int = 2000,
) -> float:
    """Flip angle (rad) a shaped pulse imparts on an isolated spin of ``species``."""
    from .spinsys import build_hamiltonian

    system = SpinSystem(nuclei=(Nucleus("X", species),), j_hz=np.zeros((1, 1)))
    H = build_hamiltonian(system, H_field_tesla)
    up = DensityState(np.diag([1.0, 0.0]).astype(complex), system)
    out = shaped_pulse(up, H, envelope, b1_amplitude_tesla, duration_s, n_slices)
    mz = 2 * out.expect(system.op("z", 0)).real
    return float(np.arccos(np.clip(mz, -1.0, 1.0)))


def calibrate_b1(
    species: str,
    field_tesla: float,
    envelope: Callable[[np.ndarray], np.ndarray],
    duration_s: float,
    target_rad: float = np.pi / 2,
    n_slices: int = 2000,
) -> float:
    """Smallest B1 amplitude (T) giving ``target_rad`` on ``species``."""
    from scipy.optimize import brentq

    def miss(b1):
        return single_spin_flip_angle(species, field_tesla, envelope, b1, duration_s, n_slices) - target_rad

    lo, hi = 0.0, 1e-9
    while miss(hi) < 0:
        lo, hi = hi, 2 * hi
        if hi > 1e-2:
            raise RuntimeError("could not bracket the requested flip angle")
    return brentq(miss, lo, hi, xtol=1e-16, rtol=1e-12)
