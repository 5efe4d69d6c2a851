"""Spin systems, product operators and lab-frame Hamiltonians.

Basis convention
----------------
States of an N-spin system are ordered as the tensor product
``spin_0 (x) spin_1 (x) ... (x) spin_{N-1}`` with spin 0 the most significant
factor. Within each factor index 0 is ``|up>`` (m = +1/2) and index 1 is
``|down>`` (m = -1/2). Every other module relies on this ordering.

Hamiltonians are in rad/s and carry the physical sign of the Zeeman term for
positive gyromagnetic ratios, ``H = -sum_i 2 pi nu_i I_z^i + sum_{i<j} 2 pi J_ij I^i.I^j``,
so that a raising coherence ``I_+`` precesses as ``exp(+i 2 pi nu t)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

#: Gyromagnetic ratios, MHz/T.
GAMMA_MHZ_PER_T: dict[str, float] = {
    "H1": 42.5770,
    "F19": 40.0520,
}

MAX_SPINS = 8

PRESETS = ("3fpy", "efna", "3fpy-complex", "efna-complex")

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
IX = SIGMA_X / 2
IY = SIGMA_Y / 2
IZ = SIGMA_Z / 2
# raising / lowering in the |up>, |down> ordering
IP = np.array([[0, 1], [0, 0]], dtype=complex)
IM = np.array([[0, 0], [1, 0]], dtype=complex)


class SpinSystemError(ValueError):
    """Raised for invalid spin-system definitions."""


def larmor_frequency(species: str, field_tesla: float) -> float:
    """Larmor frequency in Hz of a bare nucleus (chemical shift excluded)."""
    try:
        gamma = GAMMA_MHZ_PER_T[species]
    except KeyError:
        raise SpinSystemError(f"unsupported species {species!r}") from None
    return gamma * 1e6 * field_tesla


@dataclass(frozen=True)
class Nucleus:
    label: str
    species: str
    shift_ppm: float = 0.0

    def __post_init__(self):
        if self.species not in GAMMA_MHZ_PER_T:
            raise SpinSystemError(f"unsupported species {self.species!r} for {self.label!r}")

    @property
    def gamma(self) -> float:
        """Gyromagnetic ratio in MHz/T."""
        return GAMMA_MHZ_PER_T[self.species]

    def frequency(self, field_tesla: float) -> float:
        """Precession frequency in Hz including the chemical shift."""
        return larmor_frequency(self.species, field_tesla) * (1.0 + self.shift_ppm * 1e-6)


@dataclass(frozen=True, eq=False)
class SpinSystem:
    """An ordered set of spin-1/2 nuclei with isotropic scalar couplings.

    Parameters
    ----------
    nuclei
        Spins in basis order.
    j_hz
        Symmetric ``N x N`` coupling matrix in Hz with a zero diagonal.
    name
        Free-form display name.
    """

    nuclei: tuple[Nucleus, ...]
    j_hz: np.ndarray
    name: str = ""
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        nuclei = tuple(self.nuclei)
        object.__setattr__(self, "nuclei", nuclei)
        n = len(nuclei)
        if not 1 <= n <= MAX_SPINS:
            raise SpinSystemError(f"need 1..{MAX_SPINS} spins, got {n}")
        labels = [nuc.label for nuc in nuclei]
        dupes = sorted({lab for lab in labels if labels.count(lab) > 1})
        if dupes:
            raise SpinSystemError(f"duplicate labels: {', '.join(dupes)}")
        j = np.array(self.j_hz, dtype=float)
        if j.shape != (n, n):
            raise SpinSystemError(f"j_hz must be {n}x{n}, got {j.shape}")
        if np.any(np.diag(j) != 0):
            raise SpinSystemError("j_hz diagonal must be zero")
        bad = np.argwhere(np.triu(j != j.T))
        if bad.size:
            a, b = bad[0]
            raise SpinSystemError(f"asymmetric coupling {labels[a]}–{labels[b]}")
        j.setflags(write=False)
        object.__setattr__(self, "j_hz", j)

    def __len__(self) -> int:
        return len(self.nuclei)

    @property
    def dim(self) -> int:
        return 2 ** len(self.nuclei)

    @property
    def labels(self) -> list[str]:
        return [nuc.label for nuc in self.nuclei]

    @property
    def species(self) -> list[str]:
        return [nuc.species for nuc in self.nuclei]

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise SpinSystemError(f"no spin labelled {label!r}") from None

    def indices_of(self, species: str) -> list[int]:
        return [i for i, nuc in enumerate(self.nuclei) if nuc.species == species]

    def coupling(self, a: str, b: str) -> float:
        return float(self.j_hz[self.index(a), self.index(b)])

    def subsystem(self, keep: Sequence[int], name: str = "") -> "SpinSystem":
        """System restricted to the spins ``keep`` (order preserved)."""
        keep = sorted(keep)
        return SpinSystem(
            nuclei=tuple(self.nuclei[i] for i in keep),
            j_hz=self.j_hz[np.ix_(keep, keep)],
            name=name or self.name,
        )

    def with_couplings(self, j_hz: np.ndarray) -> "SpinSystem":
        return SpinSystem(nuclei=self.nuclei, j_hz=j_hz, name=self.name, meta=self.meta)

    @cached_property
    def magnetic_numbers(self) -> np.ndarray:
        """``m[r, i]``: magnetic quantum number of spin ``i`` in basis state ``r``."""
        n = len(self.nuclei)
        r = np.arange(2**n)[:, None]
        bits = (r >> (n - 1 - np.arange(n))[None, :]) & 1
        return 0.5 - bits

    def species_m(self, species: str) -> np.ndarray:
        """Summed magnetic number of one species for each basis state."""
        idx = self.indices_of(species)
        if not idx:
            return np.zeros(self.dim)
        return self.magnetic_numbers[:, idx].sum(axis=1)

    @cached_property
    def total_m(self) -> np.ndarray:
        return self.magnetic_numbers.sum(axis=1)

    @cached_property
    def _operators(self) -> dict[str, list[np.ndarray]]:
        ops = {}
        for name, local in (("x", IX), ("y", IY), ("z", IZ), ("p", IP), ("m", IM)):
            ops[name] = [_embed(len(self.nuclei), i, local) for i in range(len(self.nuclei))]
        return ops

    def op(self, kind: str, spin: int | str) -> np.ndarray:
        """Cached single-spin operator, ``kind`` in ``x, y, z, p, m``."""
        i = self.index(spin) if isinstance(spin, str) else spin
        if not 0 <= i < len(self.nuclei):
            raise IndexError(f"spin index {i} out of range for {len(self.nuclei)} spins")
        return self._operators[kind][i]


def _embed(n: int, i: int, local: np.ndarray) -> np.ndarray:
    left = np.eye(2**i, dtype=complex)
    right = np.eye(2 ** (n - 1 - i), dtype=complex)
    return np.kron(np.kron(left, local), right)


def embed_operator(system: SpinSystem, spin_index: int, local: np.ndarray) -> np.ndarray:
    """Place a 2x2 operator on one spin, identity on all others."""
    n = len(system)
    if not 0 <= spin_index < n:
        raise IndexError(f"spin index {spin_index} out of range for {n} spins")
    local = np.asarray(local, dtype=complex)
    if local.shape != (2, 2):
        raise ValueError(f"local operator must be 2x2, got {local.shape}")
    return _embed(n, spin_index, local)


def product_operator(system: SpinSystem, factors: Mapping[int | str, str]) -> np.ndarray:
    """Product of single-spin operators, e.g. ``{0: 'z', 'F': 'p'}``.

    Each product factor is the plain spin operator (no factor of 2).
    """
    out = np.eye(system.dim, dtype=complex)
    for spin, kind in factors.items():
        out = out @ system.op(kind, spin)
    return out


@dataclass(frozen=True, eq=False)
class Hamiltonian:
    """Lab-frame Hamiltonian in rad/s with its cached eigendecomposition."""

    matrix: np.ndarray
    field_tesla: float
    system: SpinSystem

    def __post_init__(self):
        h = np.asarray(self.matrix, dtype=complex)
        h = (h + h.conj().T) / 2
        h.setflags(write=False)
        object.__setattr__(self, "matrix", h)

    @cached_property
    def _eig(self) -> tuple[np.ndarray, np.ndarray]:
        w, v = np.linalg.eigh(self.matrix)
        w.setflags(write=False)
        v.setflags(write=False)
        return w, v

    @property
    def energies(self) -> np.ndarray:
        """Eigenvalues, rad/s, ascending."""
        return self._eig[0]

    @property
    def vectors(self) -> np.ndarray:
        """Orthonormal eigenvectors as columns."""
        return self._eig[1]

    def propagator(self, t_s: float) -> np.ndarray:
        v = self.vectors
        return (v * np.exp(-1j * self.energies * t_s)) @ v.conj().T

    def to_eigenbasis(self, matrix: np.ndarray) -> np.ndarray:
        v = self.vectors
        return v.conj().T @ matrix @ v

    def from_eigenbasis(self, matrix: np.ndarray) -> np.ndarray:
        v = self.vectors
        return v @ matrix @ v.conj().T

    @property
    def gaps_hz(self) -> np.ndarray:
        """Matrix of transition frequencies ``(E_r - E_s) / 2 pi`` in Hz."""
        e = self.energies
        return (e[:, None] - e[None, :]) / (2 * np.pi)


def build_hamiltonian(system: SpinSystem, field_tesla: float) -> Hamiltonian:
    """Zeeman plus isotropic scalar-coupling Hamiltonian at ``field_tesla``."""
    if not field_tesla >= 0:
        raise ValueError(f"field must be >= 0, got {field_tesla}")
    n = len(system)
    h = np.zeros((system.dim, system.dim), dtype=complex)
    for i, nuc in enumerate(system.nuclei):
        h -= 2 * np.pi * nuc.frequency(field_tesla) * system.op("z", i)
    for i in range(n):
        for j in range(i + 1, n):
            jij = system.j_hz[i, j]
            if jij == 0:
                continue
            coupling = (
                system.op("z", i) @ system.op("z", j)
                + 0.5 * (system.op("p", i) @ system.op("m", j) + system.op("m", i) @ system.op("p", j))
            )
            h += 2 * np.pi * jij * coupling
    return Hamiltonian(matrix=h, field_tesla=float(field_tesla), system=system)


def _parse_pair(key: str) -> tuple[str, str]:
    parts = [p.strip() for p in key.split(",")]
    if len(parts) != 2 or not all(parts):
        raise SpinSystemError(f"coupling key must look like 'A,B', got {key!r}")
    return parts[0], parts[1]


def load_spin_system(config: Mapping[str, Any] | str | Path) -> SpinSystem:
    """Build a :class:`SpinSystem` from a JSON document, path or preset name.

    The document holds ``nuclei`` (label, species, shift_ppm) and ``j_hz``,
    a mapping ``"A,B" -> Hz``. Only one triangle needs listing; missing pairs
    are zero. Listing both orders with different values is an error.
    """
    if isinstance(config, (str, Path)):
        config = _read_config(config)
    try:
        raw_nuclei = config["nuclei"]
    except KeyError:
        raise SpinSystemError("config has no 'nuclei' list") from None
    nuclei = tuple(
        Nucleus(label=str(d["label"]), species=str(d["species"]), shift_ppm=float(d.get("shift_ppm", 0.0)))
        for d in raw_nuclei
    )
    labels = [nuc.label for nuc in nuclei]
    dupes = sorted({lab for lab in labels if labels.count(lab) > 1})
    if dupes:
        raise SpinSystemError(f"duplicate labels: {', '.join(dupes)}")
    pos = {lab: i for i, lab in enumerate(labels)}
    n = len(nuclei)
    j = np.zeros((n, n))
    seen: dict[tuple[int, int], float] = {}
    for key, value in dict(config.get("j_hz", {})).items():
        a, b = _parse_pair(key)
        for lab in (a, b):
            if lab not in pos:
                raise SpinSystemError(f"coupling {key!r} names unknown spin {lab!r}")
        if a == b:
            raise SpinSystemError(f"self coupling {a}–{b}")
        i, k = pos[a], pos[b]
        pair = (min(i, k), max(i, k))
        if pair in seen and seen[pair] != float(value):
            x, y = labels[pair[0]], labels[pair[1]]
            raise SpinSystemError(f"asymmetric coupling {x}–{y}")
        seen[pair] = float(value)
        j[i, k] = j[k, i] = float(value)
    meta = {k: v for k, v in config.items() if k not in ("nuclei", "j_hz", "name")}
    return SpinSystem(nuclei=nuclei, j_hz=j, name=str(config.get("name", "")), meta=meta)


def _read_config(source: str | Path) -> dict:
    if isinstance(source, str) and source in PRESETS:
        text = resources.files("ulfspin.data").joinpath(f"{source}.json").read_text()
        return json.loads(text)
    return json.loads(Path(source).read_text())


def load_preset(name: str) -> SpinSystem:
    if name not in PRESETS:
        raise SpinSystemError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return load_spin_system(name)
