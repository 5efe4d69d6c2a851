"""Five-step SABRE state preparation.

1. non-polarized substrate (maximally mixed);
2. two singlet hydrides appended, forming the Ir complex;
3. eigenbasis dephasing of the complex at the polarizing field;
4. dissociation by partial trace, giving the free substrate and H2;
5. is left to :mod:`ulfspin.sequences`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .dynamics import (
    DEFAULT_DECOHERE_TOL_HZ,
    DensityState,
    decohere_in_eigenbasis,
    maximally_mixed,
    partial_trace,
    singlet_pair_density,
    tensor_state,
)
from .spinsys import Hamiltonian, Nucleus, SpinSystem, build_hamiltonian, load_preset

DEFAULT_BP_TESLA = 5.2e-3


class PreparationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SabrePreparation:
    """Inputs of the SABRE model.

    ``complex_system`` must be the two hydrides followed by the spins of
    ``substrate_system`` in the same order.
    """

    substrate_system: SpinSystem
    complex_system: SpinSystem
    bp_tesla: float = DEFAULT_BP_TESLA
    decohere_tol_hz: float = DEFAULT_DECOHERE_TOL_HZ

    def __post_init__(self):
        sub, cpx = self.substrate_system, self.complex_system
        if len(cpx) != len(sub) + 2:
            raise PreparationError("complex must be the substrate plus exactly two hydrides")
        hydrides = cpx.nuclei[:2]
        if any(h.species != "H1" for h in hydrides):
            raise PreparationError("the first two complex spins must be 1H hydrides")
        if cpx.nuclei[2:] != sub.nuclei:
            raise PreparationError("complex spins 2.. must match the substrate spins")
        if not np.allclose(cpx.j_hz[2:, 2:], sub.j_hz, atol=0, rtol=0):
            raise PreparationError("substrate couplings differ inside the complex")
        if self.bp_tesla < 0:
            raise PreparationError("bp_tesla must be >= 0")

    @classmethod
    def from_preset(cls, name: str = "3fpy", **kw) -> "SabrePreparation":
        return cls(load_preset(name), load_preset(f"{name}-complex"), **kw)

    @property
    def hydride_indices(self) -> list[int]:
        return [0, 1]

    @property
    def substrate_indices(self) -> list[int]:
        return list(range(2, len(self.complex_system)))

    def scaled_hydride_couplings(self, scale: float) -> "SabrePreparation":
        """Copy with every hydride-substrate coupling multiplied by ``scale``."""
        j = np.array(self.complex_system.j_hz)
        j[:2, 2:] *= scale
        j[2:, :2] *= scale
        return SabrePreparation(
            self.substrate_system, self.complex_system.with_couplings(j), self.bp_tesla, self.decohere_tol_hz
        )


@dataclass(frozen=True, eq=False)
class PreparedStates:
    rho_complex: DensityState
    rho_substrate: DensityState
    rho_h2: DensityState
    h_bp: Hamiltonian = field(repr=False)


def h2_system(complex_system: SpinSystem) -> SpinSystem:
    """Free H2: the two hydride spins, magnetically equivalent and uncoupled.

    The H-H coupling of free H2 is invisible for equivalent spins, so it is
    left at zero.
    """
    labels = [nuc.label for nuc in complex_system.nuclei[:2]]
    nuclei = tuple(Nucleus(lab, "H1", 0.0) for lab in labels)
    return SpinSystem(nuclei=nuclei, j_hz=np.zeros((2, 2)), name="H2")


def prepare_sabre(prep: SabrePreparation) -> PreparedStates:
    sub = prep.substrate_system
    cpx = prep.complex_system
    hydrides = cpx.subsystem([0, 1], name="IrHH")
    singlet = DensityState(singlet_pair_density(), hydrides)
    rho = tensor_state(singlet, maximally_mixed(sub), system=cpx)
    h_bp = build_hamiltonian(cpx, prep.bp_tesla)
    rho = decohere_in_eigenbasis(rho, h_bp, prep.decohere_tol_hz)
    rho_sub = partial_trace(rho, prep.hydride_indices)
    rho_sub = DensityState(rho_sub.matrix, sub)
    rho_h2 = partial_trace(rho, prep.substrate_indices)
    rho_h2 = DensityState(rho_h2.matrix, h2_system(cpx))
    return PreparedStates(rho_complex=rho, rho_substrate=rho_sub, rho_h2=rho_h2, h_bp=h_bp)


def prepare_longitudinal(system: SpinSystem, polarization_per_spin: Mapping[str, float]) -> DensityState:
    """``(1 + sum_i p_i 2 I_z^i) / 2^N``; unlisted spins are unpolarized."""
    rho = np.eye(system.dim, dtype=complex)
    for label, p in polarization_per_spin.items():
        if not -1 <= p <= 1:
            raise PreparationError(f"polarization of {label} must lie in [-1, 1], got {p}")
        rho = rho + 2 * p * system.op("z", system.index(label))
    return DensityState(rho / system.dim, system)


def prepare_product_order(system: SpinSystem, spins: list[int | str], amplitude: float = 1.0) -> DensityState:
    """``(1 + a prod_i 2 I_z^i) / 2^N`` over ``spins``: a pure longitudinal n-spin order."""
    if not -1 <= amplitude <= 1:
        raise PreparationError("amplitude must lie in [-1, 1]")
    op = np.eye(system.dim, dtype=complex)
    for s in spins:
        op = op @ (2 * system.op("z", s))
    return DensityState((np.eye(system.dim) + amplitude * op) / system.dim, system)
