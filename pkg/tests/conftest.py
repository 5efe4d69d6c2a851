import numpy as np
import pytest

from ulfspin.sabre import SabrePreparation, prepare_sabre
from ulfspin.spinsys import build_hamiltonian, load_preset

B0 = 91.18e-6


@pytest.fixture(scope="session")
def fpy():
    return load_preset("3fpy")


@pytest.fixture(scope="session")
def h_fpy(fpy):
    return build_hamiltonian(fpy, B0)


@pytest.fixture(scope="session")
def sabre_fpy():
    return prepare_sabre(SabrePreparation.from_preset("3fpy"))


def random_density(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Random full-rank density matrix."""
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = a @ a.conj().T
    return rho / np.trace(rho)


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str, seconds: float) -> None:
    """Store one verdict line for the terminal summary."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}  [{seconds:.2f} s]"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
