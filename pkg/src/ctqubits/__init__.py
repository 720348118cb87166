"""Clock-transition spin qubits: single-ion spectra, relaxation, dimers and two-qubit gates."""

from .spin_core import (
    CALCULATED,
    EXPERIMENTAL,
    SpinSystemParams,
    build_hamiltonian,
    diagonalize,
    preset,
)

__version__ = "0.1.0"

__all__ = ["CALCULATED", "EXPERIMENTAL", "SpinSystemParams", "build_hamiltonian", "diagonalize", "preset", "__version__"]
