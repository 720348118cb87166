"""Single-molecule electro-nuclear spin Hamiltonian.

Two model flavours share one parameter object:

``full_J8``
    Crystal field written with extended Stevens operators on the full
    ``|M_J> x |M_I>`` space (17 x 8 = 136 states for J = 8, I = 7/2).
``effective_doublet``
    The ``M_J = +/-4`` ground doublet only (2 x 8 = 16 states). The doublet
    tunnelling gap is stored as the single crystal-field entry ``(4, 4)``
    and enters as ``gap/2 * sigma_x``.

Basis order is electronic index major, nuclear index minor, both running from
``+j`` down to ``-j``. Basis labels are ``(M_J, M_I)`` tuples so that diagonal
observables such as ``J_z`` can be read off the labels.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from .constants import MT, MU_B

EFFECTIVE_DOUBLET = "effective_doublet"
FULL_J8 = "full_J8"
MODEL_KINDS = (EFFECTIVE_DOUBLET, FULL_J8)

# Leading Jz power coefficient of the Stevens polynomial f_kq(Jz) (Stevens convention).
_STEVENS_LEADING = {
    (2, 0): 3, (2, 1): 1, (2, 2): 1,
    (4, 0): 35, (4, 1): 7, (4, 2): 7, (4, 3): 1, (4, 4): 1,
    (6, 0): 231, (6, 1): 33, (6, 2): 33, (6, 3): 11, (6, 4): 11, (6, 5): 1, (6, 6): 1,
}

HERMITIAN_RTOL = 1e-10


class SpinModelError(ValueError):
    """Invalid spin-model input (quantum numbers, coefficients, model kind)."""


@dataclass(frozen=True)
class AngularMomentumSpec:
    j: float

    def __post_init__(self):
        two_j = 2 * self.j
        if two_j < 1 or abs(two_j - round(two_j)) > 1e-12:
            raise SpinModelError(f"angular momentum must be a positive half-integer, got {self.j}")

    @property
    def dim(self) -> int:
        return int(round(2 * self.j)) + 1

    @property
    def m_values(self) -> NDArray[np.float64]:
        """Projections ordered ``j, j-1, ..., -j``."""
        return self.j - np.arange(self.dim, dtype=float)


@dataclass(frozen=True)
class OperatorMatrix:
    """Dense operator with one basis label per row."""

    matrix: NDArray[np.complex128]
    basis: tuple = ()

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise SpinModelError(f"operator must be square, got shape {m.shape}")
        object.__setattr__(self, "matrix", m)
        if not self.basis:
            object.__setattr__(self, "basis", tuple((i,) for i in range(m.shape[0])))
        elif len(self.basis) != m.shape[0]:
            raise SpinModelError("basis length does not match operator dimension")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def is_hermitian(self, rtol: float = 1e-12) -> bool:
        return hermiticity_error(self.matrix) <= rtol

    def to_rows(self):
        """Yield ``(label, row values)`` for CSV export."""
        for label, row in zip(self.basis, self.matrix):
            yield format_label(label), row


def format_label(label) -> str:
    return "|" + ",".join(_fmt_q(x) for x in label) + ">"


def _fmt_q(x) -> str:
    fr = Fraction(float(x)).limit_denominator(2)
    s = str(fr)
    return s if fr <= 0 else "+" + s


def hermiticity_error(m: NDArray) -> float:
    norm = np.linalg.norm(m)
    if norm == 0.0:
        return 0.0
    return float(np.linalg.norm(m - m.conj().T) / norm)


@dataclass(frozen=True)
class Spectrum:
    """Ascending eigenvalues (GHz) with unitary eigenvector columns."""

    energies: NDArray[np.float64]
    states: NDArray[np.complex128]
    basis: tuple = ()

    @property
    def dim(self) -> int:
        return self.energies.shape[0]

    def omega(self, a: int, b: int) -> float:
        """Angular Bohr frequency ``2 pi (E_a - E_b)`` in rad/ns."""
        return 2.0 * np.pi * (self.energies[a] - self.energies[b])

    def gap(self, a: int, b: int) -> float:
        return float(self.energies[b] - self.energies[a])

    def to_eigenbasis(self, op: NDArray) -> NDArray:
        op = op.matrix if isinstance(op, OperatorMatrix) else np.asarray(op)
        return self.states.conj().T @ op @ self.states


# --------------------------------------------------------------------------
# Angular momentum and Stevens operators


def angular_momentum_ops(spec: AngularMomentumSpec) -> dict[str, NDArray[np.complex128]]:
    """Return ``Jx, Jy, Jz, J+, J-`` in the ``|j>, ..., |-j>`` basis."""
    j = spec.j
    m = spec.m_values
    # <m+1|J+|m> sits one row above m in descending order
    up = np.sqrt(j * (j + 1) - m[1:] * (m[1:] + 1))
    jp = np.diag(up, k=1).astype(complex)
    jm = jp.conj().T
    jz = np.diag(m).astype(complex)
    jx = 0.5 * (jp + jm)
    jy = -0.5j * (jp - jm)
    return {"Jx": jx, "Jy": jy, "Jz": jz, "J+": jp, "J-": jm}


def _tensor_component(k: int, q: int, ops) -> NDArray:
    """Unnormalised rank-k spherical tensor component built by commutator descent from J+^k."""
    t = np.linalg.matrix_power(ops["J+"], k)
    jm = ops["J-"]
    for _ in range(k - q):
        t = jm @ t - t @ jm
    return t


def stevens_operator(k: int, q: int, spec: AngularMomentumSpec) -> NDArray[np.complex128]:
    """Extended Stevens operator ``O_k^q`` for k in {2, 4, 6}, |q| <= k.

    The tensor structure comes from commutator descent; the overall scale is
    fixed by matching the leading ``Jz`` coefficient of the Stevens polynomial
    (e.g. ``O_2^0 = 3Jz^2 - J(J+1)``, ``O_4^4 = (J+^4 + J-^4)/2``).
    """
    if k not in (2, 4, 6) or abs(q) > k:
        raise SpinModelError(f"unsupported Stevens operator O_{k}^{q}")
    dim = spec.dim
    if k > 2 * spec.j:
        return np.zeros((dim, dim), dtype=complex)
    ops = angular_momentum_ops(spec)
    aq = abs(q)
    t = _tensor_component(k, -aq, ops)
    m = spec.m_values
    lead = _STEVENS_LEADING[(k, aq)]
    if aq == 0:
        diag = np.real(np.diag(t))
        coef = np.polyfit(m, diag, k)[0]
        return (lead / coef) * t
    # lower-diagonal band: <m-q|T|m> = g(m) <m-q|J-^q|m>, g a degree (k-q) polynomial in m
    jmq = np.linalg.matrix_power(ops["J-"], aq)
    cols = np.arange(dim - aq)
    rows = cols + aq
    ratio = np.real(t[rows, cols] / jmq[rows, cols])
    coef = np.polyfit(m[cols], ratio, k - aq)[0]
    # L = 1/4 {f(Jz), J-^q}; its m-polynomial leads with lead/2
    low = (0.5 * lead / coef) * t
    if q > 0:
        return low + low.conj().T
    return 1j * low - 1j * low.conj().T


# --------------------------------------------------------------------------
# Parameters


@dataclass(frozen=True)
class EFieldResponse:
    """Linear spin-electric response ``dB_k^q/dE`` (GHz per V/m) and electrode gap (m)."""

    coefficients: Mapping[tuple[int, int], float] = field(default_factory=dict)
    gap_m: float = 2e-3

    def field_strength(self, voltage: float) -> float:
        return voltage / self.gap_m

    def shifted(self, cf: Mapping[tuple[int, int], float], voltage: float) -> dict[tuple[int, int], float]:
        e = self.field_strength(voltage)
        out = dict(cf)
        for key, slope in self.coefficients.items():
            out[key] = out.get(key, 0.0) + slope * e
        return out


@dataclass(frozen=True)
class SpinSystemParams:
    """One molecule: quantum numbers, crystal field, hyperfine, Zeeman, spin-electric response.

    Optional extensions (off by default): ``hyperfine_mode='isotropic'``,
    nuclear Zeeman ``nuclear_gamma`` (GHz/T, enters as ``-gamma B.I``) and
    axial quadrupole ``quadrupole_p`` (GHz, ``P (Iz^2 - I(I+1)/3)``).
    """

    a_z: float
    cf: Mapping[tuple[int, int], float]
    model_kind: str = EFFECTIVE_DOUBLET
    g_j: float = 1.25
    electronic: AngularMomentumSpec = AngularMomentumSpec(8)
    nuclear: AngularMomentumSpec = AngularMomentumSpec(3.5)
    e_response: EFieldResponse = EFieldResponse()
    doublet_mj: float = 4
    hyperfine_mode: str = "axial"
    nuclear_gamma: float = 0.0
    quadrupole_p: float = 0.0

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise SpinModelError(f"unknown model_kind {self.model_kind!r}")
        if self.hyperfine_mode not in ("axial", "isotropic"):
            raise SpinModelError(f"unknown hyperfine_mode {self.hyperfine_mode!r}")
        cf = {tuple(int(v) for v in key): float(val) for key, val in dict(self.cf).items()}
        for (k, q), val in cf.items():
            if k not in (2, 4, 6) or abs(q) > k:
                raise SpinModelError(f"invalid crystal-field key ({k}, {q})")
            if not np.isfinite(val):
                raise SpinModelError(f"non-finite crystal-field coefficient B_{k}^{q}")
        object.__setattr__(self, "cf", cf)
        if self.model_kind == EFFECTIVE_DOUBLET:
            if set(cf) - {(4, 4)}:
                raise SpinModelError(
                    "effective_doublet takes only the (4, 4) tunnelling-gap entry, got "
                    f"{sorted(cf)}"
                )
            if set(self.e_response.coefficients) - {(4, 4)}:
                raise SpinModelError("effective_doublet E-field response must act on (4, 4) only")
            if abs(self.doublet_mj) > self.electronic.j:
                raise SpinModelError("doublet M_J exceeds J")

    @property
    def dim(self) -> int:
        n = self.nuclear.dim
        return 2 * n if self.model_kind == EFFECTIVE_DOUBLET else self.electronic.dim * n

    @property
    def tunnelling_gap(self) -> float:
        return self.cf.get((4, 4), 0.0)

    def replace(self, **changes) -> "SpinSystemParams":
        return dataclasses.replace(self, **changes)

    def with_cf(self, key: tuple[int, int], value: float) -> "SpinSystemParams":
        cf = dict(self.cf)
        cf[key] = value
        return self.replace(cf=cf)

    def basis(self) -> tuple:
        mi = self.nuclear.m_values
        mj = self.electronic_m_values()
        return tuple((float(a), float(b)) for a in mj for b in mi)

    def electronic_m_values(self) -> NDArray[np.float64]:
        if self.model_kind == EFFECTIVE_DOUBLET:
            return np.array([self.doublet_mj, -self.doublet_mj], dtype=float)
        return self.electronic.m_values


def electronic_ops(params: SpinSystemParams) -> dict[str, NDArray[np.complex128]]:
    """Electronic J operators on the model's electronic space (2x2 for the doublet)."""
    if params.model_kind == FULL_J8:
        return angular_momentum_ops(params.electronic)
    mj = params.doublet_mj
    z = np.zeros((2, 2), dtype=complex)
    # J+- connect |+mj> and |-mj> only when 2*mj == 1
    ops = {"Jx": z.copy(), "Jy": z.copy(), "Jz": np.diag([mj, -mj]).astype(complex)}
    if abs(2 * mj - 1) < 1e-12:
        full = angular_momentum_ops(AngularMomentumSpec(0.5))
        ops.update(Jx=full["Jx"], Jy=full["Jy"])
    ops["J+"] = ops["Jx"] + 1j * ops["Jy"]
    ops["J-"] = ops["Jx"] - 1j * ops["Jy"]
    return ops


def _field_vector(b) -> NDArray[np.float64]:
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if b.shape == (1,):
        return np.array([0.0, 0.0, b[0]])
    if b.shape != (3,):
        raise SpinModelError(f"field must be a scalar Bz or a 3-vector, got shape {b.shape}")
    return b


def build_hamiltonian(params: SpinSystemParams, b_field, voltage: float = 0.0) -> OperatorMatrix:
    """Spin Hamiltonian in GHz for field ``b_field`` (T; scalar means along z) and electrode voltage (V)."""
    bvec = _field_vector(b_field)
    nuc = angular_momentum_ops(params.nuclear)
    eye_i = np.eye(params.nuclear.dim)
    el = electronic_ops(params)
    eye_j = np.eye(el["Jz"].shape[0])
    cf = params.e_response.shifted(params.cf, voltage)

    if params.model_kind == EFFECTIVE_DOUBLET:
        sx = np.array([[0, 1], [1, 0]], dtype=complex)
        h_el = 0.5 * cf.get((4, 4), 0.0) * sx
    else:
        h_el = np.zeros((params.electronic.dim,) * 2, dtype=complex)
        for (k, q), val in sorted(cf.items()):
            if val != 0.0:
                h_el = h_el + val * stevens_operator(k, q, params.electronic)

    comps = ("Jx", "Jy", "Jz")
    h_el = h_el + params.g_j * MU_B * sum(bvec[i] * el[c] for i, c in enumerate(comps))
    h = np.kron(h_el, eye_i)

    if params.hyperfine_mode == "axial":
        h = h + params.a_z * np.kron(el["Jz"], nuc["Jz"])
    else:
        h = h + params.a_z * sum(np.kron(el[c], nuc[c]) for c in comps)

    if params.nuclear_gamma:
        h = h - params.nuclear_gamma * np.kron(eye_j, sum(bvec[i] * nuc[c] for i, c in enumerate(comps)))
    if params.quadrupole_p:
        ii = params.nuclear.j
        quad = nuc["Jz"] @ nuc["Jz"] - ii * (ii + 1) / 3.0 * eye_i
        h = h + params.quadrupole_p * np.kron(eye_j, quad)

    h = 0.5 * (h + h.conj().T)
    return OperatorMatrix(h, params.basis())


def diagonalize(h) -> Spectrum:
    """Hermitian eigendecomposition with a deterministic phase convention.

    Each eigenvector is rotated so its largest-magnitude component (first one
    on ties) is real and positive.
    """
    basis = h.basis if isinstance(h, OperatorMatrix) else ()
    m = h.matrix if isinstance(h, OperatorMatrix) else np.asarray(h, dtype=complex)
    err = hermiticity_error(m)
    if err > HERMITIAN_RTOL:
        raise SpinModelError(f"operator is not Hermitian (relative error {err:.3e})")
    m = 0.5 * (m + m.conj().T)
    energies, states = np.linalg.eigh(m)
    states = fix_phases(states)
    return Spectrum(energies, states, basis)


def fix_phases(states: NDArray) -> NDArray:
    states = np.array(states, dtype=complex)
    mag = np.abs(states)
    top = mag.max(axis=0)
    idx = np.argmax(mag >= top * (1 - 1e-8), axis=0)
    pivots = states[idx, np.arange(states.shape[1])]
    return states * (np.abs(pivots) / pivots)


def jz_diagonal(basis: Sequence[tuple], site: int = 0) -> NDArray[np.float64]:
    """Electronic ``M_J`` of each basis label; ``site`` picks the pair in dimer labels."""
    return np.array([lab[2 * site] for lab in basis], dtype=float)


def magnetic_moment(spectrum: Spectrum, level: int, site: int = 0) -> float:
    """``<J_z>`` of eigenstate ``level`` (dimensionless)."""
    if not spectrum.basis:
        raise SpinModelError("spectrum carries no basis labels; cannot evaluate J_z")
    if not 0 <= level < spectrum.dim:
        raise SpinModelError(f"level {level} out of range")
    mj = jz_diagonal(spectrum.basis, site)
    w = np.abs(spectrum.states[:, level]) ** 2
    return float(w @ mj)


def doublet_admixture(spectrum: Spectrum, level: int, mj: float = 4) -> tuple[complex, complex]:
    """Amplitudes ``(alpha, beta)`` on ``|+mj>`` and ``|-mj>`` in the dominant nuclear sector."""
    vec = spectrum.states[:, level]
    labels = spectrum.basis
    sectors: dict[float, float] = {}
    for amp, lab in zip(vec, labels):
        sectors[lab[1]] = sectors.get(lab[1], 0.0) + abs(amp) ** 2
    mi = max(sectors, key=lambda s: sectors[s])
    alpha = sum(a for a, lab in zip(vec, labels) if lab == (float(mj), mi))
    beta = sum(a for a, lab in zip(vec, labels) if lab == (float(-mj), mi))
    norm = np.sqrt(sectors[mi])
    return complex(alpha / norm), complex(beta / norm)


# --------------------------------------------------------------------------
# Presets

EXPERIMENTAL = "experimental_9p1GHz"
CALCULATED = "calculated_11GHz"
PRESET_GAPS = {EXPERIMENTAL: 9.1, CALCULATED: 11.0}
FIRST_CT_FIELD_MT = 24.0

#: dGap/dE (GHz per V/m) calibrated so the 12 mT pair operating point gives
#: spectator-synchronised 800 ns pi pulses at 300 V / 2 mm; see dimer.calibrate_sec.
DEFAULT_SEC = -2.508078295436982e-08


def ct_hyperfine(b_min_mt: float = FIRST_CT_FIELD_MT, g_j: float = 1.25, m_i: float = -0.5) -> float:
    """Axial hyperfine constant putting the doublet anticrossing of ``m_i`` at ``b_min_mt``."""
    return -g_j * MU_B * b_min_mt * MT / m_i


def preset(name: str = EXPERIMENTAL, sec: float | None = DEFAULT_SEC) -> SpinSystemParams:
    """Calibrated effective-doublet presets (first CT at 24 mT)."""
    if name not in PRESET_GAPS:
        raise SpinModelError(f"unknown preset {name!r}; choose from {sorted(PRESET_GAPS)}")
    resp = EFieldResponse({(4, 4): sec} if sec else {}, gap_m=2e-3)
    return SpinSystemParams(
        a_z=ct_hyperfine(),
        cf={(4, 4): PRESET_GAPS[name]},
        model_kind=EFFECTIVE_DOUBLET,
        e_response=resp,
    )
