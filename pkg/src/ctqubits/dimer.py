"""Two coupled molecules: 256-level manifold, operating space and delta-f.

Sites use the effective doublet model (16 levels each). Site b carries the
electrode voltage. Molecular axes must be collinear with the field (z);
an axis along -z is a C2-rotated copy of site a and its basis is relabelled
into the laboratory frame, so ``M_J`` and ``M_I`` labels are lab-frame values
for both sites.

Coupling modes
--------------
``full_dipolar_operator``
    ``D [J_a.J_b - 3 (J_a.r)(J_b.r)]`` with lab-frame ``J`` (only ``J_z`` is
    non-zero inside the doublet), i.e. ``D_geom J_z^a J_z^b``.
``effective_scalar``
    ``j(B) J_z^a J_z^b`` with ``j(B) = D_geom <J_z>_a <J_z>_b / M_J^2`` read
    from the reference level of each site. ``j`` vanishes with the moment at
    a clock transition.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import brentq

from .constants import DIPOLAR_GHZ_A3, GHZ_TO_MHZ, MT
from .spin_core import (
    EFFECTIVE_DOUBLET,
    EFieldResponse,
    OperatorMatrix,
    SpinModelError,
    SpinSystemParams,
    Spectrum,
    build_hamiltonian,
    fix_phases,
    jz_diagonal,
    preset,
)

FULL_DIPOLAR = "full_dipolar_operator"
EFFECTIVE_SCALAR = "effective_scalar"
COUPLING_MODES = (FULL_DIPOLAR, EFFECTIVE_SCALAR)

SITE_DIM = 16
TARGET_MI = -0.5
#: Operating point and drive used to calibrate separation and spin-electric slope.
OPERATING_FIELD_MT = 12.0
OPERATING_VOLTAGE = 300.0
TARGET_DELTA_F_MHZ = 0.1
RABI_MHZ = 0.625
#: Spectator detuning at which an off-resonant transition completes 3 generalised
#: Rabi cycles inside one pi pulse of the target (1/(2 Omega) = 800 ns).
SPECTATOR_CYCLES = 3
TARGET_DELTA_F_ON_MHZ = math.sqrt((SPECTATOR_CYCLES * 2 * RABI_MHZ) ** 2 - RABI_MHZ**2)

#: |r| (Angstrom) giving delta-f = 0.1 MHz at 12 mT without E-field; a calibration, not a crystal distance.
DEFAULT_SEPARATION_A = 59.13149450076997

AS_WEIGHT = 0.9
DEGENERACY_TOL = 1e-9  # GHz
S_WEIGHT_TOL = 0.05
LABELS = ("00", "01", "10", "11")


class DimerError(ValueError):
    pass


@dataclass(frozen=True)
class DimerGeometry:
    """Separation ``r`` (Angstrom, crystal frame) and molecular axes."""

    r: tuple[float, float, float] = (DEFAULT_SEPARATION_A, 0.0, 0.0)
    axis_a: tuple[float, float, float] = (0.0, 0.0, 1.0)
    axis_b: tuple[float, float, float] = (0.0, 0.0, -1.0)

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        if r.shape != (3,) or not np.linalg.norm(r) > 0:
            raise DimerError("separation vector must be a non-zero 3-vector")
        for name in ("axis_a", "axis_b"):
            n = np.asarray(getattr(self, name), dtype=float)
            if n.shape != (3,) or abs(np.linalg.norm(n) - 1.0) > 1e-9:
                raise DimerError(f"{name} must be a unit vector")
            if abs(abs(n[2]) - 1.0) > 1e-9:
                raise DimerError(f"{name} must be along +-z for the effective doublet model")
        object.__setattr__(self, "r", tuple(float(x) for x in r))

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.r))

    @property
    def unit(self) -> NDArray[np.float64]:
        return np.asarray(self.r) / self.distance

    def axis_sign(self, site: int) -> float:
        return float(np.sign((self.axis_a, self.axis_b)[site][2]))

    def with_distance(self, distance: float) -> "DimerGeometry":
        return dataclasses.replace(self, r=tuple(self.unit * distance))


def dipolar_constant(geometry: DimerGeometry, g_j: float = 1.25) -> float:
    """``mu_0 (g_J mu_B)^2 / (4 pi |r|^3)`` in GHz."""
    return DIPOLAR_GHZ_A3 * g_j**2 / geometry.distance**3


def geometric_coupling(geometry: DimerGeometry, g_j: float = 1.25) -> float:
    """``D (1 - 3 cos^2 theta)``: coefficient of lab-frame ``J_z^a J_z^b`` (GHz)."""
    rz = geometry.unit[2]
    return dipolar_constant(geometry, g_j) * (1.0 - 3.0 * rz**2)


@dataclass(frozen=True)
class DimerSystem:
    site_a: SpinSystemParams
    site_b: SpinSystemParams
    geometry: DimerGeometry = DimerGeometry()
    coupling_mode: str = EFFECTIVE_SCALAR
    target_mi: float = TARGET_MI

    def __post_init__(self):
        if self.coupling_mode not in COUPLING_MODES:
            raise DimerError(f"unknown coupling mode {self.coupling_mode!r}")
        for p in (self.site_a, self.site_b):
            if p.model_kind != EFFECTIVE_DOUBLET or p.dim != SITE_DIM:
                raise DimerError("only 16-level effective doublet sites are supported (256-level dimer)")
        if self.site_a.g_j != self.site_b.g_j:
            raise DimerError("sites must share g_J")

    @property
    def dim(self) -> int:
        return self.site_a.dim * self.site_b.dim

    def replace(self, **changes) -> "DimerSystem":
        return dataclasses.replace(self, **changes)

    def with_sec(self, sec: float) -> "DimerSystem":
        resp = EFieldResponse({(4, 4): sec}, self.site_b.e_response.gap_m)
        return self.replace(site_b=self.site_b.replace(e_response=resp))

    def with_distance(self, distance: float) -> "DimerSystem":
        return self.replace(geometry=self.geometry.with_distance(distance))

    def uncoupled(self) -> "DimerSystem":
        """Same two molecules with the interaction removed (isolated monomers)."""
        return self.with_distance(1e12)


def default_dimer(preset_name: str = "experimental_9p1GHz", **kw) -> DimerSystem:
    p = preset(preset_name)
    return DimerSystem(p.replace(e_response=EFieldResponse()), p, **kw)


# --------------------------------------------------------------------------
# Sites and composition


def site_hamiltonian(dimer: DimerSystem, site: int, b_mt: float, voltage: float = 0.0) -> OperatorMatrix:
    """Site Hamiltonian in lab-frame labels; only site b sees the voltage."""
    params = dimer.site_a if site == 0 else dimer.site_b
    sign = dimer.geometry.axis_sign(site)
    h = build_hamiltonian(params, sign * b_mt * MT, voltage if site == 1 else 0.0)
    if sign > 0:
        return h
    # C2 about x maps (M_J, M_I) -> (-M_J, -M_I): reverse the descending basis
    m = h.matrix[::-1, ::-1]
    return OperatorMatrix(m, params.basis())


def sector_diagonalize(h: OperatorMatrix, sectors: Sequence) -> Spectrum:
    """Diagonalise a Hamiltonian that conserves the per-basis-state ``sectors`` key.

    Eigenvectors never mix different sectors even when energies are degenerate.
    """
    m = h.matrix
    ids: dict = {}
    keys = np.array([ids.setdefault(s, len(ids)) for s in sectors])
    same = keys[:, None] == keys[None, :]
    if np.abs(m[~same]).max(initial=0.0) > 1e-12 * max(1.0, np.abs(m).max()):
        raise DimerError("Hamiltonian couples different conserved sectors")
    d = m.shape[0]
    energies = np.empty(d)
    states = np.zeros((d, d), dtype=complex)
    col = 0
    for k in dict.fromkeys(keys):
        idx = np.nonzero(keys == k)[0]
        e, v = np.linalg.eigh(m[np.ix_(idx, idx)])
        n = len(idx)
        energies[col:col + n] = e
        states[idx, col:col + n] = v
        col += n
    order = np.argsort(energies, kind="stable")
    return Spectrum(energies[order], fix_phases(states[:, order]), h.basis)


def nuclear_sectors(basis: Sequence[tuple]) -> list[tuple]:
    """Conserved nuclear projections of each basis label (site or dimer)."""
    return [tuple(lab[1::2]) for lab in basis]


def site_spectrum(dimer: DimerSystem, site: int, b_mt: float, voltage: float = 0.0) -> Spectrum:
    h = site_hamiltonian(dimer, site, b_mt, voltage)
    return sector_diagonalize(h, nuclear_sectors(h.basis))


def site_pair_states(dimer: DimerSystem, site: int, b_mt: float, voltage: float = 0.0) -> NDArray[np.complex128]:
    """Lower and upper eigenstates (columns) of the site's ``M_I = target_mi`` sector."""
    h = site_hamiltonian(dimer, site, b_mt, voltage)
    sel = [i for i, lab in enumerate(h.basis) if lab[1] == dimer.target_mi]
    if len(sel) != 2:
        raise DimerError(f"nuclear projection {dimer.target_mi} not present")
    _, v = np.linalg.eigh(h.matrix[np.ix_(sel, sel)])
    out = np.zeros((h.dim, 2), dtype=complex)
    out[sel, :] = v
    return fix_phases(out)


def reference_moment(dimer: DimerSystem, site: int, b_mt: float, voltage: float = 0.0) -> float:
    """Lab-frame ``<J_z>`` of the lower operating (q = 0) site state."""
    h = site_hamiltonian(dimer, site, b_mt, voltage)
    w = np.abs(site_pair_states(dimer, site, b_mt, voltage)[:, 0]) ** 2
    return float(w @ jz_diagonal(h.basis))


def exchange_coefficient(dimer: DimerSystem, b_mt: float, voltage: float = 0.0) -> float:
    """Coefficient of ``J_z^a J_z^b`` (GHz) for the configured coupling mode."""
    d_geom = geometric_coupling(dimer.geometry, dimer.site_a.g_j)
    if dimer.coupling_mode == FULL_DIPOLAR:
        return d_geom
    mj2 = dimer.site_a.doublet_mj * dimer.site_b.doublet_mj
    ma = reference_moment(dimer, 0, b_mt, voltage)
    mb = reference_moment(dimer, 1, b_mt, voltage)
    return d_geom * ma * mb / mj2


def dimer_basis(dimer: DimerSystem) -> tuple:
    ba, bb = dimer.site_a.basis(), dimer.site_b.basis()
    return tuple(a + b for a in ba for b in bb)


def dipolar_operator(geometry: DimerGeometry, g_j: float, site_a: SpinSystemParams, site_b: SpinSystemParams) -> OperatorMatrix:
    """Point-dipole operator ``D [J_a.J_b - 3 (J_a.r)(J_b.r)]`` on the product space (GHz).

    In the doublet model only lab-frame ``J_z`` survives, giving
    ``D (1 - 3 r_z^2) J_z^a J_z^b``.
    """
    jza = np.diag(jz_diagonal(site_a.basis()))
    jzb = np.diag(jz_diagonal(site_b.basis()))
    m = geometric_coupling(geometry, g_j) * np.kron(jza, jzb)
    basis = tuple(a + b for a in site_a.basis() for b in site_b.basis())
    return OperatorMatrix(m.astype(complex), basis)


def compose(dimer: DimerSystem, b_mt: float, voltage: float = 0.0) -> OperatorMatrix:
    """256 x 256 dimer Hamiltonian (GHz) at field ``b_mt`` and voltage on site b."""
    ha = site_hamiltonian(dimer, 0, b_mt).matrix
    hb = site_hamiltonian(dimer, 1, b_mt, voltage).matrix
    na, nb = ha.shape[0], hb.shape[0]
    jza = np.diag(jz_diagonal(dimer.site_a.basis()))
    jzb = np.diag(jz_diagonal(dimer.site_b.basis()))
    j = exchange_coefficient(dimer, b_mt, voltage)
    h = np.kron(ha, np.eye(nb)) + np.kron(np.eye(na), hb) + j * np.kron(jza, jzb)
    return OperatorMatrix(h, dimer_basis(dimer))


def dimer_spectrum(dimer: DimerSystem, b_mt: float, voltage: float = 0.0) -> Spectrum:
    h = compose(dimer, b_mt, voltage)
    return sector_diagonalize(h, nuclear_sectors(h.basis))


# --------------------------------------------------------------------------
# Operating space


@dataclass
class OperatingSpace:
    """Four operating eigenstates labelled ``|q_a q_b>``.

    ``indices`` map labels to eigenstate indices of ``spectrum``. ``weights``
    holds, per label, the weights on the product characters ``00, 01, 10, 11``.
    """

    indices: dict[str, int]
    energies: dict[str, float]
    regime: str
    weights: dict[str, NDArray[np.float64]]
    spectrum: Spectrum

    @property
    def ordered(self) -> list[int]:
        return [self.indices[k] for k in LABELS]

    def vector(self, label: str) -> NDArray[np.complex128]:
        return self.spectrum.states[:, self.indices[label]]


def product_characters(dimer: DimerSystem, b_mt: float, voltage: float = 0.0) -> dict[str, NDArray[np.complex128]]:
    """Product states ``|q_a q_b>`` of uncoupled site states (q = 0 lower, 1 upper)."""
    sa = site_pair_states(dimer, 0, b_mt)
    sb = site_pair_states(dimer, 1, b_mt, voltage)
    return {lab: np.kron(sa[:, int(lab[0])], sb[:, int(lab[1])]) for lab in LABELS}


def identify_operating_space(spectrum: Spectrum, characters: dict[str, NDArray]) -> OperatingSpace:
    """Select and label the four operating eigenstates by product character.

    Regime ``as`` when each middle state has dominant weight >= 0.9, ``s``
    when both middle weights are within 0.05 of 1/2 or the middle pair is
    degenerate (the upper state is then called ``|10>``), otherwise ``mixed``.
    """
    chars = np.array([characters[k] for k in LABELS])  # (4, d)
    w = np.abs(chars.conj() @ spectrum.states) ** 2  # (4, n_states)
    total = w.sum(axis=0)
    pick = np.sort(np.argsort(-total, kind="stable")[:4])
    if total[pick].min() < 0.5:
        raise DimerError("operating space not found: product characters poorly represented")
    sub = w[:, pick]
    idx: dict[str, int] = {}
    i00 = int(pick[np.argmax(sub[0])])
    i11 = int(pick[np.argmax(sub[3])])
    middle = [int(i) for i in pick if i not in (i00, i11)]
    if len(middle) != 2:
        raise DimerError("ambiguous operating-space assignment")
    lo, hi = sorted(middle, key=lambda i: spectrum.energies[i])
    mw = {i: w[1:3, i] / max(w[1:3, i].sum(), 1e-300) for i in middle}  # (w01, w10)
    dom = min(max(mw[i]) for i in middle)
    degenerate = spectrum.energies[hi] - spectrum.energies[lo] < DEGENERACY_TOL
    if degenerate:
        # any rotation of a degenerate pair is an eigenbasis: symmetric point
        regime = "s"
        idx["10"], idx["01"] = hi, lo
    elif dom >= AS_WEIGHT:
        regime = "as"
        if mw[hi][1] >= mw[hi][0]:
            idx["10"], idx["01"] = hi, lo
        else:
            idx["10"], idx["01"] = lo, hi
    elif all(abs(mw[i][0] - 0.5) <= S_WEIGHT_TOL for i in middle):
        regime = "s"
        idx["10"], idx["01"] = hi, lo
    else:
        regime = "mixed"
        i10 = max(middle, key=lambda i: mw[i][1])
        idx["10"] = i10
        idx["01"] = lo if i10 == hi else hi
    idx["00"], idx["11"] = i00, i11
    return OperatingSpace(
        indices={k: idx[k] for k in LABELS},
        energies={k: float(spectrum.energies[idx[k]]) for k in LABELS},
        regime=regime,
        weights={k: w[:, idx[k]].copy() for k in LABELS},
        spectrum=spectrum,
    )


def operating_space(dimer: DimerSystem, b_mt: float, voltage: float = 0.0) -> OperatingSpace:
    spec = dimer_spectrum(dimer, b_mt, voltage)
    return identify_operating_space(spec, product_characters(dimer, b_mt, voltage))


@dataclass
class OperatingBlock:
    """The exact 4-level ``(M_I^a, M_I^b) = (-1/2, -1/2)`` block.

    ``hamiltonian`` and ``drive`` are 4x4 in the block's product basis;
    ``space`` labels its eigenstates.
    """

    hamiltonian: NDArray[np.complex128]
    drive: NDArray[np.complex128]
    basis: tuple
    space: OperatingSpace
    voltage: float


def operating_block(dimer: DimerSystem, b_mt: float, voltage: float = 0.0) -> OperatingBlock:
    h = compose(dimer, b_mt, voltage)
    m_i = dimer.target_mi
    sel = [i for i, lab in enumerate(h.basis) if lab[1] == m_i and lab[3] == m_i]
    basis = tuple(h.basis[i] for i in sel)
    hb = h.matrix[np.ix_(sel, sel)]
    e, v = np.linalg.eigh(hb)
    spec = Spectrum(e, fix_phases(v), basis)
    chars = {k: c[sel] for k, c in product_characters(dimer, b_mt, voltage).items()}
    space = identify_operating_space(spec, chars)
    jz = jz_diagonal(basis, 0) + jz_diagonal(basis, 1)
    return OperatingBlock(hb, np.diag(jz).astype(complex), basis, space, voltage)


# --------------------------------------------------------------------------
# delta-f and exchange profile


@dataclass
class DeltaF:
    value_mhz: float
    regime: str
    energies: dict[str, float]


def delta_f(dimer: DimerSystem, b_mt: float, voltage: float = 0.0) -> DeltaF:
    """``E(|10>) - E(|01>)`` in MHz with the regime tag of the labelling.

    The labelling is only meaningful in the ``as`` and ``s`` regimes; ``mixed``
    results carry that tag and should not be read as a sign convention.
    """
    space = operating_block(dimer, b_mt, voltage).space
    val = (space.energies["10"] - space.energies["01"]) * GHZ_TO_MHZ
    return DeltaF(float(val), space.regime, space.energies)


def flip_flop_splitting(dimer: DimerSystem, b_mt: float) -> float:
    """Splitting of the two middle operating states at zero voltage (GHz)."""
    e = operating_block(dimer, b_mt, 0.0).space.energies
    return abs(e["10"] - e["01"])


@dataclass
class ExchangeProfile:
    b_mt: NDArray[np.float64]
    j_mhz: NDArray[np.float64]  # (n_B, 16) per-level effective shift
    delta_f_on: NDArray[np.float64]
    delta_f_off: NDArray[np.float64]
    regime_on: list[str] = field(default_factory=list)
    regime_off: list[str] = field(default_factory=list)

    @property
    def delta_f_sec(self) -> NDArray[np.float64]:
        """E-field contribution: on minus off."""
        return self.delta_f_on - self.delta_f_off


def level_exchange(dimer: DimerSystem, b_mt: float) -> NDArray[np.float64]:
    """Per-level ``j_i = D_geom <J_z>_i^a <J_z>_i^b / M_J^2`` (MHz) at zero voltage."""
    d_geom = geometric_coupling(dimer.geometry, dimer.site_a.g_j)
    mj2 = dimer.site_a.doublet_mj * dimer.site_b.doublet_mj
    moments = []
    for site in (0, 1):
        spec = site_spectrum(dimer, site, b_mt)
        moments.append((np.abs(spec.states) ** 2).T @ jz_diagonal(spec.basis))
    return d_geom * moments[0] * moments[1] / mj2 * GHZ_TO_MHZ


def exchange_profile(dimer: DimerSystem, b_grid_mt: Sequence[float], voltage: float = OPERATING_VOLTAGE) -> ExchangeProfile:
    b = np.asarray(b_grid_mt, dtype=float)
    on = [delta_f(dimer, x, voltage) for x in b]
    off = [delta_f(dimer, x, 0.0) for x in b]
    return ExchangeProfile(
        b,
        np.array([level_exchange(dimer, x) for x in b]),
        np.array([d.value_mhz for d in on]),
        np.array([d.value_mhz for d in off]),
        [d.regime for d in on],
        [d.regime for d in off],
    )


def composition_table(dimer: DimerSystem, state: NDArray, b_mt: float, voltage: float = 0.0,
                      basis: str = "product_eigen", cutoff: float = 1e-12) -> dict[tuple, float]:
    """Weights of a dimer state by sector.

    ``product_eigen``: keys are site-level pairs ``(i_a, i_b)`` of the
    uncoupled site eigenstates. ``hyperfine``: keys are ``(M_I^a, M_I^b)``.
    Entries below ``cutoff`` are dropped; weights sum to 1.
    """
    state = np.asarray(state, dtype=complex)
    state = state / np.linalg.norm(state)
    if basis == "hyperfine":
        out: dict[tuple, float] = {}
        labels = dimer_basis(dimer)
        for amp, lab in zip(state, labels):
            key = (lab[1], lab[3])
            out[key] = out.get(key, 0.0) + abs(amp) ** 2
    elif basis == "product_eigen":
        sa = site_spectrum(dimer, 0, b_mt).states
        sb = site_spectrum(dimer, 1, b_mt, voltage).states
        amps = sa.conj().T @ state.reshape(sa.shape[0], sb.shape[0]) @ sb.conj()
        w = np.abs(amps) ** 2
        out = {(int(i), int(k)): float(w[i, k]) for i, k in zip(*np.nonzero(w > cutoff))}
    else:
        raise DimerError(f"unknown composition basis {basis!r}")
    return {k: float(v) for k, v in sorted(out.items()) if v > cutoff}


# --------------------------------------------------------------------------
# Calibration


def calibrate_separation(dimer: DimerSystem, target_mhz: float = TARGET_DELTA_F_MHZ,
                         b_mt: float = OPERATING_FIELD_MT, bracket=(5.0, 500.0)) -> DimerSystem:
    """Distance making the zero-voltage delta-f at ``b_mt`` equal ``target_mhz``."""

    def resid(log_r):
        return math.log(flip_flop_splitting(dimer.with_distance(math.exp(log_r)), b_mt) * GHZ_TO_MHZ / target_mhz)

    lo, hi = (math.log(x) for x in bracket)
    if resid(lo) * resid(hi) > 0:
        raise DimerError("target delta-f not reachable within the distance bracket")
    r = math.exp(brentq(resid, lo, hi, xtol=1e-12))
    return dimer.with_distance(r)


def spectator_detunings(dimer: DimerSystem, b_mt: float = OPERATING_FIELD_MT,
                        voltage: float = OPERATING_VOLTAGE) -> tuple[float, float]:
    """Detunings (MHz) of the site-b flips 00->01 and 10->11 from the site-a carrier E10 - E00."""
    e = operating_block(dimer, b_mt, voltage).space.energies
    f_a = e["10"] - e["00"]
    return ((e["01"] - e["00"] - f_a) * GHZ_TO_MHZ, (e["11"] - e["10"] - f_a) * GHZ_TO_MHZ)


def calibrate_sec(dimer: DimerSystem, target_mhz: float = TARGET_DELTA_F_ON_MHZ,
                  b_mt: float = OPERATING_FIELD_MT, voltage: float = OPERATING_VOLTAGE) -> DimerSystem:
    """Gap slope dDelta/dE on site b (negative) synchronising the spectator transitions.

    The mean magnitude of the two site-b spectator detunings is set to
    ``target_mhz`` so both complete (nearly) whole generalised Rabi cycles
    during a site-a pi pulse.
    """

    def resid(sec):
        d1, d2 = spectator_detunings(dimer.with_sec(sec), b_mt, voltage)
        return 0.5 * (abs(d1) + abs(d2)) - target_mhz

    e = voltage / dimer.site_b.e_response.gap_m
    hi = -5.0 * target_mhz / GHZ_TO_MHZ / e
    if resid(-1e-15) * resid(hi) > 0:
        raise DimerError("target spectator detuning not reachable")
    return dimer.with_sec(brentq(resid, hi, -1e-15, xtol=1e-20, rtol=1e-14))
