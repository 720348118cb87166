"""Piecewise microwave / E-field pulse sequences on dimer eigenbases.

Frames
------
Every eigenstate carries an excitation number ``K`` (number of sites in the
upper CT state). The drive is ``Omega cos(2 pi f_c t + phi) M / |M_target|``
with ``M = J_z^a + J_z^b`` (parallel-mode excitation), normalised so that the
target transition has Rabi frequency ``Omega`` and a pi pulse lasts
``1 / (2 Omega)``.

``rwa``
    Keeps only drive terms between states with ``Delta K = 1`` at their
    co-rotating frequency; each segment is time independent in the frame
    ``exp(-2 pi i f_c K t)`` referenced to absolute time.
``lab``
    Full cosine drive including counter-rotating terms, integrated over one
    carrier period with exponential midpoint steps and raised to the number
    of whole periods (validation oracle).

Units: MHz for Rabi frequencies, GHz for energies and carriers, ns for time.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import expm
from scipy.optimize import curve_fit

from .constants import GHZ_TO_MHZ, US
from .dimer import (
    LABELS,
    OPERATING_FIELD_MT,
    OPERATING_VOLTAGE,
    RABI_MHZ,
    DimerSystem,
    compose,
    dimer_spectrum,
    identify_operating_space,
    operating_block,
    product_characters,
    site_spectrum,
)
from .spin_core import jz_diagonal

log = logging.getLogger(__name__)

MICROWAVE, EFIELD, FREE = "microwave", "efield", "free"
SEGMENT_KINDS = (MICROWAVE, EFIELD, FREE)
RWA, LAB = "rwa", "lab"
RESONANCE_WIDTHS = 3.0
LAB_STEPS_PER_PERIOD = 64
RAMP_STEPS = 50
UPPER_SITE_LEVEL = 8  # site levels >= 8 form the upper CT branch


class PulseError(ValueError):
    pass


class OffResonanceError(PulseError):
    """Carrier too far from the target transition for the rotating-wave frame."""


class NoOscillationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Sequences


@dataclass(frozen=True)
class Segment:
    """One sequence step.

    ``microwave`` drives ``target = (lower, upper)`` (labels or eigenstate
    indices) at the current voltage; ``carrier_ghz`` defaults to the target
    resonance. ``efield`` switches the electrode voltage (optional linear
    ramp) and then evolves freely for ``duration_ns``. ``free`` waits.
    """

    kind: str
    duration_ns: float
    omega_mhz: float = 0.0
    carrier_ghz: float | None = None
    phase_rad: float = 0.0
    voltage: float | None = None
    target: tuple | None = None
    ramp_ns: float = 0.0
    drive_ghz: float | None = None  # lab amplitude per unit M; overrides the Omega normalisation

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise PulseError(f"unknown segment kind {self.kind!r}")
        if not math.isfinite(self.duration_ns) or self.duration_ns < 0:
            raise PulseError("duration_ns must be finite and non-negative")
        if self.kind == MICROWAVE:
            if self.duration_ns <= 0:
                raise PulseError("microwave duration_ns must be positive")
            if self.target is None or len(self.target) != 2:
                raise PulseError("microwave segment needs target = (lower, upper)")
            if not self.omega_mhz > 0:
                raise PulseError("microwave omega_mhz must be positive")
        if self.kind == EFIELD:
            if self.voltage is None:
                raise PulseError("efield segment needs a voltage")
            if self.ramp_ns < 0 or self.ramp_ns > self.duration_ns:
                raise PulseError("ramp_ns must lie within the segment duration")

    @property
    def angle(self) -> float:
        """Nominal rotation angle 2 pi Omega t (pi for a pi pulse)."""
        return 2 * np.pi * self.omega_mhz / GHZ_TO_MHZ * self.duration_ns if self.kind == MICROWAVE else 0.0


def pi_pulse(target, omega_mhz: float = RABI_MHZ, **kw) -> Segment:
    return Segment(MICROWAVE, pi_time(omega_mhz), omega_mhz=omega_mhz, target=tuple(target), **kw)


def resolve_segment(system: "PulseSystem", seg: Segment, voltage: float) -> Segment:
    """Copy of a microwave segment with explicit carrier and drive amplitude from ``system``."""
    if seg.kind != MICROWAVE:
        return seg
    eig = system.eigen(voltage)
    lo, hi = system.index(seg.target[0], voltage), system.index(seg.target[1], voltage)
    m = eig.states.conj().T @ system.drive @ eig.states
    carrier = seg.carrier_ghz if seg.carrier_ghz is not None else abs(float(eig.energies[hi] - eig.energies[lo]))
    return dataclasses.replace(seg, carrier_ghz=carrier, drive_ghz=_amplitude(m, seg, lo, hi))


def resolve_sequence(system: "PulseSystem", seq: "PulseSequence") -> "PulseSequence":
    """Pin carriers and amplitudes of every microwave segment on ``system``."""
    v = seq.initial_voltage
    out = []
    for seg in seq.segments:
        if seg.kind == EFIELD:
            v = float(seg.voltage)
        out.append(resolve_segment(system, seg, v))
    return PulseSequence(out, seq.initial, seq.initial_voltage, seq.frame)


def pi_time(omega_mhz: float) -> float:
    """Pi-pulse duration (ns) for Rabi frequency ``omega_mhz``."""
    return US / (2.0 * omega_mhz)


@dataclass
class PulseSequence:
    segments: list[Segment]
    initial: str | int = "00"
    initial_voltage: float = 0.0
    frame: str = RWA

    def __post_init__(self):
        if self.frame not in (RWA, LAB):
            raise PulseError(f"unknown frame {self.frame!r}")
        self.segments = list(self.segments)

    @property
    def duration_ns(self) -> float:
        return float(sum(s.duration_ns for s in self.segments))


# --------------------------------------------------------------------------
# Systems


@dataclass
class Eigen:
    energies: NDArray[np.float64]
    states: NDArray[np.complex128]  # columns in the bare basis
    excitation: NDArray[np.int64]
    labels: dict[str, int]
    regime: str = ""


class PulseSystem:
    """Bare Hamiltonian per voltage, drive operator and labelled eigenbases."""

    def __init__(self, hamiltonian: Callable[[float], NDArray], drive: NDArray, eigen: Callable[[float], Eigen],
                 name: str = ""):
        self._h = hamiltonian
        self.drive = np.asarray(drive, dtype=complex)
        self._eigen = eigen
        self._cache: dict[float, Eigen] = {}
        self.name = name

    @property
    def dim(self) -> int:
        return self.drive.shape[0]

    def hamiltonian(self, voltage: float) -> NDArray[np.complex128]:
        return self._h(float(voltage))

    def eigen(self, voltage: float) -> Eigen:
        v = float(voltage)
        if v not in self._cache:
            self._cache[v] = self._eigen(v)
        return self._cache[v]

    def index(self, key, voltage: float) -> int:
        eig = self.eigen(voltage)
        if isinstance(key, str):
            if key not in eig.labels:
                raise PulseError(f"unknown state label {key!r}")
            return eig.labels[key]
        k = int(key)
        if not 0 <= k < self.dim:
            raise PulseError(f"state index {k} out of range")
        return k

    def transition(self, lower, upper, voltage: float) -> float:
        eig = self.eigen(voltage)
        return float(eig.energies[self.index(upper, voltage)] - eig.energies[self.index(lower, voltage)])


def block_system(dimer: DimerSystem, b_mt: float = OPERATING_FIELD_MT) -> PulseSystem:
    """Exact 4-level operating block; eigenstates labelled ``00 .. 11``."""
    cache: dict[float, object] = {}

    def block(v):
        if v not in cache:
            cache[v] = operating_block(dimer, b_mt, v)
        return cache[v]

    def eigen(v):
        blk = block(v)
        sp = blk.space
        k = np.zeros(4, dtype=np.int64)
        for lab, i in sp.indices.items():
            k[i] = int(lab[0]) + int(lab[1])
        return Eigen(sp.spectrum.energies, sp.spectrum.states, k, dict(sp.indices), sp.regime)

    return PulseSystem(lambda v: block(v).hamiltonian, block(0.0).drive, eigen, f"block B={b_mt} mT")


def manifold_system(dimer: DimerSystem, b_mt: float = OPERATING_FIELD_MT) -> PulseSystem:
    """Full 256-level manifold; ``K`` from the dominant site-level pair of each eigenstate."""
    basis_h = compose(dimer, b_mt, 0.0)
    jz = jz_diagonal(basis_h.basis, 0) + jz_diagonal(basis_h.basis, 1)

    def eigen(v):
        spec = dimer_spectrum(dimer, b_mt, v)
        sa = site_spectrum(dimer, 0, b_mt).states
        sb = site_spectrum(dimer, 1, b_mt, v).states
        na, nb = sa.shape[0], sb.shape[0]
        amps = np.einsum("ia,ijs,jb->sab", sa.conj(), spec.states.reshape(na, nb, -1), sb.conj())
        flat = (np.abs(amps) ** 2).reshape(spec.dim, -1).argmax(axis=1)
        la, lb = np.divmod(flat, nb)
        k = (la >= UPPER_SITE_LEVEL).astype(np.int64) + (lb >= UPPER_SITE_LEVEL)
        space = identify_operating_space(spec, product_characters(dimer, b_mt, v))
        return Eigen(spec.energies, spec.states, k, dict(space.indices), space.regime)

    return PulseSystem(lambda v: compose(dimer, b_mt, v).matrix, np.diag(jz).astype(complex), eigen,
                       f"manifold B={b_mt} mT")


# --------------------------------------------------------------------------
# Dissipation


@dataclass(frozen=True)
class Damping:
    """Lindblad relaxation (``T1``) and pure dephasing from ``T2`` per site, in ns.

    Collapse operators act between operating labels (``|1> -> |0>`` on each
    site) and as site ``Z`` in the eigenbasis; valid in the ``as`` regime and
    a documented approximation otherwise.
    """

    t1_ns: float
    t2_ns: float

    def __post_init__(self):
        if not (self.t1_ns > 0 and self.t2_ns > 0 and self.t2_ns <= 2 * self.t1_ns * (1 + 1e-12)):
            raise PulseError("need T1, T2 > 0 and T2 <= 2 T1")

    def operators(self, eig: Eigen) -> list[NDArray]:
        lab = eig.labels
        missing = set(LABELS) - set(lab)
        if missing or len(eig.energies) != 4:
            raise PulseError("damping is implemented on the 4-level operating block only")
        g1 = 1.0 / self.t1_ns
        gphi = max(1.0 / self.t2_ns - 0.5 / self.t1_ns, 0.0)
        ops = []
        for site in (0, 1):
            for lo in LABELS:
                if lo[site] == "1":
                    continue
                hi = lo[:site] + "1" + lo[site + 1:]
                c = np.zeros((4, 4), complex)
                c[lab[lo], lab[hi]] = math.sqrt(g1)
                ops.append(c)
            z = np.zeros((4, 4), complex)
            for name, i in lab.items():
                z[i, i] = 1.0 if name[site] == "1" else -1.0
            ops.append(math.sqrt(gphi / 2.0) * z)
        return ops


def _liouvillian(h: NDArray, ops: Sequence[NDArray]) -> NDArray:
    """Row-major vec generator for ``drho/dt = -2 pi i [h, rho] + sum D[c] rho``."""
    d = h.shape[0]
    eye = np.eye(d)
    L = -2j * np.pi * (np.kron(h, eye) - np.kron(eye, h.T))
    for c in ops:
        cdc = c.conj().T @ c
        L += np.kron(c, c.conj()) - 0.5 * (np.kron(cdc, eye) + np.kron(eye, cdc.T))
    return L


# --------------------------------------------------------------------------
# Propagation


@dataclass
class GateResult:
    """Outcome of a sequence.

    ``rho`` is the final density matrix on the operating labels ``00..11`` in
    the eigenbasis at the final voltage; ``unitary`` (closed systems) maps
    initial-voltage to final-voltage operating eigenstates.
    """

    state: NDArray[np.complex128]  # bare-basis vector, or density matrix when damped
    rho: NDArray[np.complex128]
    populations: dict[str, float]
    unitary: NDArray[np.complex128] | None
    log: list[dict]
    final_voltage: float
    fidelity: float | None = None
    concurrence: float | None = None
    leakage: float = 0.0

    @property
    def is_pure(self) -> bool:
        return self.state.ndim == 1


def _amplitude(m: NDArray, seg: Segment, lower: int, upper: int) -> float:
    """Lab drive amplitude (GHz per unit M)."""
    if seg.drive_ghz is not None:
        return float(seg.drive_ghz)
    norm = abs(m[upper, lower])
    if norm < 1e-12 * max(1.0, np.abs(m).max()):
        raise PulseError("target transition has no drive matrix element")
    return seg.omega_mhz / GHZ_TO_MHZ / norm


def _rotating_generator(eig: Eigen, drive: NDArray, seg: Segment, lower: int, upper: int, f_c: float) -> NDArray:
    """Time-independent RWA Hamiltonian (GHz) in the ``exp(-2 pi i f_c K t)`` frame."""
    m = eig.states.conj().T @ drive @ eig.states
    k = eig.excitation
    up = (k[:, None] - k[None, :]) == 1
    coup = np.where(up, m, 0.0) * (0.5 * _amplitude(m, seg, lower, upper)) * np.exp(-1j * seg.phase_rad)
    return np.diag(eig.energies - f_c * k) + coup + coup.conj().T


def _lab_period_propagator(eig: Eigen, drive: NDArray, seg: Segment, lower: int, upper: int, f_c: float,
                           t0: float, steps: int):
    """Exact-frame one-period propagator with the full cosine drive."""
    m = eig.states.conj().T @ drive @ eig.states
    amp = _amplitude(m, seg, lower, upper)
    k = eig.excitation.astype(float)
    dk = k[:, None] - k[None, :]
    h0 = np.diag(eig.energies - f_c * k)
    period = 1.0 / f_c
    dt = period / steps

    def gen(t):
        return h0 + amp * math.cos(2 * np.pi * f_c * t + seg.phase_rad) * m * np.exp(2j * np.pi * f_c * dk * t)

    def step_prop(t, h):
        w, v = np.linalg.eigh(gen(t + 0.5 * h))
        return (v * np.exp(-2j * np.pi * w * h)) @ v.conj().T

    u = np.eye(len(k), dtype=complex)
    for n in range(steps):
        u = step_prop(t0 + n * dt, dt) @ u
    return u, period, step_prop


def _microwave_unitary(system: PulseSystem, eig: Eigen, seg: Segment, lower: int, upper: int, f_c: float,
                       t0: float, frame: str, lab_steps: int) -> NDArray:
    """Segment propagator in the eigenbasis (lab amplitudes in, lab amplitudes out)."""
    k = eig.excitation
    t1 = t0 + seg.duration_ns
    if frame == RWA:
        h = _rotating_generator(eig, system.drive, seg, lower, upper, f_c)
        w, v = np.linalg.eigh(h)
        core = (v * np.exp(-2j * np.pi * w * seg.duration_ns)) @ v.conj().T
    else:
        up, period, step_prop = _lab_period_propagator(eig, system.drive, seg, lower, upper, f_c, t0, lab_steps)
        n_per = int(seg.duration_ns // period)
        core = np.linalg.matrix_power(up, n_per)
        rem = seg.duration_ns - n_per * period
        n_rem = int(math.ceil(rem / period * lab_steps))
        if n_rem:
            h = rem / n_rem
            tr = t0 + n_per * period
            for i in range(n_rem):
                core = step_prop(tr + i * h, h) @ core
    return np.exp(-2j * np.pi * f_c * k * t1)[:, None] * core * np.exp(2j * np.pi * f_c * k * t0)[None, :]


def _resolve_initial(system: PulseSystem, seq: PulseSequence, initial) -> NDArray:
    eig = system.eigen(seq.initial_voltage)
    if initial is None:
        initial = seq.initial
    if isinstance(initial, (str, int, np.integer)):
        return eig.states[:, system.index(initial, seq.initial_voltage)].copy()
    vec = np.asarray(initial, dtype=complex)
    if vec.shape != (system.dim,) and vec.shape != (system.dim, system.dim):
        raise PulseError("initial state has the wrong dimension")
    return vec


def propagate_sequence(
    seq: PulseSequence,
    system: PulseSystem,
    damping: Damping | None = None,
    initial=None,
    target: NDArray | None = None,
    rwa_tolerance_mhz: float | None = None,
    lab_steps: int = LAB_STEPS_PER_PERIOD,
    track_unitary: bool = True,
) -> GateResult:
    """Propagate ``seq`` from its initial label (or an explicit bare-basis state).

    ``target`` (4-vector on operating labels) sets ``fidelity``; ``concurrence``
    is always computed from the operating-space density matrix. RWA segments
    whose carrier is further than ``rwa_tolerance_mhz`` (default 3 Omega) from
    the target resonance raise ``OffResonanceError``.
    """
    psi = _resolve_initial(system, seq, initial)
    mixed = damping is not None or psi.ndim == 2
    if mixed and psi.ndim == 1:
        psi = np.outer(psi, psi.conj())
    u_total = np.eye(system.dim, dtype=complex) if (track_unitary and not mixed) else None
    v_cur = float(seq.initial_voltage)
    t = 0.0
    log_rows: list[dict] = []

    def apply(u_bare):
        nonlocal psi, u_total
        if mixed:
            psi = u_bare @ psi @ u_bare.conj().T
        else:
            psi = u_bare @ psi
            if u_total is not None:
                u_total = u_bare @ u_total

    def apply_lindblad(eig: Eigen, h_rot: NDArray, f_c: float, duration: float):
        nonlocal psi
        ops = damping.operators(eig)
        k = eig.excitation
        frame0 = np.exp(2j * np.pi * f_c * k * t)
        frame1 = np.exp(-2j * np.pi * f_c * k * (t + duration))
        rho = eig.states.conj().T @ psi @ eig.states
        rho = frame0[:, None] * rho * frame0.conj()[None, :]
        d = rho.shape[0]
        vec = expm(_liouvillian(h_rot, ops) * duration) @ rho.ravel()
        rho = vec.reshape(d, d)
        rho = frame1[:, None] * rho * frame1.conj()[None, :]
        psi = eig.states @ rho @ eig.states.conj().T

    def free(duration: float, voltage: float):
        eig = system.eigen(voltage)
        if mixed and damping is not None:
            apply_lindblad(eig, np.diag(eig.energies), 0.0, duration)
        else:
            u = (eig.states * np.exp(-2j * np.pi * eig.energies * duration)) @ eig.states.conj().T
            apply(u)

    for n, seg in enumerate(seq.segments):
        row = {"index": n, "kind": seg.kind, "t_start_ns": t, "duration_ns": seg.duration_ns}
        if seg.kind == EFIELD:
            v_new = float(seg.voltage)
            if seg.ramp_ns > 0:
                steps = RAMP_STEPS
                h = seg.ramp_ns / steps
                for i in range(steps):
                    v_mid = v_cur + (v_new - v_cur) * (i + 0.5) / steps
                    w, vv = np.linalg.eigh(system.hamiltonian(v_mid))
                    apply((vv * np.exp(-2j * np.pi * w * h)) @ vv.conj().T)
                if seg.duration_ns - seg.ramp_ns > 0:
                    free(seg.duration_ns - seg.ramp_ns, v_new)
            elif seg.duration_ns > 0:
                free(seg.duration_ns, v_new)
            row["voltage"] = v_new
            v_cur = v_new
        elif seg.kind == FREE:
            if seg.duration_ns > 0:
                free(seg.duration_ns, v_cur)
            row["voltage"] = v_cur
        else:
            eig = system.eigen(v_cur)
            lower = system.index(seg.target[0], v_cur)
            upper = system.index(seg.target[1], v_cur)
            if eig.excitation[upper] - eig.excitation[lower] != 1:
                lower, upper = upper, lower
            if eig.excitation[upper] - eig.excitation[lower] != 1:
                raise PulseError(f"target {seg.target} is not a single-excitation transition")
            f_t = float(eig.energies[upper] - eig.energies[lower])
            f_c = f_t if seg.carrier_ghz is None else float(seg.carrier_ghz)
            tol = RESONANCE_WIDTHS * seg.omega_mhz if rwa_tolerance_mhz is None else rwa_tolerance_mhz
            detuning_mhz = (f_c - f_t) * GHZ_TO_MHZ
            if seq.frame == RWA and abs(detuning_mhz) > tol:
                raise OffResonanceError(
                    f"segment {n}: carrier detuned by {detuning_mhz:.4g} MHz (> {tol:.4g} MHz); use the lab frame"
                )
            if mixed and damping is not None:
                if seq.frame != RWA:
                    raise PulseError("damping is only available in the rotating-wave frame")
                apply_lindblad(eig, _rotating_generator(eig, system.drive, seg, lower, upper, f_c), f_c, seg.duration_ns)
            else:
                u_eig = _microwave_unitary(system, eig, seg, lower, upper, f_c, t, seq.frame, lab_steps)
                apply(eig.states @ u_eig @ eig.states.conj().T)
            row.update(voltage=v_cur, carrier_ghz=f_c, detuning_mhz=detuning_mhz, omega_mhz=seg.omega_mhz,
                       angle_rad=seg.angle, target=[str(x) for x in seg.target])
        t += seg.duration_ns
        log_rows.append(row)

    eig = system.eigen(v_cur)
    return _finish(system, seq, psi, u_total, eig, v_cur, log_rows, target)


def _operating_rho(eig: Eigen, psi: NDArray) -> tuple[NDArray, float]:
    cols = eig.states[:, [eig.labels[k] for k in LABELS]]
    if psi.ndim == 1:
        amp = cols.conj().T @ psi
        rho = np.outer(amp, amp.conj())
    else:
        rho = cols.conj().T @ psi @ cols
    inside = float(np.real(np.trace(rho)))
    return rho, max(0.0, 1.0 - inside)


def _finish(system, seq, psi, u_total, eig, v_final, log_rows, target) -> GateResult:
    rho, leakage = _operating_rho(eig, psi)
    pops = {k: float(np.real(rho[i, i])) for i, k in enumerate(LABELS)}
    unitary = None
    if u_total is not None:
        e0 = system.eigen(seq.initial_voltage)
        c0 = e0.states[:, [e0.labels[k] for k in LABELS]]
        c1 = eig.states[:, [eig.labels[k] for k in LABELS]]
        unitary = c1.conj().T @ u_total @ c0
    tr = float(np.real(np.trace(rho)))
    conc = concurrence(rho / tr) if tr > 1e-12 else 0.0
    fid = None
    if target is not None:
        fid = state_fidelity(rho, target)
    return GateResult(psi, rho, pops, unitary, log_rows, v_final, fid, conc, leakage)


# --------------------------------------------------------------------------
# Figures of merit


def _check_rho(rho: NDArray, tol: float = 1e-8) -> NDArray:
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise PulseError("two-qubit density matrix must be 4x4")
    if np.abs(rho - rho.conj().T).max() > tol:
        raise PulseError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1) > tol:
        raise PulseError("density matrix does not have unit trace")
    if np.linalg.eigvalsh(rho).min() < -tol:
        raise PulseError("density matrix is not positive semidefinite")
    return rho


def concurrence(rho: NDArray) -> float:
    """Wootters concurrence of a two-qubit density matrix (basis 00, 01, 10, 11)."""
    yy = np.kron([[0, -1j], [1j, 0]], [[0, -1j], [1j, 0]])
    if np.ndim(rho) == 1:
        v = np.asarray(rho, dtype=complex)
        rho = np.outer(v, v.conj()) / np.vdot(v, v).real
    rho = _check_rho(rho)
    w, vecs = np.linalg.eigh(rho)
    if w[-1] > 1.0 - 1e-12:
        # pure state: |<psi| yy |psi*>| avoids square roots of round-off eigenvalues
        psi = vecs[:, -1]
        return float(np.clip(abs(psi @ yy @ psi), 0.0, 1.0))
    r = rho @ yy @ rho.conj() @ yy
    lam = np.sqrt(np.clip(np.sort(np.real(np.linalg.eigvals(r)))[::-1], 0.0, None))
    return float(np.clip(lam[0] - lam[1] - lam[2] - lam[3], 0.0, 1.0))


def state_fidelity(rho: NDArray, target: NDArray) -> float:
    """``<t|rho|t>`` (equals Uhlmann fidelity for a pure target)."""
    t = np.asarray(target, dtype=complex)
    t = t / np.linalg.norm(t)
    if np.ndim(rho) == 1:
        return float(abs(np.vdot(t, rho)) ** 2)
    return float(np.clip(np.real(t.conj() @ rho @ t), 0.0, 1.0))


BELL_PAIRS = {"phi": ("00", "11"), "psi": ("01", "10")}


def bell_fidelity(rho: NDArray, variant: str) -> float:
    """Fidelity with the closest ``(|x> + e^{i a}|y>)/sqrt 2`` over the relative phase ``a``."""
    if variant not in BELL_PAIRS:
        raise PulseError(f"unknown Bell variant {variant!r}")
    if np.ndim(rho) == 1:
        rho = np.outer(rho, np.conj(rho))
    x, y = (LABELS.index(k) for k in BELL_PAIRS[variant])
    return float(np.clip(0.5 * np.real(rho[x, x] + rho[y, y]) + abs(rho[x, y]), 0.0, 1.0))


def bell_state(variant: str, phase: float = 0.0) -> NDArray[np.complex128]:
    x, y = (LABELS.index(k) for k in BELL_PAIRS[variant])
    v = np.zeros(4, complex)
    v[x] = 1.0
    v[y] = np.exp(1j * phase)
    return v / math.sqrt(2.0)


# --------------------------------------------------------------------------
# Protocols


@dataclass
class RabiScan:
    durations_ns: NDArray[np.float64]
    population: NDArray[np.float64]
    rabi_mhz: float
    pi_time_ns: float


def rabi_scan(system: PulseSystem, target=("00", "10"), omega_mhz: float = RABI_MHZ, voltage: float = OPERATING_VOLTAGE,
              durations_ns: Sequence[float] | None = None) -> RabiScan:
    """Population of ``target[1]`` vs drive duration; pi time from a sinusoid fit."""
    if durations_ns is None:
        durations_ns = np.linspace(0.0, 2.5 * pi_time(omega_mhz), 61)[1:]
    d = np.asarray(durations_ns, dtype=float)
    pop = []
    for dur in d:
        seg = Segment(MICROWAVE, float(dur), omega_mhz=omega_mhz, target=tuple(target))
        res = propagate_sequence(PulseSequence([seg], target[0], voltage), system, track_unitary=False)
        pop.append(res.populations[target[1]])
    pop = np.array(pop)

    def model(x, a, f):
        return a * np.sin(np.pi * f * x) ** 2

    (a, f), _ = curve_fit(model, d, pop, p0=(1.0, omega_mhz / GHZ_TO_MHZ))
    f = abs(f)
    return RabiScan(d, pop, f * GHZ_TO_MHZ, 1.0 / (2.0 * f))


@dataclass
class SwapRecord:
    times_ns: NDArray[np.float64]
    p10: NDArray[np.float64]
    p01: NDArray[np.float64]
    frequency_mhz: float
    period_ns: float
    amplitude: float
    spectral_splitting_mhz: float

    @property
    def full_transfer_ns(self) -> float:
        """SWAP: complete |10> -> |01> transfer, 1/(2 splitting)."""
        return 0.5 * self.period_ns

    @property
    def sqrt_swap_ns(self) -> float:
        """sqrt(SWAP): quarter period, 1/(4 splitting)."""
        return 0.25 * self.period_ns


def swap_oscillation(system: PulseSystem, start: str = "10", prepare_voltage: float = OPERATING_VOLTAGE,
                     durations_ns: Sequence[float] | None = None, n_points: int = 201) -> SwapRecord:
    """Free evolution at zero voltage from the E-on eigenstate ``start``.

    Populations are read on the E-on operating states ``|10>`` and ``|01>``.
    """
    on = system.eigen(prepare_voltage)
    off = system.eigen(0.0)
    split = abs(off.energies[off.labels["10"]] - off.energies[off.labels["01"]])
    if durations_ns is None:
        span = 3.0 / split if split * GHZ_TO_MHZ > 1e-9 else 1e6
        durations_ns = np.linspace(0.0, span, n_points)
    t = np.asarray(durations_ns, dtype=float)
    psi0 = on.states[:, on.labels[start]]
    c = off.states.conj().T @ psi0
    amps = (off.states[None, :, :] * (np.exp(-2j * np.pi * np.outer(t, off.energies)) * c)[:, None, :]).sum(axis=2)
    p10 = np.abs(amps @ on.states[:, on.labels["10"]].conj()) ** 2
    p01 = np.abs(amps @ on.states[:, on.labels["01"]].conj()) ** 2
    other = p01 if start == "10" else p10
    amp = float(other.max() - other.min())
    if amp < 1e-3 or split * (t.max() - t.min()) < 0.5:
        raise NoOscillationError("no resolvable SWAP oscillation (splitting below resolution)")
    spec = np.abs(np.fft.rfft(other - other.mean()))
    freqs = np.fft.rfftfreq(len(t), t[1] - t[0])
    f0 = freqs[1:][np.argmax(spec[1:])]

    def model(x, a, f, ph, off_):
        return off_ + a * np.cos(2 * np.pi * f * x + ph)

    popt, _ = curve_fit(model, t, other, p0=(-amp / 2, f0, 0.0, other.mean()), maxfev=20000)
    f = abs(popt[1])
    return SwapRecord(t, p10, p01, f * GHZ_TO_MHZ, 1.0 / f, amp, split * GHZ_TO_MHZ)


def swap_period(system: PulseSystem) -> float:
    """Spectral SWAP period 1/splitting (ns) at zero voltage."""
    off = system.eigen(0.0)
    split = abs(off.energies[off.labels["10"]] - off.energies[off.labels["01"]])
    if split <= 0:
        raise NoOscillationError("degenerate middle states: no SWAP dynamics")
    return 1.0 / split


def bell_sequence(system: PulseSystem, variant: str = "phi", omega_mhz: float = RABI_MHZ,
                  voltage: float = OPERATING_VOLTAGE, wait_ns: float | None = None) -> PulseSequence:
    """Prepare ``|00>``, pi on site a, quarter SWAP period at E off, then (phi) pi on site a.

    Carriers are resolved on ``system`` and stored explicitly so the same
    sequence can be replayed on other systems (e.g. isolated monomers).
    """
    if variant not in BELL_PAIRS:
        raise PulseError(f"unknown Bell variant {variant!r}")
    if wait_ns is None:
        wait_ns = 0.25 * swap_period(system)
    pulse = resolve_segment(system, pi_pulse(("00", "10"), omega_mhz), voltage)
    segs = [pulse]
    if wait_ns > 0:
        segs.append(Segment(EFIELD, wait_ns, voltage=0.0))
    segs.append(Segment(EFIELD, 0.0, voltage=voltage))
    if variant == "phi":
        segs.append(pulse)
    return PulseSequence(segs, "00", voltage)


@dataclass
class BellReport:
    result: GateResult
    fidelity: float
    concurrence: float
    gap_mismatch_mhz: float  # |(E10 - E00) - (E11 - E01)| at the final voltage


def bell_protocol(system: PulseSystem, variant: str = "phi", damping: Damping | None = None,
                  sequence: PulseSequence | None = None, **kw) -> BellReport:
    seq = sequence or bell_sequence(system, variant, **kw)
    res = propagate_sequence(seq, system, damping)
    fid = bell_fidelity(res.rho, variant)
    res.fidelity = fid
    eig = system.eigen(res.final_voltage)
    e = {k: eig.energies[i] for k, i in eig.labels.items()}
    mismatch = abs((e["10"] - e["00"]) - (e["11"] - e["01"])) * GHZ_TO_MHZ
    return BellReport(res, fid, res.concurrence, float(mismatch))


@dataclass
class CancellationReport:
    ground_fidelity: float
    rotation_angle_rad: float
    compliant: bool
    result: GateResult


def monomer_cancellation_check(seq: PulseSequence, monomer: PulseSystem, threshold: float = 0.99) -> CancellationReport:
    """Replay ``seq`` (explicit carriers) on uncoupled molecules and test the return to ``|00>``.

    Carriers are deliberately off the monomer resonances for spectator
    molecules, so the resonance guard is disabled here.
    """
    res = propagate_sequence(seq, monomer, rwa_tolerance_mhz=float("inf"), track_unitary=False)
    g = res.populations["00"]
    angle = float(sum(s.angle for s in seq.segments))
    return CancellationReport(g, angle, g > threshold, res)


@dataclass
class Rung:
    lower: str | int
    upper: str | int
    omega_mhz: float
    voltage: float = 0.0


@dataclass
class InitializationReport:
    final_population: float
    populations: dict[str, float]
    rung_status: list[dict]
    monomer_overlap: float | None = None


def bright_middle(system: PulseSystem, source: str = "11", voltage: float = 0.0) -> str:
    """Middle operating label with the larger drive element to ``source``."""
    eig = system.eigen(voltage)
    m = eig.states.conj().T @ system.drive @ eig.states
    s = eig.labels[source]
    return max(("01", "10"), key=lambda lab: abs(m[eig.labels[lab], s]))


def default_ladder(system: PulseSystem, omega_mhz: float = 0.005) -> list[Rung]:
    """Pair-selective two-rung ladder ``|11> -> |bright> -> |00>`` at zero voltage."""
    mid = bright_middle(system)
    return [Rung(mid, "11", omega_mhz), Rung("00", mid, omega_mhz)]


def _ladder_sequence(system: PulseSystem, rungs: Sequence[Rung], start) -> tuple[PulseSequence, list[dict]]:
    segs, status = [], []
    v_cur = rungs[0].voltage if rungs else 0.0
    for n, r in enumerate(rungs):
        if r.voltage != v_cur:
            segs.append(Segment(EFIELD, 0.0, voltage=r.voltage))
            v_cur = r.voltage
        eig = system.eigen(r.voltage)
        lo, hi = system.index(r.lower, r.voltage), system.index(r.upper, r.voltage)
        m = eig.states.conj().T @ system.drive @ eig.states
        ok = abs(eig.excitation[hi] - eig.excitation[lo]) == 1 and abs(m[hi, lo]) > 1e-3 * np.abs(m).max()
        f = float(eig.energies[hi] - eig.energies[lo])
        status.append({"rung": n, "lower": str(r.lower), "upper": str(r.upper), "frequency_ghz": abs(f), "ok": bool(ok)})
        if ok:
            segs.append(resolve_segment(system, pi_pulse((r.lower, r.upper), r.omega_mhz), r.voltage))
    v0 = rungs[0].voltage if rungs else 0.0
    return PulseSequence(segs, start, v0), status


def initialization_transfer(system: PulseSystem, rungs: Sequence[Rung], start="11", goal: str = "00",
                            monomer: PulseSystem | None = None) -> InitializationReport:
    """Run a ladder of pi pulses and report the population delivered to ``goal``.

    Rungs whose transition is not a drivable single-excitation step are
    reported as failed and skipped. With ``monomer``, the identical pulses
    (same carriers) are replayed on uncoupled molecules for comparison.
    """
    seq, status = _ladder_sequence(system, rungs, start)
    if not seq.segments:
        eig = system.eigen(seq.initial_voltage)
        i = system.index(start, seq.initial_voltage)
        pop = 1.0 if i == eig.labels[goal] else 0.0
        return InitializationReport(pop, {goal: pop}, status)
    res = propagate_sequence(seq, system, track_unitary=False)
    for row, st in zip([r for r in res.log if r["kind"] == MICROWAVE], [s for s in status if s["ok"]]):
        st["detuning_mhz"] = row["detuning_mhz"]
    report = InitializationReport(res.populations[goal], res.populations, status)
    if monomer is not None:
        mres = propagate_sequence(PulseSequence(seq.segments, start, seq.initial_voltage), monomer,
                                  rwa_tolerance_mhz=float("inf"), track_unitary=False)
        report.monomer_overlap = mres.populations[goal]
    return report
