import math

import numpy as np
import pytest

from ctqubits import dimer as dm, pulses as pu
from ctqubits.constants import US

PI_NS = pu.pi_time(pu.RABI_MHZ)


def pi_seq(target=("00", "10"), voltage=dm.OPERATING_VOLTAGE, frame=pu.RWA, initial=None):
    return pu.PulseSequence([pu.pi_pulse(target)], initial or target[0], voltage, frame)


def test_pi_time():
    assert PI_NS == pytest.approx(800.0)


def test_segment_validation():
    with pytest.raises(pu.PulseError):
        pu.Segment("laser", 1.0)
    with pytest.raises(pu.PulseError):
        pu.Segment(pu.FREE, -1.0)
    with pytest.raises(pu.PulseError):
        pu.Segment(pu.MICROWAVE, 0.0, omega_mhz=1.0, target=("00", "10"))
    with pytest.raises(pu.PulseError):
        pu.Segment(pu.MICROWAVE, 10.0, omega_mhz=1.0)
    with pytest.raises(pu.PulseError):
        pu.Segment(pu.EFIELD, 10.0)
    with pytest.raises(pu.PulseError):
        pu.Segment(pu.EFIELD, 10.0, voltage=1.0, ramp_ns=20.0)
    with pytest.raises(pu.PulseError):
        pu.PulseSequence([], frame="weird")


def test_free_evolution_keeps_eigenstate(block):
    res = pu.propagate_sequence(pu.PulseSequence([pu.Segment(pu.FREE, 1234.5)], "01", 0.0), block)
    assert res.populations["01"] == pytest.approx(1.0, abs=1e-12)


def test_pi_pulse_transfer(block):
    res = pu.propagate_sequence(pi_seq(), block)
    assert res.populations["10"] > 0.999
    u = res.unitary
    assert np.abs(u @ u.conj().T - np.eye(4)).max() < 1e-10


def test_lab_frame_agrees_with_rwa(block):
    rwa = pu.propagate_sequence(pi_seq(), block)
    lab = pu.propagate_sequence(pi_seq(frame=pu.LAB), block)
    assert abs(rwa.populations["10"] - lab.populations["10"]) < 1e-5


def test_off_resonance_guard(block):
    f = block.transition("00", "10", dm.OPERATING_VOLTAGE)
    seg = pu.Segment(pu.MICROWAVE, PI_NS, omega_mhz=pu.RABI_MHZ, target=("00", "10"), carrier_ghz=f + 0.01)
    with pytest.raises(pu.OffResonanceError):
        pu.propagate_sequence(pu.PulseSequence([seg], "00", dm.OPERATING_VOLTAGE), block)
    lab = pu.propagate_sequence(pu.PulseSequence([seg], "00", dm.OPERATING_VOLTAGE, pu.LAB), block)
    assert lab.populations["10"] < 0.01


def test_double_excitation_target_rejected(block):
    seg = pu.pi_pulse(("00", "11"))
    with pytest.raises(pu.PulseError):
        pu.propagate_sequence(pu.PulseSequence([seg], "00", 0.0), block)


def test_unknown_label(block):
    with pytest.raises(pu.PulseError):
        block.index("22", 0.0)
    with pytest.raises(pu.PulseError):
        block.index(9, 0.0)


def test_free_segment_associativity(block):
    pre = pi_seq().segments
    one = pu.PulseSequence(pre + [pu.Segment(pu.EFIELD, 3000.0, voltage=0.0)], "00", dm.OPERATING_VOLTAGE)
    two = pu.PulseSequence(pre + [pu.Segment(pu.EFIELD, 1100.0, voltage=0.0), pu.Segment(pu.FREE, 1900.0)], "00",
                           dm.OPERATING_VOLTAGE)
    a, b = pu.propagate_sequence(one, block).state, pu.propagate_sequence(two, block).state
    assert np.abs(a - b).max() < 1e-12


def test_norm_preserved_per_segment(block):
    seq = pu.bell_sequence(block, "phi")
    for k in range(1, len(seq.segments) + 1):
        part = pu.PulseSequence(seq.segments[:k], seq.initial, seq.initial_voltage)
        assert abs(np.linalg.norm(pu.propagate_sequence(part, block).state) - 1) < 1e-10


def test_ramp_approaches_sudden_limit(block):
    seq = lambda ramp: pu.PulseSequence(pi_seq().segments + [pu.Segment(pu.EFIELD, 2.0, voltage=0.0, ramp_ns=ramp)],
                                        "00", dm.OPERATING_VOLTAGE)
    sudden = pu.propagate_sequence(seq(0.0), block).state
    ramped = pu.propagate_sequence(seq(1e-3), block).state
    assert abs(abs(np.vdot(sudden, ramped)) - 1) < 1e-9


def test_rabi_scan_pi_time(block):
    scan = pu.rabi_scan(block)
    assert scan.pi_time_ns == pytest.approx(PI_NS, rel=1e-3)


def test_swap_matches_spectrum(block):
    rec = pu.swap_oscillation(block)
    assert rec.frequency_mhz == pytest.approx(rec.spectral_splitting_mhz, rel=1e-2)
    assert 2.5 * US <= rec.full_transfer_ns <= 10 * US
    assert rec.sqrt_swap_ns == pytest.approx(rec.full_transfer_ns / 2)


def test_swap_zero_coupling(monomers):
    with pytest.raises(pu.NoOscillationError):
        pu.swap_oscillation(monomers)


@pytest.mark.parametrize("variant", ["phi", "psi"])
def test_bell_protocol(block, variant):
    rep = pu.bell_protocol(block, variant)
    assert rep.fidelity > 0.99 and rep.concurrence > 0.98
    assert rep.gap_mismatch_mhz < pu.RABI_MHZ


def test_bell_without_wait_is_separable(dimer):
    # Tenfold spin-electric slope: spectator flips are far off resonance.
    sec = dimer.site_b.e_response.coefficients[(4, 4)]
    system = pu.block_system(dimer.with_sec(10 * sec))
    assert pu.bell_protocol(system, "phi", wait_ns=0.0).concurrence < 0.01


def test_damping_degrades_bell(block):
    closed = pu.bell_protocol(block, "phi")
    damped = pu.bell_protocol(block, "phi", damping=pu.Damping(4 * US, 8 * US))
    assert damped.fidelity < closed.fidelity
    rho = damped.result.rho
    assert abs(np.trace(rho) - 1) < 1e-10 and np.linalg.eigvalsh(rho).min() > -1e-10


def test_damping_validation(dimer):
    with pytest.raises(pu.PulseError):
        pu.Damping(1.0, 3.0)
    manifold = pu.manifold_system(dimer)
    with pytest.raises(pu.PulseError):
        pu.propagate_sequence(pi_seq(voltage=0.0), manifold, damping=pu.Damping(1e3, 1e3))


def test_monomer_two_pi_returns(monomers):
    # at 300 V the two monomer transitions are split, so "10" is a pure site-a flip
    v = dm.OPERATING_VOLTAGE
    pulse = pu.resolve_segment(monomers, pu.pi_pulse(("00", "10")), v)
    rep = pu.monomer_cancellation_check(pu.PulseSequence([pulse, pulse], "00", v), monomers)
    assert rep.ground_fidelity > 0.999 and rep.compliant


def test_monomer_single_pi_noncompliant(monomers):
    v = dm.OPERATING_VOLTAGE
    pulse = pu.resolve_segment(monomers, pu.pi_pulse(("00", "10")), v)
    rep = pu.monomer_cancellation_check(pu.PulseSequence([pulse], "00", v), monomers)
    assert rep.ground_fidelity < 0.01 and not rep.compliant


def test_monomer_bell_phi_compliant(block, monomers):
    rep = pu.monomer_cancellation_check(pu.bell_sequence(block, "phi"), monomers)
    assert rep.compliant and rep.rotation_angle_rad == pytest.approx(2 * math.pi)


def test_initialization_identity(dimer):
    system = pu.manifold_system(dimer)
    rep = pu.initialization_transfer(system, [], start="00")
    assert rep.final_population == 1.0


def test_initialization_ladder(dimer):
    system = pu.manifold_system(dimer)
    rep = pu.initialization_transfer(system, pu.default_ladder(system), monomer=pu.manifold_system(dimer.uncoupled()))
    assert rep.final_population > 0.99
    assert rep.monomer_overlap < 0.1
    assert all(r["ok"] for r in rep.rung_status)


def test_concurrence_oracles():
    assert pu.concurrence(pu.bell_state("phi")) == pytest.approx(1.0)
    assert pu.concurrence(np.array([1, 0, 0, 0], complex)) == pytest.approx(0.0, abs=1e-12)
    p = 0.9
    phi = pu.bell_state("phi")
    werner = p * np.outer(phi, phi.conj()) + (1 - p) * np.eye(4) / 4
    assert pu.concurrence(werner) == pytest.approx((3 * p - 1) / 2, abs=1e-12)


def test_concurrence_rejects_invalid():
    with pytest.raises(pu.PulseError):
        pu.concurrence(np.diag([1.2, -0.2, 0, 0]))
    with pytest.raises(pu.PulseError):
        pu.concurrence(np.eye(3) / 3)


def test_bell_fidelity_phase_invariant():
    for ph in (0.0, 0.7, 2.5):
        assert pu.bell_fidelity(np.exp(1j * 1.3) * pu.bell_state("psi", ph), "psi") == pytest.approx(1.0)
    with pytest.raises(pu.PulseError):
        pu.bell_fidelity(np.eye(4) / 4, "chi")
