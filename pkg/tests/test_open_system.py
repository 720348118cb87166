import math

import numpy as np
import pytest

from ctqubits import open_system as osys
from ctqubits.constants import CM_TO_GHZ, K_B
from ctqubits.spin_core import Spectrum

SX = np.array([[0, 1], [1, 0]], complex)
SZ = np.diag([1.0, -1.0]).astype(complex)
OHMIC = osys.OhmicCutoff(0.01, 1000.0)


def two_level(f=5.0):
    return Spectrum(np.array([-f / 2, f / 2]), np.eye(2, dtype=complex), (("g",), ("e",)))


def random_system(d=6, seed=1):
    rng = np.random.default_rng(seed)
    e = np.sort(rng.uniform(0, 20, d))
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return Spectrum(e, np.eye(d, dtype=complex), tuple((i,) for i in range(d))), a + a.conj().T


def test_detailed_balance_ratio():
    f, T = 3.0, 1.5
    assert osys.bath_rate(OHMIC, T, -f) / osys.bath_rate(OHMIC, T, f) == pytest.approx(math.exp(-f / (K_B * T)))


def test_ohmic_zero_frequency_limit():
    T = 2.0
    small = osys.bath_rate(OHMIC, T, 1e-7)
    assert small == pytest.approx(OHMIC.eta * K_B * T, rel=1e-6)
    assert osys.bath_rate(OHMIC, T, 0.0) == pytest.approx(OHMIC.eta * K_B * T)


def test_superohmic_tail():
    sd = osys.LorentzianPeaks((osys.LorentzianPeak(2000.0, 10.0, 1.0),), 3.0)
    r = sd(np.array([1e-3, 2e-3]), 5.0)
    assert r[1] / r[0] == pytest.approx(8.0, rel=1e-4)
    assert sd.zero_slope(5.0) == 0.0


def test_lorentzian_width_grows_with_temperature():
    pk = osys.LorentzianPeak(68.4 * CM_TO_GHZ, 0.0, 1.0, anharmonic=CM_TO_GHZ)
    assert pk.width_at(3.0) < pk.width_at(11.0)


def test_bath_rate_rejects_zero_temperature():
    with pytest.raises(ValueError):
        osys.bath_rate(OHMIC, 0.0, 1.0)


def test_zero_coupling_tensor():
    t = osys.build_redfield(osys.RedfieldModel(two_level(), [np.zeros((2, 2))], OHMIC, 1.0))
    assert np.abs(t.R).max() == 0.0


def test_model_validation():
    with pytest.raises(ValueError):
        osys.RedfieldModel(two_level(), [np.array([[0, 1], [0, 0]])], OHMIC, 1.0)
    with pytest.raises(ValueError):
        osys.RedfieldModel(two_level(), [np.eye(3)], OHMIC, 1.0)
    with pytest.raises(ValueError):
        osys.RedfieldModel(two_level(), [SX], OHMIC, 0.0)


@pytest.mark.parametrize("secular", [True, False])
def test_trace_preservation(secular):
    spec, a = random_system()
    L = osys.build_redfield(osys.RedfieldModel(spec, [a], OHMIC, 0.5, secular)).liouvillian()
    d = spec.dim
    assert np.abs(np.eye(d).ravel() @ L).max() < 1e-12 * np.abs(L).max()


def test_closed_system_rotation():
    spec = two_level(5.0)
    t = osys.build_redfield(osys.RedfieldModel(spec, [np.zeros((2, 2))], OHMIC, 1.0))
    rho0 = np.full((2, 2), 0.5, complex)
    tr = osys.propagate(rho0, t, spec, [0.0, 0.13, 1.7])
    np.testing.assert_allclose(tr.rho[:, 1, 1].real, 0.5, atol=1e-14)
    omega = spec.omega(0, 1)
    np.testing.assert_allclose(tr.element(0, 1), 0.5 * np.exp(-1j * omega * tr.times), atol=1e-12)


def test_gibbs_steady_state():
    spec, a = random_system()
    t = osys.build_redfield(osys.RedfieldModel(spec, [a], OHMIC, 0.5))
    tr = osys.propagate(np.eye(6, dtype=complex) / 6, t, spec, [0.0, 1e6, 1e8])
    assert np.abs(tr.rho[-1] - osys.gibbs_state(spec.energies, 0.5)).max() < 1e-6


def test_golden_rule_rate():
    f, T = 5.0, 2.0
    spec = two_level(f)
    L = osys.build_redfield(osys.RedfieldModel(spec, [SX], OHMIC, T)).liouvillian()
    pop = L[np.ix_([0, 3], [0, 3])]  # population block of vec(rho)
    rate = -np.linalg.eigvals(pop).real.min()
    gamma = osys.bath_rate(OHMIC, T, f) + osys.bath_rate(OHMIC, T, -f)
    assert rate == pytest.approx(gamma, rel=1e-10)


def test_t1_t2_transverse():
    f, T = 5.0, 2.0
    spec = two_level(f)
    tens = osys.build_redfield(osys.RedfieldModel(spec, [SX], OHMIC, T))
    times = osys.auto_times(tens)
    t1 = osys.extract_T1(osys.propagate(np.diag([0, 1]).astype(complex), tens, spec, times), np.diag([-1.0, 1.0]))
    t2 = osys.extract_T2(osys.propagate(np.full((2, 2), 0.5, complex), tens, spec, times), 0, 1)
    gamma = osys.bath_rate(OHMIC, T, f) + osys.bath_rate(OHMIC, T, -f)
    assert t1.tau * gamma == pytest.approx(1.0, rel=1e-2)
    assert t2.tau / t1.tau == pytest.approx(2.0, rel=1e-2)


def test_pure_dephasing_shortens_t2():
    f, T = 5.0, 2.0
    spec = two_level(f)
    tens = osys.build_redfield(osys.RedfieldModel(spec, [SX, 0.3 * SZ], OHMIC, T))
    times = osys.auto_times(tens)
    t1 = osys.extract_T1(osys.propagate(np.diag([0, 1]).astype(complex), tens, spec, times), np.diag([-1.0, 1.0]))
    t2 = osys.extract_T2(osys.propagate(np.full((2, 2), 0.5, complex), tens, spec, times), 0, 1)
    assert t2.tau < 2 * t1.tau


def test_hermiticity_and_trace_along_trajectory():
    spec, a = random_system(seed=3)
    tens = osys.build_redfield(osys.RedfieldModel(spec, [a], OHMIC, 0.8))
    rng = np.random.default_rng(0)
    psi = rng.normal(size=6) + 1j * rng.normal(size=6)
    psi /= np.linalg.norm(psi)
    tr = osys.propagate(np.outer(psi, psi.conj()), tens, spec, osys.auto_times(tens, 60))
    assert np.abs(np.trace(tr.rho, axis1=1, axis2=2) - 1).max() < 1e-10
    assert np.abs(tr.rho - tr.rho.conj().transpose(0, 2, 1)).max() < 1e-10


def test_propagate_rejects_bad_density():
    spec = two_level()
    tens = osys.build_redfield(osys.RedfieldModel(spec, [SX], OHMIC, 1.0))
    with pytest.raises(ValueError):
        osys.propagate(np.diag([1.0, 1.0]).astype(complex), tens, spec, [0.0])


def test_bdf_path_matches_exact():
    spec, a = random_system(d=17, seed=5)
    tens = osys.build_redfield(osys.RedfieldModel(spec, [0.1 * a], OHMIC, 0.5))
    rho0 = np.zeros((17, 17), complex)
    rho0[16, 16] = 1.0
    times = [0.0, 10.0, 100.0]
    bdf = osys.propagate(rho0, tens, spec, times).rho[-1]
    from scipy.linalg import expm
    exact = (expm(tens.liouvillian() * 100.0) @ rho0.ravel()).reshape(17, 17)
    assert np.abs(bdf - exact).max() < 1e-7


def test_fit_synthetic_exponential():
    t = np.linspace(0, 60e3, 300)
    fit = osys.fit_exponential(t, 0.2 + 0.7 * np.exp(-t / 10e3))
    assert fit.tau_us == pytest.approx(10.0, rel=1e-3)
    assert not fit.multi_exponential


def test_fit_flags_multi_exponential():
    t = np.linspace(0, 60e3, 300)
    fit = osys.fit_exponential(t, 0.5 * np.exp(-t / 1e3) + 0.5 * np.exp(-t / 20e3))
    assert fit.multi_exponential


def test_fit_no_decay():
    with pytest.raises(osys.NoFitError):
        osys.fit_exponential(np.linspace(0, 1, 10), np.ones(10))


def test_arrhenius_synthetic():
    T = np.linspace(3, 11, 9)
    u = 34.5 * CM_TO_GHZ
    fit = osys.arrhenius_fit(T, 1e-6 * np.exp(u / (K_B * T)))
    assert fit.u_eff_cm == pytest.approx(34.5, rel=5e-3)
    assert fit.r_squared > 0.9999 and fit.monotonic


def test_arrhenius_two_points_exact():
    fit = osys.arrhenius_fit([3.0, 5.0], [10.0, 1.0])
    assert fit.residual < 1e-12


@pytest.mark.parametrize("T,t1", [([3.0], [1.0]), ([3.0, 3.0], [1.0, 2.0]), ([3.0, 4.0], [1.0, -1.0])])
def test_arrhenius_rejects(T, t1):
    with pytest.raises(osys.ArrheniusError):
        osys.arrhenius_fit(T, t1)


def test_coupling_operators(params):
    for name in ("tunnel_x", "tunnel_y", "jz", "hyperfine"):
        op = osys.coupling_operator(params, name)
        assert op.shape == (16, 16)
        assert np.abs(op - op.conj().T).max() == 0.0
    with pytest.raises(ValueError):
        osys.coupling_operator(params, "cf:2,0")
    with pytest.raises(ValueError):
        osys.coupling_operator(params, "bogus")


def test_how10_ct_point(params):
    pt = osys.relaxation_point(params, 24.0, 5.0, osys.default_relaxation_config())
    assert not pt.flags
    assert pt.t1_us == pytest.approx(4.0, rel=1e-3)
    assert pt.t2_us == pytest.approx(8.0, rel=1e-3)


def test_sweep_zero_coupling(params):
    cfg = osys.default_relaxation_config()
    cfg.couplings = {"tunnel_x": 0.0}
    pts = osys.relaxation_sweep(params, [24.0], [3.0, 5.0], cfg)
    assert all(p.flags == ["no-fit:zero-coupling"] and math.isnan(p.t1_us) for p in pts)


def test_sweep_threads_match_serial(params):
    serial = osys.relaxation_sweep(params, [20.0, 24.0], [5.0, 7.0])
    threaded = osys.relaxation_sweep(params, [20.0, 24.0], [5.0, 7.0], threads=2)
    assert [(p.b_mt, p.temperature, p.t1_us) for p in serial] == [(p.b_mt, p.temperature, p.t1_us) for p in threaded]
