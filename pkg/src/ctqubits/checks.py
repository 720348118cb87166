"""Numerical self-checks run by ``ctqubits check``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import clock, dimer as dm, open_system as osys, pulses
from .spin_core import FIRST_CT_FIELD_MT, AngularMomentumSpec, SpinSystemParams, angular_momentum_ops, build_hamiltonian, diagonalize, stevens_operator


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tol)


def _herm(m) -> float:
    return float(np.abs(m - m.conj().T).max())


def run_checks(params: SpinSystemParams) -> list[CheckResult]:
    out = []
    spec = AngularMomentumSpec(8)
    ops = angular_momentum_ops(spec)
    comm = ops["Jx"] @ ops["Jy"] - ops["Jy"] @ ops["Jx"] - 1j * ops["Jz"]
    out.append(CheckResult("angular_momentum_commutator", float(np.abs(comm).max()), 1e-10))
    out.append(CheckResult("stevens_hermitian", max(_herm(stevens_operator(k, q, spec))
                                                    for k in (2, 4, 6) for q in range(-k, k + 1)), 1e-8))

    h = build_hamiltonian(params, 0.024).matrix
    out.append(CheckResult("hamiltonian_hermitian", _herm(h), 1e-12))
    sp = diagonalize(build_hamiltonian(params, 0.024))
    recon = sp.states @ np.diag(sp.energies) @ sp.states.conj().T
    out.append(CheckResult("eigendecomposition_residual", float(np.abs(recon - h).max()), 1e-10))

    ct = clock.first_ct(params)
    out.append(CheckResult("ct_first_derivative_GHz_per_mT", abs(ct.df_db) if ct else float("nan"), 1e-6))

    cfg = osys.default_relaxation_config()
    model = osys.RedfieldModel(sp, cfg.operators(params), cfg.sd, 5.0)
    L = osys.build_redfield(model).liouvillian()
    d = sp.dim
    trace_row = np.eye(d).ravel()
    out.append(CheckResult("redfield_trace_preservation", float(np.abs(trace_row @ L).max() / np.abs(L).max()), 1e-12))
    rho_eq = osys.gibbs_state(sp.energies, 5.0).astype(complex).ravel()
    out.append(CheckResult("redfield_gibbs_stationary", float(np.abs(L @ rho_eq).max() / np.abs(L).max()), 1e-10))

    dim = dm.DimerSystem(params.replace(e_response=dm.EFieldResponse()), params)
    H = dm.compose(dim, dm.OPERATING_FIELD_MT, dm.OPERATING_VOLTAGE).matrix
    out.append(CheckResult("dimer_hamiltonian_hermitian", _herm(H), 1e-12))
    df0 = dm.delta_f(dim, FIRST_CT_FIELD_MT, 0.0).value_mhz
    out.append(CheckResult("dimer_exchange_at_ct_MHz", abs(df0), 1e-6))

    system = pulses.block_system(dim)
    res = pulses.propagate_sequence(pulses.PulseSequence([pulses.pi_pulse(("00", "10"))], "00", dm.OPERATING_VOLTAGE),
                                    system)
    u = res.unitary
    out.append(CheckResult("pulse_unitarity", float(np.abs(u @ u.conj().T - np.eye(u.shape[0])).max()), 1e-10))
    out.append(CheckResult("pi_pulse_infidelity", 1.0 - res.populations["10"], 1e-3))
    return out
