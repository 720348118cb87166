"""Command-line front end: ``ctqubits <command> [--config PATH] [--preset NAME] [--out DIR]``.

Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import clock, dimer as dm, open_system as osys, pulses
from .config import ConfigError, config_hash, load_sequence, load_yaml, parse_grid, parse_sequence, section
from .constants import CM_TO_GHZ, T2_SPIN_BATH_US, US
from .output import table_json, write_csv, write_json
from .spin_core import FIRST_CT_FIELD_MT, PRESET_GAPS, EFieldResponse, SpinModelError, preset

log = logging.getLogger("ctqubits")

COMMANDS = ("spectrum", "ct-find", "calibrate", "relax", "dimer", "pulse", "check")
REFERENCE_U_EFF_CM = 34.5
EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class Run:
    """Resolved command context: config, preset, output directory and hash."""

    def __init__(self, args):
        self.command = args.command
        self.config_path = Path(args.config) if args.config else None
        self.cfg = load_yaml(self.config_path) if self.config_path else {}
        if not isinstance(self.cfg, dict):
            raise ConfigError("top level of the config must be a mapping")
        name = args.preset or self.cfg.get("preset", "experimental_9p1GHz")
        if name not in PRESET_GAPS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESET_GAPS)}")
        self.preset = name
        self.params = preset(name)
        self.out = Path(args.out)
        self.json = args.json
        self.threads = max(1, int(args.threads))
        self.extra_hash: dict = {}

    def section(self, name: str) -> dict:
        return section(self.cfg, name)

    def resolve_path(self, p: str) -> Path:
        base = self.config_path.parent if self.config_path else Path.cwd()
        q = Path(p)
        return q if q.is_absolute() else base / q

    @property
    def digest(self) -> str:
        return config_hash({"command": self.command, "preset": self.preset, "config": self.cfg, **self.extra_hash})

    def emit(self, name: str, columns, rows, meta=None, footer=(), extra_json=None):
        rows = [list(r) for r in rows]
        meta = {"preset": self.preset, **(meta or {})}
        write_csv(self.out / f"{name}.csv", self.command, self.digest, columns, rows, meta, footer)
        if self.json:
            write_json(self.out / f"{name}.json", self.command, self.digest,
                       table_json(columns, rows, meta=meta, notes=list(footer), **(extra_json or {})))


def _f(sec: dict, key: str, default):
    val = sec.get(key, default)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"field {key!r} must be a number")
    return float(val)


# --------------------------------------------------------------------------
# Commands


def cmd_spectrum(run: Run) -> int:
    sec = run.section("spectrum")
    grid = parse_grid(sec.get("b_grid_mT", {"start": 0.0, "stop": 50.0, "n": 101}), "spectrum.b_grid_mT")
    v = _f(sec, "voltage_V", 0.0)
    diag = clock.level_diagram(run.params, grid, v)
    cols = ["B_mT"] + [f"E{i}_GHz" for i in range(diag.energies.shape[1])]
    run.emit("spectrum", cols, ([b, *e] for b, e in zip(grid, diag.energies)),
             meta={"voltage_V": v, "min_tracking_overlap": diag.min_overlap})
    return EXIT_OK


def cmd_ct_find(run: Run) -> int:
    sec = run.section("ct_find")
    rng = sec.get("b_range_mT", [0.0, 300.0])
    if not (isinstance(rng, list) and len(rng) == 2):
        raise ConfigError("ct_find.b_range_mT must be [low, high]")
    step = _f(sec, "step_mT", clock.PRESCAN_STEP_MT)
    pts = clock.find_anticrossings(run.params, b_range=(float(rng[0]), float(rng[1])), step=step)
    pts = [p for p in pts if p.f_ct > clock.MIN_CT_GAP]
    rows = [[p.b_min_mt, p.f_ct, p.level_pair[0], p.level_pair[1], p.df_db, p.d2f_db2] for p in pts]
    first = min(pts, key=lambda p: abs(p.b_min_mt)) if pts else None
    meta = {"first_ct_B_mT": first.b_min_mt if first else float("nan"), "first_ct_GHz": first.f_ct if first else float("nan")}
    run.emit("ct_find", ["B_min_mT", "f_ct_GHz", "level_lo", "level_hi", "df_dB_GHz_per_mT", "d2f_dB2_GHz_per_mT2"],
             rows, meta=meta)
    if not pts:
        log.warning("no clock transition in %s mT", rng)
    return EXIT_OK


def cmd_calibrate(run: Run) -> int:
    sec = run.section("calibrate")
    tg = sec.get("targets", {"b_min_mt": FIRST_CT_FIELD_MT, "f_ct": PRESET_GAPS[run.preset]})
    if not isinstance(tg, dict):
        raise ConfigError("calibrate.targets must be a mapping")
    try:
        targets = clock.CalibrationTarget({k: (float(v), 1.0) for k, v in tg.items()})
    except ValueError as exc:
        raise ConfigError(f"calibrate.targets: {exc}") from exc
    free = sec.get("free", ["a_z", "gap"])
    start = sec.get("start", {"a_z": 0.7, "gap": 8.0})
    p = run.params
    for name, val in start.items():
        p = clock.set_param(p, name, float(val))
    try:
        res = clock.calibrate(p, targets, free, tol=_f(sec, "tol", 1e-9))
    except ValueError as exc:
        raise ConfigError(f"calibrate: {exc}") from exc
    rows = [[name, clock.get_param(res.params, name)] for name in free]
    rows += [[f"observable:{k}", v] for k, v in res.observables.items()]
    run.emit("calibrate", ["name", "value"], rows, meta={"residual": res.residual, "iterations": res.iterations})
    return EXIT_OK


def _spectral_density(spec: dict):
    kind = spec.get("kind", "lorentzian_peaks")
    if kind == "ohmic_cutoff":
        return osys.OhmicCutoff(_f(spec, "eta", 1.0), _f(spec, "cutoff_GHz", 1e3), _f(spec, "exponent", 1.0))
    if kind == "lorentzian_peaks":
        peaks = []
        for pk in spec.get("peaks", []):
            peaks.append(osys.LorentzianPeak(
                _f(pk, "omega0_cm", 68.4) * CM_TO_GHZ, _f(pk, "width_cm", 0.0) * CM_TO_GHZ,
                _f(pk, "strength", osys.HOW10_STRENGTH), _f(pk, "anharmonic_cm", 1.0) * CM_TO_GHZ))
        if not peaks:
            raise ConfigError("relax.spectral_density.peaks must not be empty")
        return osys.LorentzianPeaks(tuple(peaks), _f(spec, "tail_exponent", 3.0))
    raise ConfigError(f"unknown spectral density kind {kind!r}")


def relax_config(sec: dict) -> osys.RelaxationConfig:
    cfg = osys.default_relaxation_config()
    if "couplings" in sec:
        c = sec["couplings"] or {}
        if not isinstance(c, dict):
            raise ConfigError("relax.couplings must be a mapping name -> strength (GHz)")
        cfg.couplings = {str(k): _f(c, k, 0.0) for k in c}
    if "spectral_density" in sec:
        cfg.sd = _spectral_density(sec["spectral_density"])
    cfg.secular = bool(sec.get("secular", True))
    return cfg


def cmd_relax(run: Run) -> int:
    sec = run.section("relax")
    bgrid = parse_grid(sec.get("b_grid_mT", [24.0]), "relax.b_grid_mT")
    tgrid = parse_grid(sec.get("t_grid_K", {"start": 3.0, "stop": 11.0, "n": 9}), "relax.t_grid_K")
    if np.any(tgrid <= 0):
        raise ConfigError("relax.t_grid_K must be positive")
    cfg = relax_config(sec)
    for name in cfg.couplings:
        try:
            osys.coupling_operator(run.params, name)
        except ValueError as exc:
            raise ConfigError(f"relax.couplings: {exc}") from exc
    pts = osys.relaxation_sweep(run.params, bgrid, tgrid, cfg, threads=run.threads)
    rows = [[p.b_mt, p.temperature, p.t1_us, p.t2_us, ";".join(f.replace(",", ";") for f in p.flags)] for p in pts]
    footer = []
    if all(p.flags and all(f.startswith("no-fit") for f in p.flags) for p in pts):
        log.warning("no point produced a relaxation time (all entries flagged)")
    b_ct = float(min(bgrid, key=lambda b: abs(b - FIRST_CT_FIELD_MT)))
    sel = [p for p in pts if p.b_mt == b_ct and np.isfinite(p.t1_us)]
    if len(sel) >= 2:
        try:
            fit = osys.arrhenius_fit([p.temperature for p in sel], [p.t1_us for p in sel])
            footer += [
                f"arrhenius B_mT={b_ct!r} U_eff_cm={fit.u_eff_cm!r} tau0_us={fit.tau0!r} r_squared={fit.r_squared!r} "
                f"T_range_K={fit.t_range[0]!r}-{fit.t_range[1]!r} monotonic={fit.monotonic}",
                f"reference U_eff_reference_cm={REFERENCE_U_EFF_CM!r} half_lowest_mode_cm={osys.LOWEST_MODE_GHZ / CM_TO_GHZ / 2!r}",
            ]
        except osys.ArrheniusError as exc:
            footer.append(f"arrhenius unavailable: {exc}")
    footer.append(f"overlay T2_spin_bath_us={T2_SPIN_BATH_US!r} (reference only)")
    run.emit("relax", ["B_mT", "T_K", "T1_us", "T2_us", "flags"], rows, footer=footer)
    return EXIT_OK


def build_dimer(run: Run) -> dm.DimerSystem:
    sec = run.section("dimer")
    d = dm.DimerSystem(run.params.replace(e_response=EFieldResponse()), run.params,
                       coupling_mode=sec.get("coupling_mode", dm.EFFECTIVE_SCALAR))
    if "separation_A" in sec:
        d = d.with_distance(_f(sec, "separation_A", dm.DEFAULT_SEPARATION_A))
    if "sec_GHz_per_V_per_m" in sec:
        d = d.with_sec(_f(sec, "sec_GHz_per_V_per_m", 0.0))
    return d


def cmd_dimer(run: Run) -> int:
    sec = run.section("dimer")
    try:
        d = build_dimer(run)
    except dm.DimerError as exc:
        raise ConfigError(f"dimer: {exc}") from exc
    grid = parse_grid(sec.get("b_grid_mT", {"start": 0.0, "stop": 30.0, "n": 31}), "dimer.b_grid_mT")
    v_on = _f(sec, "voltage_V", dm.OPERATING_VOLTAGE)
    rows = []
    for b in grid:
        for v in (v_on, 0.0):
            df = dm.delta_f(d, b, v)
            e = df.energies
            rows.append([b, v, e["00"], e["01"], e["10"], e["11"], df.value_mhz, df.regime])
    run.emit("dimer", ["B_mT", "V", "E00", "E01", "E10", "E11", "deltaf_MHz", "regime"], rows,
             meta={"separation_A": d.geometry.distance, "coupling_mode": d.coupling_mode})
    prof = dm.exchange_profile(d, grid, v_on)
    run.emit("dimer_deltaf", ["B_mT", "deltaf_on_MHz", "deltaf_off_MHz", "deltaf_sec_MHz"],
             zip(grid, prof.delta_f_on, prof.delta_f_off, prof.delta_f_sec), meta={"voltage_V": v_on})
    run.emit("dimer_exchange", ["B_mT"] + [f"j{i}_MHz" for i in range(prof.j_mhz.shape[1])],
             ([b, *j] for b, j in zip(grid, prof.j_mhz)))
    bc = _f(sec, "composition_field_mT", dm.OPERATING_FIELD_MT)
    comp_rows = []
    for v in (v_on, 0.0):
        space = dm.operating_space(d, bc, v)
        for lab in dm.LABELS:
            table = dm.composition_table(d, space.vector(lab), bc, v)
            for key, w in table.items():
                comp_rows.append([v, lab, key[0], key[1], w])
    run.emit("dimer_composition", ["V", "state", "level_a", "level_b", "weight"], comp_rows, meta={"B_mT": bc})
    return EXIT_OK


def cmd_pulse(run: Run) -> int:
    sec = run.section("pulse")
    try:
        d = build_dimer(run)
    except dm.DimerError as exc:
        raise ConfigError(f"pulse: {exc}") from exc
    b = _f(sec, "b_mT", dm.OPERATING_FIELD_MT)
    system = pulses.block_system(d, b)
    variant = sec.get("variant", "phi")
    if variant not in pulses.BELL_PAIRS:
        raise ConfigError(f"pulse.variant must be one of {sorted(pulses.BELL_PAIRS)}")
    if "sequence" in sec:
        src = sec["sequence"]
        if isinstance(src, str):
            path = run.resolve_path(src)
            seq = load_sequence(path)
            run.extra_hash["sequence"] = path.read_text()
        else:
            seq = parse_sequence(src, "pulse.sequence")
    else:
        seq = pulses.bell_sequence(system, variant)
    damp = None
    if "damping" in sec:
        dsec = sec["damping"] or {}
        damp = pulses.Damping(_f(dsec, "t1_us", 4.0) * US, _f(dsec, "t2_us", 8.0) * US)
    res = pulses.propagate_sequence(seq, system, damp)
    fid = {v: pulses.bell_fidelity(res.rho, v) for v in pulses.BELL_PAIRS}
    mono = pulses.monomer_cancellation_check(pulses.resolve_sequence(system, seq), pulses.block_system(d.uncoupled(), b))
    cols = ["index", "kind", "t_start_ns", "duration_ns", "voltage", "carrier_ghz", "detuning_mhz", "omega_mhz", "angle_rad"]
    run.emit("pulse_log", cols, ([r.get(c, "") for c in cols] for r in res.log))
    report = {
        "preset": run.preset,
        "B_mT": b,
        "variant": variant,
        "populations": res.populations,
        "bell_fidelity": fid,
        "fidelity": fid[variant],
        "concurrence": res.concurrence,
        "leakage": res.leakage,
        "monomer_ground_fidelity": mono.ground_fidelity,
        "monomer_compliant": mono.compliant,
        "segments": res.log,
    }
    write_json(run.out / "pulse_report.json", run.command, run.digest, report)
    return EXIT_OK


def cmd_check(run: Run) -> int:
    from .checks import run_checks

    results = run_checks(run.params)
    run.emit("check", ["name", "passed", "value", "tolerance"], ([r.name, r.passed, r.value, r.tol] for r in results))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.value:.3e} (tol {r.tol:.1e})")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


HANDLERS = {
    "spectrum": cmd_spectrum, "ct-find": cmd_ct_find, "calibrate": cmd_calibrate, "relax": cmd_relax,
    "dimer": cmd_dimer, "pulse": cmd_pulse, "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctqubits", description="Clock-transition spin qubit simulations.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="YAML run configuration")
    ap.add_argument("--preset", choices=sorted(PRESET_GAPS), help="overrides the preset named in the config")
    ap.add_argument("--out", default="out", help="output directory (default: ./out)")
    ap.add_argument("--json", action="store_true", help="write JSON mirrors of every table")
    ap.add_argument("--threads", type=int, default=1, help="parallel work units for sweeps")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run = Run(args)
        return HANDLERS[args.command](run)
    except (ConfigError, SpinModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # numerical failures of any module
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
