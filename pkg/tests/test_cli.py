import json
from pathlib import Path

import numpy as np
import pytest

from ctqubits import cli
from ctqubits.config import ConfigError, config_hash, load_sequence, parse_grid, parse_sequence, sequence_to_dict
from ctqubits.output import write_csv

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(tmp_path, *args):
    return cli.main([*args, "--out", str(tmp_path)])


def read_rows(path):
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    return lines[0].split(","), [l.split(",") for l in lines[1:]]


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_parse_grid_forms():
    np.testing.assert_allclose(parse_grid({"start": 0, "stop": 1, "n": 3}, "g"), [0, 0.5, 1])
    np.testing.assert_allclose(parse_grid([1, 2], "g"), [1, 2])
    np.testing.assert_allclose(parse_grid(5, "g"), [5])
    for bad in ([], {"start": 0, "stop": 1, "n": 0}, {"start": 0}, "x", [float("nan")]):
        with pytest.raises(ConfigError):
            parse_grid(bad, "g")


def test_config_hash_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_sequence_roundtrip():
    seq = load_sequence(CONFIGS / "bell_sequence.yaml")
    assert [s.kind for s in seq.segments] == ["microwave", "efield", "efield", "microwave"]
    again = parse_sequence(sequence_to_dict(seq))
    assert again.segments == seq.segments


@pytest.mark.parametrize("body,needle", [
    ("segments:\n  - {kind: free}\n", "line 2, segment 0: missing field 'duration_ns'"),
    ("segments:\n  - {kind: free, duration_ns: 1}\n  - {kind: zap, duration_ns: 1}\n", "line 3, segment 1: field 'kind'"),
    ("segments:\n  - {kind: efield, duration_ns: x, voltage_V: 1}\n", "field 'duration_ns' must be a number"),
    ("segments:\n  - {kind: free, duration_ns: 1, colour: red}\n", "unknown field(s) ['colour']"),
    ("segments:\n  - {kind: microwave, duration_ns: 5, omega_MHz: 1, target: [\"00\"]}\n", "field 'target'"),
    ("segments: []\n", "non-empty"),
    ("segments:\n  - [oops\n", "YAML parse error"),
])
def test_malformed_sequence_messages(tmp_path, body, needle):
    with pytest.raises(ConfigError, match=None) as info:
        load_sequence(write(tmp_path, "s.yaml", body))
    assert needle in str(info.value)


def test_csv_header(tmp_path):
    p = write_csv(tmp_path / "x.csv", "demo", "abc", ["a", "b"], [[1.0, "s"]], {"k": 2.5}, ["note"])
    lines = p.read_text().splitlines()
    assert lines[:3] == ["# schema: ctqubits/demo/1", "# config_sha256: abc", "# k: 2.5"]
    assert lines[3:] == ["a,b", "1.0,s", "# note"]


def test_spectrum_command(tmp_path):
    assert run(tmp_path, "spectrum", "--json") == 0
    cols, rows = read_rows(tmp_path / "spectrum.csv")
    assert cols[0] == "B_mT" and len(cols) == 17 and len(rows) == 101
    doc = json.loads((tmp_path / "spectrum.json").read_text())
    assert doc["schema"] == "ctqubits/spectrum/1" and len(doc["rows"]) == 101


def test_spectrum_empty_grid_exit_2(tmp_path):
    cfg = write(tmp_path, "c.yaml", "spectrum:\n  b_grid_mT: []\n")
    assert run(tmp_path, "spectrum", "--config", cfg) == 2


def test_usage_errors(tmp_path, capsys):
    assert cli.main(["nonsense"]) == 2
    assert run(tmp_path, "spectrum", "--config", str(tmp_path / "missing.yaml")) == 2
    assert run(tmp_path, "spectrum", "--config", write(tmp_path, "c.yaml", "- 1\n")) == 2
    assert run(tmp_path, "spectrum", "--config", write(tmp_path, "p.yaml", "preset: nope\n")) == 2


def test_ct_find_command(tmp_path):
    assert run(tmp_path, "ct-find", "--preset", "calculated_11GHz") == 0
    _, rows = read_rows(tmp_path / "ct_find.csv")
    assert float(rows[0][0]) == pytest.approx(24.0, abs=0.2)
    assert float(rows[0][1]) == pytest.approx(11.0, rel=1e-4)


def test_calibrate_command(tmp_path):
    assert run(tmp_path, "calibrate") == 0
    _, rows = read_rows(tmp_path / "calibrate.csv")
    vals = dict((r[0], float(r[1])) for r in rows)
    assert vals["gap"] == pytest.approx(9.1, rel=1e-6)


def test_calibrate_infeasible_exit_1(tmp_path):
    cfg = write(tmp_path, "c.yaml", "calibrate:\n  targets: {b_min_mt: 24.0, f_ct: 0.0}\n  tol: 1.0e-12\n")
    assert run(tmp_path, "calibrate", "--config", cfg) == 1


def test_relax_command(tmp_path):
    cfg = write(tmp_path, "c.yaml", "relax:\n  b_grid_mT: [24.0]\n  t_grid_K: [3.0, 5.0, 7.0, 9.0, 11.0]\n")
    assert run(tmp_path, "relax", "--config", cfg, "--threads", "2") == 0
    text = (tmp_path / "relax.csv").read_text()
    _, rows = read_rows(tmp_path / "relax.csv")
    t1 = [float(r[2]) for r in rows]
    assert all(b < a for a, b in zip(t1, t1[1:]))
    assert "U_eff_cm=" in text and "U_eff_reference_cm=34.5" in text and "half_lowest_mode_cm=34.2" in text


def test_relax_zero_coupling(tmp_path, caplog):
    assert run(tmp_path, "relax", "--config", str(CONFIGS / "zero_coupling.yaml")) == 0
    _, rows = read_rows(tmp_path / "relax.csv")
    assert rows and all(r[-1] == "no-fit:zero-coupling" for r in rows)
    assert "no point produced" in caplog.text


def test_relax_unknown_coupling_exit_2(tmp_path):
    cfg = write(tmp_path, "c.yaml", "relax:\n  couplings: {wobble: 1.0}\n")
    assert run(tmp_path, "relax", "--config", cfg) == 2


def test_dimer_command(tmp_path):
    cfg = write(tmp_path, "c.yaml", "dimer:\n  b_grid_mT: [12.0, 24.0]\n")
    assert run(tmp_path, "dimer", "--config", cfg) == 0
    cols, rows = read_rows(tmp_path / "dimer.csv")
    assert cols == ["B_mT", "V", "E00", "E01", "E10", "E11", "deltaf_MHz", "regime"]
    cols, rows = read_rows(tmp_path / "dimer_deltaf.csv")
    assert cols == ["B_mT", "deltaf_on_MHz", "deltaf_off_MHz", "deltaf_sec_MHz"]
    assert float(rows[0][2]) == pytest.approx(0.1, rel=0.2)
    for name in ("dimer_exchange.csv", "dimer_composition.csv"):
        assert (tmp_path / name).is_file()


def test_pulse_command_shipped_sequence(tmp_path):
    assert run(tmp_path, "pulse", "--config", str(CONFIGS / "default.yaml")) == 0
    rep = json.loads((tmp_path / "pulse_report.json").read_text())
    assert rep["fidelity"] > 0.99 and rep["concurrence"] > 0.98
    assert len(rep["segments"]) == 4
    _, rows = read_rows(tmp_path / "pulse_log.csv")
    assert len(rows) == 4


def test_pulse_command_builtin_psi(tmp_path):
    cfg = write(tmp_path, "c.yaml", "pulse:\n  variant: psi\n  damping: {t1_us: 4.0, t2_us: 8.0}\n")
    assert run(tmp_path, "pulse", "--config", cfg) == 0
    rep = json.loads((tmp_path / "pulse_report.json").read_text())
    assert 0.0 < rep["bell_fidelity"]["psi"] < 0.99


def test_pulse_malformed_sequence_exit_2(tmp_path, capsys):
    write(tmp_path, "bad.yaml", "segments:\n  - {kind: microwave, duration_ns: 800.0, target: [\"00\", \"10\"]}\n")
    cfg = write(tmp_path, "c.yaml", "pulse:\n  sequence: bad.yaml\n")
    assert run(tmp_path, "pulse", "--config", cfg) == 2
    assert "line 2, segment 0: missing field 'omega_MHz'" in capsys.readouterr().err


def test_check_command(tmp_path, capsys):
    assert run(tmp_path, "check") == 0
    assert "FAIL" not in capsys.readouterr().out


def test_outputs_carry_hash(tmp_path):
    run(tmp_path, "spectrum", "--json")
    digest = (tmp_path / "spectrum.csv").read_text().splitlines()[1]
    assert digest.startswith("# config_sha256: ") and len(digest.split()[-1]) == 64
