"""YAML run configuration and pulse-sequence files."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .pulses import EFIELD, MICROWAVE, SEGMENT_KINDS, PulseError, PulseSequence, Segment

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 2."""


class _LineLoader(yaml.SafeLoader):
    """Safe loader that records the source line of every mapping as ``__line__``."""


def _construct_mapping(loader, node, deep=False):
    mapping = yaml.SafeLoader.construct_mapping(loader, node, deep=True)
    mapping["__line__"] = node.start_mark.line + 1
    return mapping


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def strip_lines(obj):
    if isinstance(obj, dict):
        return {k: strip_lines(v) for k, v in obj.items() if k != "__line__"}
    if isinstance(obj, list):
        return [strip_lines(v) for v in obj]
    return obj


def load_yaml(path: str | Path, keep_lines: bool = False) -> Any:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{p}: file not found")
    try:
        data = yaml.load(p.read_text(), Loader=_LineLoader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: YAML parse error: {exc}") from exc
    if data is None:
        data = {}
    return data if keep_lines else strip_lines(data)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def parse_grid(spec, name: str) -> np.ndarray:
    """A grid is a list of numbers or ``{start, stop, n}`` (inclusive linspace)."""
    if isinstance(spec, dict):
        try:
            start, stop, n = float(spec["start"]), float(spec["stop"]), int(spec["n"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: grid mapping needs numeric start, stop, n") from exc
        grid = np.linspace(start, stop, n) if n > 0 else np.array([])
    elif isinstance(spec, (list, tuple)):
        try:
            grid = np.array([float(x) for x in spec])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: grid entries must be numbers") from exc
    elif isinstance(spec, (int, float)):
        grid = np.array([float(spec)])
    else:
        raise ConfigError(f"{name}: expected a list or start/stop/n mapping")
    if grid.size == 0:
        raise ConfigError(f"{name}: grid is empty")
    if not np.all(np.isfinite(grid)):
        raise ConfigError(f"{name}: grid contains non-finite values")
    return grid


def section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {}) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return sec


# --------------------------------------------------------------------------
# Sequence files

_SEGMENT_FIELDS = {
    "kind", "duration_ns", "omega_MHz", "carrier_GHz", "phase_rad", "voltage_V", "target", "ramp_ns", "__line__",
}


def _num(entry: dict, key: str, where: str, default=None, required=False):
    if key not in entry:
        if required:
            raise ConfigError(f"{where}: missing field {key!r}")
        return default
    val = entry[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{where}: field {key!r} must be a number, got {val!r}")
    return float(val)


def parse_segment(entry, where: str) -> Segment:
    if not isinstance(entry, dict):
        raise ConfigError(f"{where}: segment must be a mapping")
    unknown = set(entry) - _SEGMENT_FIELDS
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    kind = entry.get("kind")
    if kind not in SEGMENT_KINDS:
        raise ConfigError(f"{where}: field 'kind' must be one of {list(SEGMENT_KINDS)}, got {kind!r}")
    kw: dict[str, Any] = {"duration_ns": _num(entry, "duration_ns", where, required=True)}
    if kind == MICROWAVE:
        kw["omega_mhz"] = _num(entry, "omega_MHz", where, required=True)
        kw["carrier_ghz"] = _num(entry, "carrier_GHz", where)
        kw["phase_rad"] = _num(entry, "phase_rad", where, 0.0)
        tgt = entry.get("target")
        if not isinstance(tgt, list) or len(tgt) != 2:
            raise ConfigError(f"{where}: field 'target' must be a two-element list")
        kw["target"] = tuple(str(x) if isinstance(x, str) else int(x) for x in tgt)
    elif kind == EFIELD:
        kw["voltage"] = _num(entry, "voltage_V", where, required=True)
        kw["ramp_ns"] = _num(entry, "ramp_ns", where, 0.0)
    try:
        return Segment(kind, **kw)
    except PulseError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_sequence(data: dict, source: str = "<sequence>") -> PulseSequence:
    if not isinstance(data, dict) or "segments" not in data:
        raise ConfigError(f"{source}: sequence needs a 'segments' list")
    segs_raw = data["segments"]
    if not isinstance(segs_raw, list) or not segs_raw:
        raise ConfigError(f"{source}: 'segments' must be a non-empty list")
    segs = []
    for i, entry in enumerate(segs_raw):
        line = entry.get("__line__", "?") if isinstance(entry, dict) else "?"
        segs.append(parse_segment(entry, f"{source}: line {line}, segment {i}"))
    initial = data.get("initial", "00")
    v0 = _num(data, "initial_voltage_V", source, 0.0)
    frame = data.get("frame", "rwa")
    try:
        return PulseSequence(segs, initial, v0, frame)
    except PulseError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_sequence(path: str | Path) -> PulseSequence:
    return parse_sequence(load_yaml(path, keep_lines=True), str(path))


def sequence_to_dict(seq: PulseSequence) -> dict:
    rows = []
    for s in seq.segments:
        row: dict[str, Any] = {"kind": s.kind, "duration_ns": s.duration_ns}
        if s.kind == MICROWAVE:
            row.update(omega_MHz=s.omega_mhz, target=list(s.target), phase_rad=s.phase_rad)
            if s.carrier_ghz is not None:
                row["carrier_GHz"] = s.carrier_ghz
        elif s.kind == EFIELD:
            row.update(voltage_V=s.voltage, ramp_ns=s.ramp_ns)
        rows.append(row)
    return {"initial": seq.initial, "initial_voltage_V": seq.initial_voltage, "frame": seq.frame, "segments": rows}


