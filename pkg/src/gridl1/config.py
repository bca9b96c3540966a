"""TOML configuration: schema validation, loading, and emission.

A document describes the grid (load-connected lines or a bus network),
baseline synthesis weights, adaptive design constants, the scenario script,
and output options.  Unknown keys are rejected with their path so typos
cannot silently change an experiment.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from .certify import L1Design
from .network import (Branch, BusNetwork, BusNode, DguParams, LineParams,
                      MicrogridTopology, NetworkError)
from .sim import SimEvent


class ConfigError(ValueError):
    """Invalid configuration document; message carries the key path."""


_DGU_KEYS = {"id": str, "v_in": float, "r_t": float, "l_t": float, "c_t": float,
             "p_rated": float, "p_load": float, "v_ref": float}
_DGU_OPT = {"f_s": float, "shunt_g": float, "i_inject": float}
_LINE_KEYS = {"a": str, "b": str, "r": float}
_LINE_OPT = {"l": float}
_BUSNODE_KEYS = {"id": str}
_BUSNODE_OPT = {"load_g": float, "i_inject": float}
_BASELINE_OPT = {"method": str, "q": list, "r": float, "poles": list}
_L1_OPT = {"enabled": bool, "a_m_poles": list, "a_m_form": str, "gamma": float,
           "omega_c": float, "theta_box": list, "epsilon_coeff": float,
           "d_max": float, "warm_start": bool}
_SCENARIO_OPT = {"line_model": str, "t_end": float, "dt_plant": float,
                 "dt_ctrl": float, "plant": str, "start_inactive": list}
_EVENT_KEYS = {"t": float, "kind": str}
_EVENT_OPT = {"dgu": str, "line": list, "target": str, "power": float,
              "v_ref": float, "times": list, "currents": list}
_OUTPUT_OPT = {"dir": str, "stride": int}


def _need(table: dict, path: str, required: dict, optional: dict) -> dict:
    out = {}
    for key, val in table.items():
        if key in required:
            want = required[key]
        elif key in optional:
            want = optional[key]
        else:
            raise ConfigError(f"{path}.{key}: unknown key")
        if want is float and isinstance(val, (int, float)) and not isinstance(val, bool):
            out[key] = float(val)
        elif want is int and isinstance(val, int) and not isinstance(val, bool):
            out[key] = val
        elif want is not float and isinstance(val, want):
            out[key] = val
        else:
            raise ConfigError(f"{path}.{key}: expected {want.__name__}, "
                              f"got {type(val).__name__}")
    for key in required:
        if key not in out:
            raise ConfigError(f"{path}.{key}: missing required key")
    return out


@dataclass
class BaselineSettings:
    method: str = "lqi"
    q: tuple[float, float, float] = (1.0, 1.0, 1e8)
    r: float = 1e5
    poles: tuple | None = None


@dataclass
class ScenarioSettings:
    line_model: str = "dynamic"
    t_end: float = 0.0
    dt_plant: float = 1e-6
    dt_ctrl: float = 40e-6
    plant: str = "nonlinear"
    start_inactive: tuple[str, ...] = ()
    events: tuple[SimEvent, ...] = ()


@dataclass
class OutputSettings:
    dir: str = "out"
    stride: int = 1


@dataclass
class RunConfig:
    """Parsed and validated configuration document."""

    grid: MicrogridTopology | BusNetwork
    baseline: BaselineSettings
    l1: L1Design
    l1_enabled: bool
    warm_start: bool
    scenario: ScenarioSettings
    output: OutputSettings
    name: str = ""
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def is_bus(self) -> bool:
        return isinstance(self.grid, BusNetwork)


def _parse_grid(tbl: dict):
    known = {"name", "dgu", "line", "bus"}
    for key in tbl:
        if key not in known:
            raise ConfigError(f"grid.{key}: unknown key")
    dgus = []
    for k, row in enumerate(tbl.get("dgu", [])):
        vals = _need(row, f"grid.dgu[{k}]", _DGU_KEYS, _DGU_OPT)
        try:
            dgus.append(DguParams(**vals))
        except NetworkError as exc:
            raise ConfigError(f"grid.dgu[{k}]: {exc}") from exc
    if not dgus:
        raise ConfigError("grid: at least one [[grid.dgu]] required")

    lines = []
    for k, row in enumerate(tbl.get("line", [])):
        vals = _need(row, f"grid.line[{k}]", _LINE_KEYS, _LINE_OPT)
        try:
            lines.append(LineParams(endpoints=(vals["a"], vals["b"]),
                                    r=vals["r"], l=vals.get("l", 0.0)))
        except NetworkError as exc:
            raise ConfigError(f"grid.line[{k}]: {exc}") from exc

    if "bus" in tbl:
        if lines:
            raise ConfigError("grid: a bus network cannot also list [[grid.line]]")
        bt = tbl["bus"]
        for key in bt:
            if key not in {"node", "branch"}:
                raise ConfigError(f"grid.bus.{key}: unknown key")
        nodes = []
        for k, row in enumerate(bt.get("node", [])):
            vals = _need(row, f"grid.bus.node[{k}]", _BUSNODE_KEYS, _BUSNODE_OPT)
            nodes.append(BusNode(**vals))
        branches = []
        for k, row in enumerate(bt.get("branch", [])):
            vals = _need(row, f"grid.bus.branch[{k}]", _LINE_KEYS, _LINE_OPT)
            try:
                branches.append(Branch(endpoints=(vals["a"], vals["b"]),
                                       r=vals["r"], l=vals.get("l", 0.0)))
            except NetworkError as exc:
                raise ConfigError(f"grid.bus.branch[{k}]: {exc}") from exc
        try:
            return BusNetwork(dgus=tuple(dgus), bus_nodes=tuple(nodes),
                              branches=tuple(branches))
        except NetworkError as exc:
            raise ConfigError(f"grid.bus: {exc}") from exc
    try:
        return MicrogridTopology(dgus=tuple(dgus), lines=tuple(lines))
    except NetworkError as exc:
        raise ConfigError(f"grid: {exc}") from exc


def _parse_event(row: dict, path: str) -> SimEvent:
    vals = _need(row, path, _EVENT_KEYS, _EVENT_OPT)
    if "line" in vals:
        ln = vals["line"]
        if len(ln) != 2 or not all(isinstance(x, str) for x in ln):
            raise ConfigError(f"{path}.line: expected two node ids")
        vals["line"] = tuple(ln)
    for key in ("times", "currents"):
        if key in vals:
            vals[key] = tuple(float(x) for x in vals[key])
    try:
        return SimEvent(**vals)
    except Exception as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(doc: dict) -> RunConfig:
    known = {"grid", "baseline", "l1", "scenario", "output"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"{key}: unknown section")
    if "grid" not in doc:
        raise ConfigError("grid: missing section")
    grid = _parse_grid(doc["grid"])

    bl = BaselineSettings()
    if "baseline" in doc:
        vals = _need(doc["baseline"], "baseline", {}, _BASELINE_OPT)
        if "method" in vals and vals["method"] not in ("lqi", "pole"):
            raise ConfigError("baseline.method: must be 'lqi' or 'pole'")
        bl = BaselineSettings(
            method=vals.get("method", "lqi"),
            q=tuple(float(x) for x in vals.get("q", bl.q)),
            r=vals.get("r", bl.r),
            poles=tuple(float(x) for x in vals["poles"]) if "poles" in vals else None)
        if len(bl.q) != 3:
            raise ConfigError("baseline.q: expected three weights")
        if bl.method == "pole" and (bl.poles is None or len(bl.poles) != 3):
            raise ConfigError("baseline.poles: three poles required for pole placement")

    design = L1Design()
    l1_enabled = True
    warm_start = False
    if "l1" in doc:
        vals = _need(doc["l1"], "l1", {}, _L1_OPT)
        l1_enabled = vals.get("enabled", True)
        warm_start = vals.get("warm_start", False)
        box = vals.get("theta_box", design.theta_box)
        box = tuple(tuple(float(y) for y in x) if isinstance(x, (list, tuple))
                    else float(x) for x in box)
        design = L1Design(
            a_m_poles=tuple(float(x) for x in vals.get("a_m_poles", design.a_m_poles)),
            a_m_form=vals.get("a_m_form", design.a_m_form),
            gamma=vals.get("gamma", design.gamma),
            omega_c=vals.get("omega_c", design.omega_c),
            theta_box=box,
            epsilon_coeff=vals.get("epsilon_coeff", design.epsilon_coeff),
            d_max=vals.get("d_max", design.d_max))
        if len(design.a_m_poles) != 3:
            raise ConfigError("l1.a_m_poles: expected three poles")
        if design.a_m_form not in ("normal", "companion"):
            raise ConfigError("l1.a_m_form: must be 'normal' or 'companion'")

    sc = ScenarioSettings()
    if "scenario" in doc:
        tbl = dict(doc["scenario"])
        events_raw = tbl.pop("event", [])
        vals = _need(tbl, "scenario", {}, _SCENARIO_OPT)
        events = tuple(_parse_event(row, f"scenario.event[{k}]")
                       for k, row in enumerate(events_raw))
        sc = ScenarioSettings(
            line_model=vals.get("line_model", sc.line_model),
            t_end=vals.get("t_end", sc.t_end),
            dt_plant=vals.get("dt_plant", sc.dt_plant),
            dt_ctrl=vals.get("dt_ctrl", sc.dt_ctrl),
            plant=vals.get("plant", sc.plant),
            start_inactive=tuple(vals.get("start_inactive", ())),
            events=events)
        if sc.line_model not in ("dynamic", "qsl"):
            raise ConfigError("scenario.line_model: must be 'dynamic' or 'qsl'")

    out = OutputSettings()
    if "output" in doc:
        vals = _need(doc["output"], "output", {}, _OUTPUT_OPT)
        out = OutputSettings(dir=vals.get("dir", out.dir),
                             stride=vals.get("stride", out.stride))
        if out.stride < 1:
            raise ConfigError("output.stride: must be >= 1")

    name = doc["grid"].get("name", "")
    return RunConfig(grid=grid, baseline=bl, l1=design, l1_enabled=l1_enabled,
                     warm_start=warm_start, scenario=sc, output=out,
                     name=name, raw=doc)


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = _toml.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except _toml.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: TOML syntax error: {exc}") from exc
    return parse_config(doc)


# ---------------- TOML emission ----------------

def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        escaped = v.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialise value of type {type(v).__name__}")


def _emit_table(name: str, tbl: dict, out: list):
    scalars = {k: v for k, v in tbl.items()
               if not isinstance(v, dict) and not _is_table_array(v)}
    subtables = {k: v for k, v in tbl.items() if isinstance(v, dict)}
    arrays = {k: v for k, v in tbl.items() if _is_table_array(v)}
    if scalars or not (subtables or arrays):
        out.append(f"[{name}]" if name else "")
        for k, v in scalars.items():
            out.append(f"{k} = {_fmt_value(v)}")
        out.append("")
    for k, v in arrays.items():
        for row in v:
            out.append(f"[[{name}.{k}]]" if name else f"[[{k}]]")
            for kk, vv in row.items():
                out.append(f"{kk} = {_fmt_value(vv)}")
            out.append("")
    for k, v in subtables.items():
        _emit_table(f"{name}.{k}" if name else k, v, out)


def _is_table_array(v) -> bool:
    return isinstance(v, (list, tuple)) and len(v) > 0 and all(isinstance(x, dict) for x in v)


def emit_toml(doc: dict) -> str:
    """Serialise a nested dict document to TOML text (deterministic)."""
    out: list[str] = []
    top_scalars = {k: v for k, v in doc.items()
                   if not isinstance(v, dict) and not _is_table_array(v)}
    for k, v in top_scalars.items():
        out.append(f"{k} = {_fmt_value(v)}")
    if top_scalars:
        out.append("")
    for k, v in doc.items():
        if isinstance(v, dict):
            _emit_table(k, v, out)
        elif _is_table_array(v):
            for row in v:
                out.append(f"[[{k}]]")
                for kk, vv in row.items():
                    out.append(f"{kk} = {_fmt_value(vv)}")
                out.append("")
    return "\n".join(out).rstrip() + "\n"


def grid_to_doc(grid: MicrogridTopology) -> dict:
    """Grid section document for a load-connected topology."""
    dgus = []
    for d in grid.dgus:
        row = {"id": d.id, "v_in": d.v_in, "r_t": d.r_t, "l_t": d.l_t,
               "c_t": d.c_t, "p_rated": d.p_rated, "p_load": d.p_load,
               "v_ref": d.v_ref, "f_s": d.f_s}
        if d.shunt_g:
            row["shunt_g"] = d.shunt_g
        if d.i_inject:
            row["i_inject"] = d.i_inject
        dgus.append(row)
    lines = [{"a": ln.endpoints[0], "b": ln.endpoints[1], "r": ln.r, "l": ln.l}
             for ln in grid.lines]
    return {"dgu": dgus, "line": lines}
