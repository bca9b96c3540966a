"""Command-line entry point: certify, simulate, sweep, kron.

Exit codes: 0 ok, 1 config error, 2 certification failure, 3 numerical
divergence.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import baseline as bl
from .adaptive import L1Config
from .certify import CertReport, certify
from .config import ConfigError, RunConfig, emit_toml, grid_to_doc, load_config
from .network import (MicrogridTopology, NetworkError,
                      compute_operating_point, kron_reduce, linearize_all)
from .sim import (ControllerSetup, Scenario, SimDivergenceError,
                  run as run_sim)


def design_topology(cfg: RunConfig) -> MicrogridTopology:
    """Topology the controllers are designed on (Kron-reduced for bus grids)."""
    if cfg.is_bus:
        return kron_reduce(cfg.grid)
    return cfg.grid


def synthesize_baseline(cfg: RunConfig) -> dict:
    gains = {}
    for dgu in cfg.grid.dgus:
        model = bl.nominal_design_model(dgu)
        if cfg.baseline.method == "pole":
            gains[dgu.id] = bl.synth_pole_place(model, cfg.baseline.poles)
        else:
            gains[dgu.id] = bl.synth_lqi(model, np.diag(cfg.baseline.q), cfg.baseline.r)
    return gains


def certify_config(cfg: RunConfig):
    """Certification on the design topology; returns (report, topology, models)."""
    topo = design_topology(cfg)
    models = linearize_all(topo)
    report = certify(topo, models, cfg.l1)
    return report, topo, models


def build_scenario(cfg: RunConfig, report: CertReport | None,
                   line_model: str | None = None) -> Scenario:
    """Executable scenario: controllers synthesised, adaptive configs from the report."""
    gains = synthesize_baseline(cfg)
    design = cfg.l1
    # operating points (linearisation anchors) come from the design topology,
    # so bus-attributed loads shape the deviation coordinates
    design_dgus = design_topology(cfg).dgu_map
    controllers = {}
    for dgu in cfg.grid.dgus:
        l1cfg = None
        if cfg.l1_enabled and report is not None:
            rec = report.records.get(dgu.id)
            if rec is not None and rec.p is not None and rec.passed:
                l1cfg = L1Config(
                    a_m=design.a_m(), b=design.b(), gamma=design.gamma,
                    omega_c=design.omega_c, theta_max=design.theta_max(),
                    p=np.array(rec.p), epsilon=design.epsilon(rec.xi_sq),
                    xi_sq=rec.xi_sq, n_i=rec.n_i)
        controllers[dgu.id] = ControllerSetup(
            op=compute_operating_point(design_dgus[dgu.id]), gains=gains[dgu.id],
            l1=l1cfg, warm_start=cfg.warm_start)
    sc = cfg.scenario
    return Scenario(
        grid=cfg.grid, controllers=controllers, t_end=sc.t_end,
        line_model=line_model or sc.line_model, dt_plant=sc.dt_plant,
        dt_ctrl=sc.dt_ctrl, record_stride=cfg.output.stride,
        events=sc.events, start_inactive=sc.start_inactive,
        plant=sc.plant, d_max=design.d_max)


def _say(quiet: bool, msg: str):
    if not quiet:
        print(msg)


def cmd_certify(config_path, out_dir, quiet=False) -> int:
    try:
        cfg = load_config(config_path)
        report, _, _ = certify_config(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cert_report.json").write_text(report.to_json())
    _say(quiet, report.summary())
    _say(quiet, f"report written to {out / 'cert_report.json'}")
    return 0 if report.global_pass else 2


def cmd_simulate(config_path, out_dir, line_model=None, quiet=False) -> int:
    try:
        cfg = load_config(config_path)
        report = None
        if cfg.l1_enabled:
            report, _, _ = certify_config(cfg)
            if not report.global_pass:
                print("warning: certification failed; adaptive augmentation "
                      "disabled for uncertified DGUs", file=sys.stderr)
        else:
            print("warning: adaptive augmentation disabled; certification skipped",
                  file=sys.stderr)
        scenario = build_scenario(cfg, report, line_model)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (NetworkError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if report is not None:
        (out / "cert_report.json").write_text(report.to_json())
    try:
        result = run_sim(scenario)
    except SimDivergenceError as exc:
        print(f"simulation diverged: {exc}", file=sys.stderr)
        if exc.result is not None:
            exc.result.write_csv(out / "trace.csv")
            print(f"last-good trace written to {out / 'trace.csv'}", file=sys.stderr)
        return 3
    result.write_csv(out / "trace.csv")
    (out / "metrics.json").write_text(json.dumps(result.metrics, indent=2, sort_keys=True))
    _say(quiet, f"trace: {out / 'trace.csv'} ({len(result.times)} records)")
    _say(quiet, f"metrics: {out / 'metrics.json'}")
    return 0


def _resolve_key(doc: dict, dotted: str):
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"sweep key {dotted!r}: section {p!r} not found")
        node = node[p]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"sweep key {dotted!r}: not found")
    if isinstance(node[leaf], bool) or not isinstance(node[leaf], (int, float)):
        raise ConfigError(f"sweep key {dotted!r}: not a scalar numeric field")
    return node, leaf


def cmd_sweep(config_path, parameter, values, out_dir, quiet=False) -> int:
    try:
        cfg0 = load_config(config_path)
        _resolve_key(cfg0.raw, parameter)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    from .config import parse_config
    for val in values:
        doc = copy.deepcopy(cfg0.raw)
        node, leaf = _resolve_key(doc, parameter)
        node[leaf] = val
        try:
            cfg = parse_config(doc)
            report, _, _ = certify_config(cfg) if cfg.l1_enabled else (None,) * 3
            lam = max(r.lam for r in report.records.values()) if report else float("nan")
            cert_ok = report.global_pass if report else False
            scenario = build_scenario(cfg, report)
            result = run_sim(scenario)
            settle, over, peak = _aggregate_metrics(result.metrics)
            rows.append((val, lam, cert_ok, settle, over, peak))
        except SimDivergenceError:
            rows.append((val, float("nan"), False, float("inf"), float("inf"), float("inf")))
        except (ConfigError, NetworkError, ValueError) as exc:
            print(f"config error at {parameter}={val}: {exc}", file=sys.stderr)
            return 1
    def cell(x):
        if isinstance(x, bool):
            return "true" if x else "false"
        return format(float(x), ".8e")

    path = out / "sweep.csv"
    with open(path, "w") as fh:
        fh.write(f"{parameter},lambda,cert_pass,max_settling_time_s,"
                 "max_overshoot_pct_vref,max_peak_deviation_v\n")
        for row in rows:
            fh.write(",".join(cell(x) for x in row) + "\n")
    _say(quiet, f"sweep table: {path} ({len(rows)} rows)")
    return 0


def _aggregate_metrics(metrics: dict):
    settle = 0.0
    over = 0.0
    peak = 0.0
    for ev in metrics.get("events", []):
        for rec in ev.get("windows", {}).values():
            st = rec["settling_time_s"]
            settle = max(settle, st if np.isfinite(st) else float("inf"))
            over = max(over, rec["overshoot_pct_vref"])
            peak = max(peak, rec["peak_deviation_v"])
    return settle, over, peak


def cmd_kron(config_path, out_dir, quiet=False) -> int:
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        if "not connected" in str(exc):
            print(f"kron error: {exc}", file=sys.stderr)
            return 2
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if not cfg.is_bus:
        print("config error: no [grid.bus] network to reduce", file=sys.stderr)
        return 1
    try:
        reduced = kron_reduce(cfg.grid)
    except NetworkError as exc:
        print(f"kron error: {exc}", file=sys.stderr)
        return 2
    doc = copy.deepcopy(cfg.raw)
    grid_doc = grid_to_doc(reduced)
    if cfg.name:
        grid_doc = {"name": cfg.name, **grid_doc}
    doc["grid"] = grid_doc
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "kron_reduced.toml"
    path.write_text(emit_toml(doc))
    _say(quiet, f"reduced topology: {path} "
                f"({len(reduced.dgus)} DGUs, {len(reduced.lines)} lines)")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gridl1",
        description="DC microgrid adaptive voltage control: certification and simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="TOML configuration file")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--quiet", action="store_true", help="suppress stdout chatter")

    p_cert = sub.add_parser("certify", help="run the stability certification")
    common(p_cert)

    p_sim = sub.add_parser("simulate", help="run the scenario simulation")
    common(p_sim)
    p_sim.add_argument("--line-model", choices=["dynamic", "qsl"], default=None,
                       help="override the scenario line model")
    p_sim.add_argument("--seed", type=int, default=None,
                       help="reserved; simulations are deterministic")

    p_sweep = sub.add_parser("sweep", help="sweep one scalar config key")
    common(p_sweep)
    p_sweep.add_argument("--param", required=True, help="dotted key, e.g. l1.omega_c")
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated numeric values")
    p_sweep.add_argument("--seed", type=int, default=None,
                         help="reserved; simulations are deterministic")

    p_kron = sub.add_parser("kron", help="Kron-reduce a bus network to lines")
    common(p_kron)

    args = parser.parse_args(argv)
    if args.command == "certify":
        return cmd_certify(args.config, args.out, args.quiet)
    if args.command == "simulate":
        return cmd_simulate(args.config, args.out, args.line_model, args.quiet)
    if args.command == "sweep":
        try:
            values = [float(x) for x in args.values.split(",") if x.strip() != ""]
        except ValueError:
            print("config error: --values must be comma-separated numbers",
                  file=sys.stderr)
            return 1
        return cmd_sweep(args.config, args.param, values, args.out, args.quiet)
    if args.command == "kron":
        return cmd_kron(args.config, args.out, args.quiet)
    return 1


if __name__ == "__main__":
    sys.exit(main())
