#!/usr/bin/env python3
"""Run the whole benchmark battery into out/: certification of the radial
grid, the plug-and-play/fault/load/reference timeline, the bus-connected
suite, the Kron reduction demo, and a filter-bandwidth sweep."""

import sys
import time
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from gridl1.cli import cmd_certify, cmd_kron, cmd_simulate, cmd_sweep  # noqa: E402


def main():
    out = REPO / "out"
    cfg = REPO / "configs"
    jobs = [
        ("certify table1", lambda: cmd_certify(cfg / "table1_radial.toml",
                                               out / "certify")),
        ("simulate pnp timeline", lambda: cmd_simulate(cfg / "scenario_pnp.toml",
                                                       out / "pnp")),
        ("simulate bus suite", lambda: cmd_simulate(cfg / "scenario_bus.toml",
                                                    out / "bus")),
        ("kron reduce series demo", lambda: cmd_kron(cfg / "bus_series_demo.toml",
                                                     out / "kron")),
        ("kron reduce bus grid", lambda: cmd_kron(cfg / "scenario_bus.toml",
                                                  out / "kron_bus")),
        ("sweep filter bandwidth", lambda: cmd_sweep(
            cfg / "scenario_pnp.toml", "l1.omega_c",
            [628.3, 3141.6, 12566.4], out / "sweep")),
    ]
    failures = 0
    for name, job in jobs:
        t0 = time.time()
        rc = job()
        status = "ok" if rc == 0 else f"exit {rc}"
        print(f"[{time.time()-t0:7.1f}s] {name}: {status}")
        failures += rc != 0
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
