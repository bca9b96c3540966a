#!/usr/bin/env python3
"""Quick look at a simulation trace: PCC voltages, duties, adaptive signals.

Usage: python scripts/plot_traces.py out/pnp/trace.csv [fig.png]
"""

import sys

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def main(path, save=None):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    if data.ndim == 1:
        data = data.reshape(1, -1)
    t = data[:, 0]
    ids = [h[5:] for h in header if h.startswith("v_dc_")]
    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(9, 8))
    for i in ids:
        axes[0].plot(t * 1e3, data[:, header.index(f"v_dc_{i}")], label=i)
        axes[1].plot(t * 1e3, data[:, header.index(f"duty_{i}")], label=i)
        axes[2].plot(t * 1e3, data[:, header.index(f"u_l1_{i}")], label=i)
    axes[0].set_ylabel("PCC voltage (V)")
    axes[1].set_ylabel("duty")
    axes[2].set_ylabel("adaptive duty trim")
    axes[2].set_xlabel("time (ms)")
    axes[0].legend(loc="best", ncol=3, fontsize=8)
    for ax in axes:
        ax.grid(alpha=0.3)
    fig.tight_layout()
    out = save or "trace.png"
    fig.savefig(out, dpi=130)
    print(f"wrote {out}")


if __name__ == "__main__":
    if len(sys.argv) < 2:
        print(__doc__)
        sys.exit(1)
    main(*sys.argv[1:3])
