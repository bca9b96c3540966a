"""Transient quality metrics for voltage traces.

Quantifies the post-event behaviour: peak deviation, overshoot (on the
commanded-step basis when one exists, and always on the reference basis),
settling time into a percentage band, and steady-state error.  The default
settling band is 1% of the target, a fixed documented convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class TransientMetrics:
    overshoot_pct: float          # of the step magnitude if given, else of target
    overshoot_pct_vref: float     # always of the target (reference basis)
    settling_time: float          # s from t0, last exit from the band; inf if unsettled
    peak_deviation: float         # V
    steady_state_error: float     # V, mean of the final 10% minus target
    band_pct: float
    settled: bool

    def as_dict(self) -> dict:
        return {
            "overshoot_pct": self.overshoot_pct,
            "overshoot_pct_vref": self.overshoot_pct_vref,
            "settling_time_s": self.settling_time,
            "peak_deviation_v": self.peak_deviation,
            "steady_state_error_v": self.steady_state_error,
            "band_pct": self.band_pct,
            "settled": self.settled,
        }


def analyze_window(t, v, t0: float, target: float, band_pct: float = 1.0,
                   step_magnitude: float | None = None) -> TransientMetrics:
    """Metrics of one uniformly sampled voltage window starting at the event.

    Overshoot is the largest signed deviation beyond the target in the
    post-event direction (the direction of the peak excursion); settling time
    is measured from t0 to the last sample outside the +-band_pct band around
    the target.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    if t.shape != v.shape or t.ndim != 1:
        raise MetricsError("t and v must be 1-d arrays of equal length")
    if len(t) < 20:
        raise MetricsError(f"window too short: {len(t)} samples, need >= 20")

    dev = v - target
    peak_idx = int(np.argmax(np.abs(dev)))
    peak = float(np.abs(dev[peak_idx]))
    direction = np.sign(dev[peak_idx]) if dev[peak_idx] != 0 else 1.0
    overshoot_v = max(0.0, float(direction * dev[peak_idx]))

    basis = abs(step_magnitude) if step_magnitude else abs(target)
    overshoot_pct = 100.0 * overshoot_v / basis if basis > 0 else 0.0
    overshoot_vref = 100.0 * overshoot_v / abs(target) if target != 0 else 0.0

    band = band_pct / 100.0 * abs(target)
    outside = np.abs(dev) > band
    if outside.any():
        last_out = int(np.where(outside)[0][-1])
        if last_out == len(t) - 1:
            settling = float("inf")
            settled = False
        else:
            settling = float(t[last_out + 1] - t0)
            settled = True
    else:
        settling = 0.0
        settled = True

    tail = max(1, int(round(0.1 * len(v))))
    sse = float(np.mean(v[-tail:]) - target)
    return TransientMetrics(
        overshoot_pct=overshoot_pct, overshoot_pct_vref=overshoot_vref,
        settling_time=settling, peak_deviation=peak,
        steady_state_error=sse, band_pct=band_pct, settled=settled)
