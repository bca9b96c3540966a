"""Decentralised state-feedback baseline with integral action.

Gains are synthesised per DGU on the *nominal* decoupled augmented model
(a priori parameter knowledge), deliberately leaving the mismatch against
the true converter to the adaptive augmentation.  Default synthesis is LQI;
pole placement is available as an alternative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.signal import place_poles

from .network import DguParams, SmallSignalModel, compute_operating_point, linearize


class SynthesisError(ValueError):
    """Baseline synthesis cannot proceed (uncontrollable pair, bad weights, ...)."""


@dataclass(frozen=True)
class BaselineGains:
    """State-feedback gain row [k_i, k_v, k_xi]: u = -(k_i i~ + k_v v~ + k_xi xi)."""

    k_i: float
    k_v: float
    k_xi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.k_i, self.k_v, self.k_xi])


@dataclass(frozen=True)
class NominalParams:
    """Assumed converter constants used for baseline design."""

    l_t: float = 2.794e-6
    c_t: float = 60.6e-6
    r_t: float = 0.1
    duty: float = 0.7368


# default LQI weights; chosen so the 40 us sampled closed loop stays stable
# across the full converter parameter spread (see tests)
DEFAULT_Q = (1.0, 1.0, 1e8)
DEFAULT_R = 1e5


def nominal_design_model(dgu: DguParams, nominal: NominalParams = NominalParams()) -> SmallSignalModel:
    """Decoupled augmented model built from nominal constants.

    The nominal source voltage is back-computed from the DGU's own reference
    voltage and the nominal duty so the nominal operating point lands exactly
    on the nominal duty cycle.
    """
    v_in_nom = dgu.v_ref * (1.0 - nominal.duty)
    nom = DguParams(id=dgu.id, v_in=v_in_nom, r_t=nominal.r_t, l_t=nominal.l_t,
                    c_t=nominal.c_t, p_rated=dgu.p_rated, p_load=dgu.p_load,
                    v_ref=dgu.v_ref, f_s=dgu.f_s)
    op = compute_operating_point(nom)
    return linearize(nom, op, [])


def _check_controllable(a: np.ndarray, b: np.ndarray):
    n = a.shape[0]
    cols = [b.reshape(n, 1)]
    for _ in range(n - 1):
        cols.append(a @ cols[-1])
    if np.linalg.matrix_rank(np.hstack(cols)) < n:
        raise SynthesisError("(A, B) pair is not controllable")


def _check_stabilizable(a: np.ndarray, b: np.ndarray):
    # PBH test on the closed right half plane; uncontrollable stable modes
    # are fine for the Riccati synthesis
    n = a.shape[0]
    for lam in np.linalg.eigvals(a):
        if lam.real < -1e-12 * max(1.0, abs(lam)):
            continue
        m = np.hstack([lam * np.eye(n) - a, b.reshape(n, 1)])
        if np.linalg.matrix_rank(m, tol=1e-9 * max(1.0, np.linalg.norm(m))) < n:
            raise SynthesisError("(A, B) pair is not stabilizable")


def synth_lqi(model: SmallSignalModel, q: np.ndarray, r: float) -> BaselineGains:
    """Infinite-horizon LQ regulator on the integral-augmented model."""
    a = model.a_ii_aug
    b = model.b_i_aug
    if r <= 0:
        raise SynthesisError(f"input weight must be positive, got {r}")
    q = np.asarray(q, dtype=float)
    if q.shape != (3, 3):
        raise SynthesisError("state weight must be 3x3")
    eig_q = np.linalg.eigvalsh(0.5 * (q + q.T))
    if eig_q.min() < -1e-12 * max(1.0, eig_q.max()):
        raise SynthesisError("state weight must be positive semidefinite")
    _check_stabilizable(a, b)
    p = sla.solve_continuous_are(a, b.reshape(3, 1), q, np.array([[r]]))
    k = (b @ p) / r
    cl = np.linalg.eigvals(a - np.outer(b, k))
    if cl.real.max() >= 0:
        raise SynthesisError("Riccati synthesis returned a non-Hurwitz closed loop")
    return BaselineGains(k_i=k[0], k_v=k[1], k_xi=k[2])


def synth_pole_place(model: SmallSignalModel, poles) -> BaselineGains:
    """Place the augmented closed-loop poles at the requested locations."""
    a = model.a_ii_aug
    b = model.b_i_aug
    poles = np.asarray(poles, dtype=complex)
    if poles.shape != (3,):
        raise SynthesisError("exactly three poles required")
    if not np.allclose(np.sort_complex(poles), np.sort_complex(poles.conj())):
        raise SynthesisError("pole set must be closed under conjugation")
    if poles.real.max() >= 0:
        raise SynthesisError("requested poles must be strictly stable")
    _check_controllable(a, b)
    res = place_poles(a, b.reshape(3, 1), poles)
    k = res.gain_matrix[0]
    return BaselineGains(k_i=k[0], k_v=k[1], k_xi=k[2])


def baseline_control(gains: BaselineGains, x_aug) -> float:
    """Evaluate u_bl = -K x for the augmented deviation state [i~, v~, xi]."""
    x = np.asarray(x_aug, dtype=float)
    return float(-(gains.k_i * x[0] + gains.k_v * x[1] + gains.k_xi * x[2]))


def synth_all(dgus, nominal: NominalParams = NominalParams(),
              q=None, r: float = DEFAULT_R) -> dict[str, BaselineGains]:
    """LQI gains for every DGU from its nominal design model."""
    if q is None:
        q = np.diag(DEFAULT_Q)
    return {d.id: synth_lqi(nominal_design_model(d, nominal), q, r) for d in dgus}
