"""Distributed adaptive voltage augmentation: per-DGU runtime.

Each unit runs a state predictor coupled to the predictor states of its
neighbours (the low-bandwidth communication links follow the electrical
coupling graph), a projection-bounded adaptation law driven by the
prediction error, and a first-order low-pass filter on the adaptive control
signal.  The filter bandwidth, not the adaptation gain, governs robustness,
which is what permits fast adaptation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla


DUTY_MAX = 0.95

# fraction of the projection ball radius over which the smooth projection
# ramps from identity to full radial removal
_PROJ_BAND = 0.1


def design_matrix(poles, form: str = "normal") -> np.ndarray:
    """Hurwitz predictor design matrix from desired pole locations.

    "normal" builds the diagonal (normal) realisation, whose distance to
    instability equals the slowest pole magnitude; "companion" builds the
    control-canonical companion matrix (heavily non-normal: its distance to
    instability collapses for fast poles, so it generally cannot satisfy the
    coupling-dominance condition on realistic grids).
    """
    poles = np.asarray(poles, dtype=complex)
    if poles.real.max() >= 0:
        raise ValueError("design poles must be strictly stable")
    if form == "normal":
        if np.abs(poles.imag).max() > 0:
            raise ValueError("normal form implemented for real poles")
        return np.diag(poles.real.astype(float))
    if form == "companion":
        coeffs = np.real(np.poly(poles))  # [1, a2, a1, a0]
        a = np.zeros((len(poles), len(poles)))
        a[:-1, 1:] = np.eye(len(poles) - 1)
        a[-1, :] = -coeffs[:0:-1]
        return a
    raise ValueError(f"unknown design matrix form {form!r}")


@dataclass
class L1Config:
    """Per-DGU adaptive controller design constants.

    p solves the local algebraic Riccati certificate
    a_m' p + p a_m + n_i p p + (xi_sq + epsilon) I = 0.
    """

    a_m: np.ndarray          # 3x3 Hurwitz design matrix
    b: np.ndarray            # canonical input direction (0, 0, 1)
    gamma: float             # adaptation gain
    omega_c: float           # control filter bandwidth (rad/s)
    theta_max: float         # adaptation bound (1-norm ball radius)
    p: np.ndarray            # 3x3 symmetric positive definite ARE solution
    epsilon: float           # ARE margin
    xi_sq: float             # coupling bound
    n_i: int                 # neighbour count
    _zoh: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.a_m = np.asarray(self.a_m, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        if np.linalg.eigvals(self.a_m).real.max() >= 0:
            raise ValueError("a_m must be Hurwitz")
        if not np.allclose(self.p, self.p.T, atol=1e-9 * max(1.0, abs(self.p).max())):
            raise ValueError("p must be symmetric")
        if np.linalg.eigvalsh(self.p).min() <= 0:
            raise ValueError("p must be positive definite")
        res = self.a_m.T @ self.p + self.p @ self.a_m \
            + self.n_i * (self.p @ self.p) + (self.xi_sq + self.epsilon) * np.eye(3)
        scale = max(1.0, self.xi_sq + self.epsilon)
        if np.linalg.norm(res) / scale >= 1e-8:
            raise ValueError("p does not solve the local ARE to tolerance")
        if self.theta_max < 0 or self.gamma <= 0 or self.omega_c <= 0:
            raise ValueError("gamma, omega_c must be positive and theta_max >= 0")

    # radius of the 2-norm projection ball; ||theta||_1 <= sqrt(3)*||theta||_2,
    # so this radius guarantees the 1-norm adaptation bound
    @property
    def proj_radius(self) -> float:
        return self.theta_max / np.sqrt(3.0)

    def zoh(self, dt: float):
        """Cached zero-order-hold discretisation (expm and its integral)."""
        got = self._zoh.get(dt)
        if got is None:
            e = sla.expm(self.a_m * dt)
            phi = np.linalg.solve(self.a_m, e - np.eye(3))
            alpha = 1.0 - np.exp(-self.omega_c * dt)
            got = (e, phi, alpha)
            self._zoh[dt] = got
        return got


@dataclass
class ControllerState:
    """Runtime state of one DGU's controller stack."""

    x_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))
    lpf_state: float = 0.0
    xi_int: float = 0.0
    u_l1: float = 0.0
    u_total: float = 0.0


def predictor_step(cfg: L1Config, st: ControllerState, x_meas: np.ndarray,
                   neighbor_xhat: list[tuple[np.ndarray, np.ndarray]],
                   d_hat: float, dt: float) -> np.ndarray:
    """Advance the state predictor by one control tick.

    Integrates  x_hat' = a_m x_hat + b (u_l1 + theta_hat . x) + (0,0,1) d_hat
                        + sum_j A_ij x_hat_j
    holding the uncertainty and exogenous terms constant over the tick
    (zero-order hold), with the homogeneous part propagated exactly through
    the matrix exponential.  The estimated-uncertainty regressor is the
    measured state, which is what makes the prediction-error dynamics
    x~' = A_m x~ + b theta~ . x + couplings hold.  neighbor_xhat carries
    *predictor* states of the neighbours, snapshotted at the previous tick,
    not their plant states.
    """
    e, phi, _ = cfg.zoh(dt)
    drive = cfg.b * (st.u_l1 + float(st.theta_hat @ np.asarray(x_meas, dtype=float)))
    drive = drive + np.array([0.0, 0.0, d_hat])
    for a_ij, xj in neighbor_xhat:
        drive = drive + a_ij @ xj
    st.x_hat = e @ st.x_hat + phi @ drive
    return st.x_hat


def smooth_projection(theta: np.ndarray, raw: np.ndarray, radius: float) -> np.ndarray:
    """Convex-boundary projection on the 2-norm ball.

    Identity strictly inside the boundary band; on or beyond the boundary,
    the outward radial component of the update is removed (scaled removal
    across the band keeps the vector field Lipschitz).
    """
    if radius <= 0:
        return np.zeros_like(raw)
    nrm = np.linalg.norm(theta)
    inner = radius * (1.0 - _PROJ_BAND)
    if nrm <= inner:
        return raw
    radial = theta / nrm
    outward = float(radial @ raw)
    if outward <= 0:
        return raw
    frac = min(1.0, (nrm - inner) / (radius - inner))
    return raw - frac * outward * radial


def adaptive_step(cfg: L1Config, st: ControllerState, x_meas: np.ndarray,
                  x_hat: np.ndarray, dt: float) -> np.ndarray:
    """Projection-bounded adaptation driven by the prediction error.

    theta_hat' = gamma * Proj(theta_hat, -x (x~ . p b))  with
    x~ = x_meas - x_hat.  A hard renormalisation after the Euler step keeps
    the discrete trajectory inside the ball regardless of step size.
    """
    x_meas = np.asarray(x_meas, dtype=float)
    x_tilde = x_meas - np.asarray(x_hat, dtype=float)
    raw = -x_meas * float(x_tilde @ (cfg.p @ cfg.b))
    upd = smooth_projection(st.theta_hat, raw, cfg.proj_radius)
    theta = st.theta_hat + cfg.gamma * dt * upd
    nrm = np.linalg.norm(theta)
    if nrm > cfg.proj_radius > 0:
        theta = theta * (cfg.proj_radius / nrm)
    elif cfg.proj_radius == 0:
        theta = np.zeros(3)
    st.theta_hat = theta
    return theta


def lpf_step(cfg: L1Config, st: ControllerState, raw: float, dt: float) -> float:
    """Exact zero-order-hold step of the first-order control filter."""
    _, _, alpha = cfg.zoh(dt)
    st.lpf_state = st.lpf_state + alpha * (raw - st.lpf_state)
    return st.lpf_state


def l1_control(cfg: L1Config, st: ControllerState, dt: float) -> float:
    """Filtered adaptive control signal u_l1 = LPF[-theta_hat . x_hat]."""
    st.u_l1 = lpf_step(cfg, st, -float(st.theta_hat @ st.x_hat), dt)
    return st.u_l1


def composite_control(baseline_u: float, u_l1: float, duty_op: float,
                      d_max: float = DUTY_MAX) -> tuple[float, bool]:
    """Total actuated duty: operating point plus both perturbations, clamped.

    Returns (duty, saturated); the saturation flag freezes the baseline
    integrator upstream (anti-windup).
    """
    duty = duty_op + baseline_u + u_l1
    if duty > d_max:
        return d_max, True
    if duty < 0.0:
        return 0.0, True
    return duty, False
