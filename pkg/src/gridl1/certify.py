"""Offline global-asymptotic-stability certification.

Per DGU the checks are: (a) the coupling bound Xi^2 summed over neighbours,
(b) the predictor design matrix keeps its distance to instability above
sqrt(N_i Xi_i^2) so the Hamiltonian of the local Riccati certificate is
hyperbolic, (c) the certificate P solves
A_m' P + P A_m + N_i P P + (Xi^2 + eps) I = 0 with P > 0, and (d) the
low-pass filter satisfies the small-gain condition
lambda = ||G||_L1 * theta_max < 1 with G(s) = (sI - A_m)^{-1} b (1 - C(s)).

Plug-in proposals are certified locally: only the new unit and its
neighbours get recomputed records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy.integrate import quad
from scipy.optimize import brentq

from .adaptive import design_matrix
from .network import MicrogridTopology, SmallSignalModel


class HyperbolicityError(ValueError):
    """The Riccati Hamiltonian has imaginary-axis eigenvalues (no certificate)."""


def coupling_bound(neighbor_couplings) -> float:
    """Xi^2 = sum over neighbours of the largest eigenvalue of A_ij' A_ij."""
    total = 0.0
    for a in neighbor_couplings:
        a = np.asarray(a, dtype=float)
        total += float(np.linalg.eigvalsh(a.T @ a).max())
    return total


def _imag_axis_frequencies(a_m, sigma, tol):
    """Imaginary parts of near-axis eigenvalues of the Byers pencil H(sigma)."""
    n = a_m.shape[0]
    h = np.block([[a_m, -sigma * np.eye(n)], [sigma * np.eye(n), -a_m.T]])
    ev = np.linalg.eigvals(h)
    hits = ev[np.abs(ev.real) <= tol]
    return np.abs(hits.imag)


def min_distance(a_m, tol: float | None = None, max_iter: int = 200) -> float:
    """Distance to instability: min over omega of sigma_min(A_m - j omega I).

    Bisection on sigma using the Hamiltonian test (H(sigma) touches the
    imaginary axis iff sigma >= gamma), bracketed by [0, min |Re eig|].
    Eigenvalue detection only *proposes* crossing frequencies; every accepted
    bound is a direct (backward-stable) singular value evaluation, so
    detection noise on strongly non-normal matrices cannot push the result
    below the true distance.
    """
    a_m = np.asarray(a_m, dtype=float)
    n = a_m.shape[0]
    eigs = np.linalg.eigvals(a_m)
    if eigs.real.max() >= 0:
        raise ValueError("min_distance requires a Hurwitz matrix")
    norm = np.linalg.norm(a_m)
    if tol is None:
        tol = 1e-6 * min(1.0, norm)
    det_tol = 1e-4 * max(1.0, norm)
    eye = np.eye(n)

    def smin(w):
        return float(np.linalg.svd(a_m - 1j * w * eye, compute_uv=False)[-1])

    # upper bound from direct evaluations at natural seed frequencies
    seeds = {0.0}
    seeds.update(float(abs(l.imag)) for l in eigs)
    seeds.update(float(abs(l)) for l in eigs)
    best_w = min(seeds, key=smin)
    hi = smin(best_w)
    lo = 0.0
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        ws = _imag_axis_frequencies(a_m, mid, det_tol)
        improved = False
        if ws.size:
            cands = sorted(set(np.concatenate([
                ws, 0.5 * (np.sort(ws)[:-1] + np.sort(ws)[1:])]) if ws.size > 1 else ws))
            for w in cands:
                v = smin(w)
                if v < hi:
                    hi, best_w, improved = v, float(w), True
        if ws.size and improved and hi <= mid:
            continue
        # no crossing found at or below mid: certified lower bound
        lo = mid
    # local polish around the best frequency found
    from scipy.optimize import minimize_scalar
    span = max(1e-3 * max(1.0, abs(best_w)), tol)
    res = minimize_scalar(smin, bounds=(max(0.0, best_w - span), best_w + span),
                          method="bounded", options={"xatol": 1e-12 * max(1.0, best_w)})
    return float(min(hi, res.fun))


def solve_local_are(a_m, n_i: int, xi_sq: float, epsilon: float) -> np.ndarray:
    """Stabilising solution of A_m'P + P A_m + N_i P P + (Xi^2 + eps) I = 0.

    Solved through the invariant subspace of the Hamiltonian
    [[A_m, N_i I], [-(Xi^2+eps) I, -A_m']]: the orthonormal basis of the
    stable eigenspace [U1; U2] gives P = U2 U1^{-1}.  Hyperbolicity failure
    (imaginary-axis Hamiltonian eigenvalues) means the coupling dominates the
    design matrix and no certificate exists.
    """
    a_m = np.asarray(a_m, dtype=float)
    n = a_m.shape[0]
    q = xi_sq + epsilon
    ham = np.block([[a_m, n_i * np.eye(n)], [-q * np.eye(n), -a_m.T]])
    ev = np.linalg.eigvals(ham)
    axis_tol = 1e-9 * max(1.0, np.abs(ev).max())
    if np.abs(ev.real).min() <= axis_tol:
        raise HyperbolicityError(
            "Riccati Hamiltonian has imaginary-axis eigenvalues; the distance "
            "condition gamma > sqrt(N_i Xi_i^2) is violated")
    t, z, sdim = sla.schur(ham, output="real", sort=lambda re, im: re < 0)
    if sdim != n:
        raise HyperbolicityError(
            f"stable Hamiltonian eigenspace has dimension {sdim}, expected {n}")
    u1 = z[:n, :n]
    u2 = z[n:, :n]
    if abs(np.linalg.det(u1)) < 1e-300:
        raise HyperbolicityError("stable eigenspace is not a graph subspace")
    p = u2 @ np.linalg.inv(u1)
    p = 0.5 * (p + p.T)
    return p


def are_residual(a_m, p, n_i: int, xi_sq: float, epsilon: float) -> float:
    """Relative Frobenius residual of the local ARE."""
    a_m = np.asarray(a_m, dtype=float)
    q = xi_sq + epsilon
    res = a_m.T @ p + p @ a_m + n_i * (p @ p) + q * np.eye(a_m.shape[0])
    return float(np.linalg.norm(res) / max(1.0, q))


def theta_bound(theta_set) -> float:
    """Largest 1-norm over a box of parameter bounds.

    Accepts per-component magnitudes (symmetric box) or (lo, hi) pairs.
    """
    total = 0.0
    for comp in theta_set:
        if np.isscalar(comp):
            total += abs(float(comp))
        else:
            lo, hi = comp
            total += max(abs(float(lo)), abs(float(hi)))
    return total


def _impulse_evaluator(a_big, b_big, channel: int):
    """Scalar impulse response g_k(t) = e_k' exp(A t) B, vectorised over t.

    Uses the eigendecomposition when well conditioned (one pass instead of an
    expm per evaluation); defective cascades (repeated poles) fall back to
    expm.
    """
    try:
        lam, v = np.linalg.eig(a_big)
        cond = np.linalg.cond(v)
    except np.linalg.LinAlgError:
        cond = np.inf
    if np.isfinite(cond) and cond < 1e8:
        w = np.linalg.solve(v, b_big.astype(complex))
        row = v[channel]

        def g(t):
            e = np.exp(np.multiply.outer(np.asarray(t, dtype=float), lam))
            return np.real(e @ (row * w))
        return g

    def g(t):
        if np.ndim(t) == 0:
            return float((sla.expm(a_big * float(t)) @ b_big)[channel])
        return np.array([float((sla.expm(a_big * tk) @ b_big)[channel]) for tk in t])
    return g


def _impulse_abs_integral(a_big, b_big, channel: int, t_end: float) -> float:
    """integral_0^T |g_k(t)| dt by piecewise quadrature between sign changes."""
    g = _impulse_evaluator(a_big, b_big, channel)
    grid = np.linspace(0.0, t_end, 2001)
    vals = np.asarray(g(grid), dtype=float)
    if np.abs(vals).max() == 0.0:
        return 0.0
    # each quad piece integrates a one-signed stretch, so |integral| = integral of | |
    roots = [0.0]
    for k in range(len(grid) - 1):
        if vals[k] * vals[k + 1] < 0:
            roots.append(brentq(g, grid[k], grid[k + 1]))
    roots.append(t_end)
    total = 0.0
    for a, b in zip(roots[:-1], roots[1:]):
        if b - a < 1e-300:
            continue
        val, _ = quad(g, a, b, limit=200, epsabs=1e-12, epsrel=1e-11)
        total += abs(val)
    return total


def l1_norm_condition(a_m, b, omega_c: float, theta_max: float) -> tuple[float, bool]:
    """Small-gain filter condition lambda = ||G||_L1 * theta_max < 1.

    G(s) = H(s)(1 - C(s)) with H = (sI - A_m)^{-1} b and C the first-order
    filter; ||G||_L1 is the largest over output channels of the absolute
    impulse-response integral, truncated where the slowest cascade mode has
    decayed below 1e-9 relative.
    """
    a_m = np.asarray(a_m, dtype=float)
    b = np.asarray(b, dtype=float)
    if omega_c <= 0:
        raise ValueError("filter bandwidth must be positive")
    n = a_m.shape[0]
    # cascade realisation: xdot = A_m x + b(u - z), zdot = -wc z + wc u, y = x
    a_big = np.zeros((n + 1, n + 1))
    a_big[:n, :n] = a_m
    a_big[:n, n] = -b
    a_big[n, n] = -omega_c
    b_big = np.concatenate([b, [omega_c]])
    slowest = np.abs(np.linalg.eigvals(a_big).real).min()
    t_end = 40.0 / slowest
    g_norm = max(_impulse_abs_integral(a_big, b_big, k, t_end) for k in range(n))
    lam = g_norm * theta_max
    return float(lam), bool(lam < 1.0)


@dataclass
class L1Design:
    """Design constants shared by all units' adaptive controllers."""

    a_m_poles: tuple[float, ...] = (-1.2e5, -1.3e5, -1.4e5)
    a_m_form: str = "normal"
    gamma: float = 1e6
    omega_c: float = 2.0 * np.pi * 500.0
    theta_box: tuple = (0.5, 0.5, 20.0)
    epsilon_coeff: float = 0.01
    d_max: float = 0.95

    def a_m(self) -> np.ndarray:
        return design_matrix(self.a_m_poles, self.a_m_form)

    def b(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0])

    def theta_max(self) -> float:
        return theta_bound(self.theta_box)

    def epsilon(self, xi_sq: float) -> float:
        return self.epsilon_coeff * (xi_sq + 1.0)


@dataclass
class DguCertRecord:
    dgu_id: str
    n_i: int
    xi_sq: float
    gamma: float
    gamma_threshold: float
    gamma_ok: bool
    are_ok: bool
    are_residual: float
    p_min_eigenvalue: float
    lam: float
    lambda_ok: bool
    theta_max: float
    passed: bool
    failures: list[str] = field(default_factory=list)
    p: list | None = None

    def as_dict(self) -> dict:
        return {
            "dgu_id": self.dgu_id, "n_i": self.n_i, "xi_sq": self.xi_sq,
            "gamma": self.gamma, "gamma_threshold": self.gamma_threshold,
            "gamma_ok": self.gamma_ok, "are_ok": self.are_ok,
            "are_residual": self.are_residual,
            "p_min_eigenvalue": self.p_min_eigenvalue,
            "lambda": self.lam, "lambda_ok": self.lambda_ok,
            "theta_max": self.theta_max, "passed": self.passed,
            "failures": list(self.failures), "p": self.p,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DguCertRecord":
        d = dict(d)
        d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class CertReport:
    """Machine-readable certification result (JSON-serialisable)."""

    records: dict[str, DguCertRecord]
    global_pass: bool

    def as_dict(self) -> dict:
        return {"global_pass": self.global_pass,
                "dgus": {i: r.as_dict() for i, r in sorted(self.records.items())}}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CertReport":
        d = json.loads(text)
        recs = {i: DguCertRecord.from_dict(r) for i, r in d["dgus"].items()}
        return cls(records=recs, global_pass=d["global_pass"])

    def summary(self) -> str:
        lines = []
        for i, r in sorted(self.records.items()):
            status = "pass" if r.passed else "FAIL: " + "; ".join(r.failures)
            lines.append(f"  {i}: gamma={r.gamma:.4g} vs threshold={r.gamma_threshold:.4g},"
                         f" lambda={r.lam:.4g}, are_residual={r.are_residual:.2e} [{status}]")
        head = "certification: GLOBAL PASS" if self.global_pass else "certification: GLOBAL FAIL"
        return "\n".join([head] + lines)


def _certify_one(dgu_id: str, model: SmallSignalModel, design: L1Design,
                 gamma: float, lam: float, lambda_ok: bool) -> DguCertRecord:
    xi_sq = coupling_bound(model.a_ij_aug.values())
    n_i = len(model.a_ij_aug)
    threshold = float(np.sqrt(n_i * xi_sq))
    gamma_ok = gamma > threshold
    failures = []
    if not gamma_ok:
        failures.append(
            f"distance condition: gamma={gamma:.6g} <= sqrt(N_i*Xi^2)={threshold:.6g}")
    eps = design.epsilon(xi_sq)
    a_m = design.a_m()
    try:
        p = solve_local_are(a_m, n_i, xi_sq, eps)
        residual = are_residual(a_m, p, n_i, xi_sq, eps)
        p_min = float(np.linalg.eigvalsh(p).min())
        are_ok = residual < 1e-8 and p_min > 0
        if not are_ok:
            failures.append(f"ARE certificate: residual={residual:.3g}, min eig={p_min:.3g}")
        p_out = p.tolist()
    except HyperbolicityError as exc:
        are_ok = False
        residual = float("inf")
        p_min = float("nan")
        p_out = None
        failures.append(f"ARE certificate: {exc}")
    if not lambda_ok:
        failures.append(f"filter condition: lambda={lam:.6g} >= 1")
    return DguCertRecord(
        dgu_id=dgu_id, n_i=n_i, xi_sq=xi_sq, gamma=gamma,
        gamma_threshold=threshold, gamma_ok=gamma_ok, are_ok=are_ok,
        are_residual=residual, p_min_eigenvalue=p_min, lam=lam,
        lambda_ok=lambda_ok, theta_max=design.theta_max(),
        passed=gamma_ok and are_ok and lambda_ok, failures=failures, p=p_out)


def certify(topology: MicrogridTopology, models: dict[str, SmallSignalModel],
            design: L1Design = L1Design()) -> CertReport:
    """Run all checks for every DGU of a linearised topology."""
    a_m = design.a_m()
    gamma = min_distance(a_m)
    lam, lambda_ok = l1_norm_condition(a_m, design.b(), design.omega_c,
                                       design.theta_max())
    records = {}
    for dgu in topology.dgus:
        records[dgu.id] = _certify_one(dgu.id, models[dgu.id], design,
                                       gamma, lam, lambda_ok)
    return CertReport(records=records,
                      global_pass=all(r.passed for r in records.values()))


def recertify_plugin(prev: CertReport, topology: MicrogridTopology,
                     models: dict[str, SmallSignalModel], design: L1Design,
                     new_dgus) -> CertReport:
    """Certify a plug-in/out proposal touching only the changed units.

    Records of DGUs that are neither new nor adjacent to a new unit are
    copied verbatim from the previous report (scalability: certification is
    local to the changed neighbourhood).
    """
    new_set = set(new_dgus)
    nm = topology.neighbor_map
    affected = set(new_set)
    for i in new_set:
        affected |= nm.get(i, set())
    a_m = design.a_m()
    gamma = min_distance(a_m)
    lam, lambda_ok = l1_norm_condition(a_m, design.b(), design.omega_c,
                                       design.theta_max())
    records = {}
    for dgu in topology.dgus:
        if dgu.id in affected or dgu.id not in prev.records:
            records[dgu.id] = _certify_one(dgu.id, models[dgu.id], design,
                                           gamma, lam, lambda_ok)
        else:
            records[dgu.id] = prev.records[dgu.id]
    return CertReport(records=records,
                      global_pass=all(r.passed for r in records.values()))
