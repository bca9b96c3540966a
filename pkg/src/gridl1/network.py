"""Microgrid topology, operating points, small-signal models and Kron reduction.

Each distributed generation unit (DGU) is a boost converter feeding a local
load at its point of common coupling (PCC).  Units are coupled by resistive
inductive lines.  The averaged converter dynamics are nonlinear in the duty
cycle, so controller design works on the small-signal model linearised about
the steady-state duty.  Interior (non-DGU) nodes of bus-connected grids are
eliminated by Kron reduction before design.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NetworkError(ValueError):
    """Invalid grid description (bad parameters, disconnected network, ...)."""


@dataclass(frozen=True)
class DguParams:
    """Physical ratings and electrical constants of one boost converter DGU."""

    id: str
    v_in: float        # source voltage (V)
    r_t: float         # filter parasitic resistance (ohm)
    l_t: float         # filter inductance (H)
    c_t: float         # output capacitance (F)
    p_rated: float     # rated power (W)
    p_load: float      # nominal local load demand (W)
    v_ref: float       # reference PCC voltage (V)
    f_s: float = 25e3  # switching frequency (Hz), metadata for the averaged model
    shunt_g: float = 0.0    # extra shunt conductance at the PCC (S), from Kron reduction
    i_inject: float = 0.0   # extra constant current injection at the PCC (A)

    def __post_init__(self):
        if self.v_in <= 0:
            raise NetworkError(f"{self.id}: v_in must be positive, got {self.v_in}")
        if self.l_t <= 0 or self.c_t <= 0:
            raise NetworkError(f"{self.id}: l_t and c_t must be positive")
        if self.r_t < 0:
            raise NetworkError(f"{self.id}: r_t must be non-negative")
        if self.v_in >= self.v_ref:
            raise NetworkError(
                f"{self.id}: boost steps up, needs v_in < v_ref "
                f"(got v_in={self.v_in}, v_ref={self.v_ref})")
        if self.p_load < 0:
            raise NetworkError(f"{self.id}: p_load must be non-negative")
        if self.shunt_g < 0:
            raise NetworkError(f"{self.id}: shunt_g must be non-negative")


@dataclass(frozen=True)
class LineParams:
    """One resistive-inductive coupling line.

    Lines are undirected: (i, j) and (j, i) denote the same object, so
    endpoints are stored in sorted order and the positive current direction
    is from endpoints[1] into endpoints[0].
    """

    endpoints: tuple[str, str]
    r: float   # line resistance (ohm)
    l: float   # line inductance (H)

    def __post_init__(self):
        a, b = self.endpoints
        if a == b:
            raise NetworkError(f"line endpoints must differ, got ({a}, {b})")
        if self.r <= 0:
            raise NetworkError(f"line {a}-{b}: resistance must be positive")
        if self.l < 0:
            raise NetworkError(f"line {a}-{b}: inductance must be non-negative")
        object.__setattr__(self, "endpoints", tuple(sorted((a, b))))

    def other(self, node: str) -> str:
        a, b = self.endpoints
        return b if node == a else a


@dataclass(frozen=True)
class MicrogridTopology:
    """Load-connected microgrid: DGUs plus coupling lines (no interior nodes)."""

    dgus: tuple[DguParams, ...]
    lines: tuple[LineParams, ...]

    def __post_init__(self):
        ids = [d.id for d in self.dgus]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate DGU ids")
        idset = set(ids)
        seen = set()
        for ln in self.lines:
            for e in ln.endpoints:
                if e not in idset:
                    raise NetworkError(f"line endpoint {e!r} is not a DGU id")
            if ln.endpoints in seen:
                raise NetworkError(f"duplicate line {ln.endpoints}")
            seen.add(ln.endpoints)

    @property
    def dgu_map(self) -> dict[str, DguParams]:
        return {d.id: d for d in self.dgus}

    @property
    def neighbor_map(self) -> dict[str, set[str]]:
        nm: dict[str, set[str]] = {d.id: set() for d in self.dgus}
        for ln in self.lines:
            a, b = ln.endpoints
            nm[a].add(b)
            nm[b].add(a)
        return nm

    def lines_at(self, dgu_id: str) -> list[LineParams]:
        return [ln for ln in self.lines if dgu_id in ln.endpoints]

    def neighbors_of(self, dgu_id: str) -> list[tuple[LineParams, DguParams]]:
        dm = self.dgu_map
        return [(ln, dm[ln.other(dgu_id)]) for ln in self.lines_at(dgu_id)]


@dataclass(frozen=True)
class BusNode:
    """Interior node of a bus-connected grid with optional passive load."""

    id: str
    load_g: float = 0.0    # load conductance to ground (S)
    i_inject: float = 0.0  # current injection (A), positive into the node

    def __post_init__(self):
        if self.load_g < 0:
            raise NetworkError(f"bus node {self.id}: load_g must be non-negative")


@dataclass(frozen=True)
class Branch:
    """Resistive-inductive branch between any two nodes of a bus network."""

    endpoints: tuple[str, str]
    r: float
    l: float

    def __post_init__(self):
        a, b = self.endpoints
        if a == b:
            raise NetworkError(f"branch endpoints must differ, got ({a}, {b})")
        if self.r <= 0:
            raise NetworkError(f"branch {a}-{b}: resistance must be positive")
        if self.l < 0:
            raise NetworkError(f"branch {a}-{b}: inductance must be non-negative")


@dataclass(frozen=True)
class BusNetwork:
    """Bus-connected grid: DGUs, interior bus nodes, and branches between them."""

    dgus: tuple[DguParams, ...]
    bus_nodes: tuple[BusNode, ...]
    branches: tuple[Branch, ...]

    def __post_init__(self):
        if not self.dgus:
            raise NetworkError("bus network needs at least one DGU")
        ids = [d.id for d in self.dgus] + [n.id for n in self.bus_nodes]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate node ids in bus network")
        idset = set(ids)
        for br in self.branches:
            for e in br.endpoints:
                if e not in idset:
                    raise NetworkError(f"branch endpoint {e!r} unknown")
        if not self._connected():
            raise NetworkError("bus network is not connected")

    def _connected(self) -> bool:
        ids = [d.id for d in self.dgus] + [n.id for n in self.bus_nodes]
        if len(ids) == 1:
            return True
        adj: dict[str, set[str]] = {i: set() for i in ids}
        for br in self.branches:
            a, b = br.endpoints
            adj[a].add(b)
            adj[b].add(a)
        seen = {ids[0]}
        stack = [ids[0]]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == len(ids)

    @property
    def dgu_ids(self) -> list[str]:
        return [d.id for d in self.dgus]

    @property
    def bus_ids(self) -> list[str]:
        return [n.id for n in self.bus_nodes]


@dataclass(frozen=True)
class OperatingPoint:
    """Steady-state duty cycle and electrical quantities of one DGU."""

    duty: float          # D, dimensionless in (0, 1)
    i_t_bar: float       # inductor current (A)
    v_dc_bar: float      # PCC voltage (V)
    r_load_equiv: float  # equivalent load resistance (ohm); inf for zero load


def compute_operating_point(dgu: DguParams) -> OperatingPoint:
    """Lossless boost equilibrium: duty from the voltage conversion ratio.

    v_dc = v_in / (1 - D) so D = 1 - v_in/v_ref, and the inductor current
    follows from the equivalent load resistance r_load = v_ref^2 / p_load.
    Shunt conductance and current injection attributed to the PCC by Kron
    reduction count toward the effective local power.  With zero load the
    equivalent resistance is infinite and i_t_bar = 0 (line-fed operation
    neglected at the operating point).
    """
    duty = 1.0 - dgu.v_in / dgu.v_ref
    p_eff = dgu.p_load + dgu.shunt_g * dgu.v_ref ** 2 - dgu.i_inject * dgu.v_ref
    if p_eff > 0:
        r_load = dgu.v_ref ** 2 / p_eff
        i_t_bar = dgu.v_in / ((1.0 - duty) ** 2 * r_load)
    else:
        r_load = math.inf
        i_t_bar = 0.0
    return OperatingPoint(duty=duty, i_t_bar=i_t_bar, v_dc_bar=dgu.v_ref,
                          r_load_equiv=r_load)


@dataclass(frozen=True)
class SmallSignalModel:
    """Linearised DGU model about the duty operating point.

    States [i_t~, v_dc~]; input = duty perturbation; disturbance = load
    current.  Augmented forms add the integral state xi with
    xi_dot = v_ref - v_dc, giving states [i_t~, v_dc~, xi].
    """

    a_ii: np.ndarray                      # 2x2
    b_i: np.ndarray                       # 2
    e_i: np.ndarray                       # 2
    c_i: np.ndarray                       # 1x2 output row
    a_ii_aug: np.ndarray                  # 3x3
    b_i_aug: np.ndarray                   # 3
    a_ij_aug: dict[str, np.ndarray] = field(default_factory=dict)  # neighbor -> 3x3


def linearize(dgu: DguParams, op: OperatingPoint,
              neighbors: list[tuple[LineParams, DguParams]] = ()) -> SmallSignalModel:
    """Small-signal matrices of one DGU under the quasi-stationary line model.

    The voltage-row self term sums -1/(r_ij c_ti) over all neighbours; each
    neighbour contributes a coupling matrix with the single nonzero entry
    +1/(r_ij c_ti) at the (voltage, voltage) position.
    """
    d = op.duty
    coupling_sum = sum(1.0 / ln.r for ln, _ in neighbors)
    a_ii = np.array([
        [-dgu.r_t / dgu.l_t, -(1.0 - d) / dgu.l_t],
        [(1.0 - d) / dgu.c_t, -coupling_sum / dgu.c_t],
    ])
    b_i = np.array([op.v_dc_bar / dgu.l_t, -op.i_t_bar / dgu.c_t])
    e_i = np.array([0.0, -1.0 / dgu.c_t])
    c_i = np.array([[0.0, 1.0]])

    a_aug = np.zeros((3, 3))
    a_aug[:2, :2] = a_ii
    a_aug[2, :2] = -c_i[0]
    b_aug = np.array([b_i[0], b_i[1], 0.0])

    a_ij = {}
    for ln, nb in neighbors:
        m = np.zeros((3, 3))
        m[1, 1] = 1.0 / (ln.r * dgu.c_t)
        a_ij[nb.id] = m
    return SmallSignalModel(a_ii=a_ii, b_i=b_i, e_i=e_i, c_i=c_i,
                            a_ii_aug=a_aug, b_i_aug=b_aug, a_ij_aug=a_ij)


def linearize_all(topology: MicrogridTopology) -> dict[str, SmallSignalModel]:
    """Operating point + linearisation for every DGU of a topology."""
    out = {}
    for dgu in topology.dgus:
        op = compute_operating_point(dgu)
        out[dgu.id] = linearize(dgu, op, topology.neighbors_of(dgu.id))
    return out


def _conductance_matrix(ids: list[str], branches, load_g: dict[str, float]) -> np.ndarray:
    pos = {n: k for k, n in enumerate(ids)}
    g = np.zeros((len(ids), len(ids)))
    for br in branches:
        a, b = br.endpoints
        y = 1.0 / br.r
        g[pos[a], pos[a]] += y
        g[pos[b], pos[b]] += y
        g[pos[a], pos[b]] -= y
        g[pos[b], pos[a]] -= y
    for n, gl in load_g.items():
        g[pos[n], pos[n]] += gl
    return g


def kron_reduce(net: BusNetwork) -> MicrogridTopology:
    """Eliminate interior nodes by Schur complement on the nodal conductance matrix.

    The reduced grid preserves the DC port behaviour at the DGU PCCs: the
    reduced conductance matrix equals the Schur complement of the full one.
    Off-diagonal entries become equivalent lines, row sums become shunt
    conductances at the PCCs, and interior current injections map to
    equivalent injections at the PCCs.  Reduced line inductances are obtained
    from the same elimination applied to the reciprocal-inductance network
    (exact for series chains and parallel branches); they only matter to the
    dynamic-line simulator, not to the quasi-stationary design path.
    """
    dgu_ids = net.dgu_ids
    bus_ids = net.bus_ids
    ids = dgu_ids + bus_ids
    nb = len(dgu_ids)
    load_g = {n.id: n.load_g for n in net.bus_nodes}
    g = _conductance_matrix(ids, net.branches, load_g)

    if bus_ids:
        g_bb = g[:nb, :nb]
        g_bi = g[:nb, nb:]
        g_ii = g[nb:, nb:]
        if abs(np.linalg.det(g_ii)) < 1e-300:
            raise NetworkError("interior node block is singular; cannot eliminate")
        s = g_bb - g_bi @ np.linalg.solve(g_ii, g_bi.T)
        inj_i = np.array([n.i_inject for n in net.bus_nodes])
        inj_b = -g_bi @ np.linalg.solve(g_ii, inj_i)
    else:
        s = g
        inj_b = np.zeros(nb)

    # reciprocal-inductance network for the reduced line inductances
    all_l_positive = all(br.l > 0 for br in net.branches)
    if all_l_positive and net.branches:
        class _LBranch:
            def __init__(self, endpoints, y):
                self.endpoints = endpoints
                self.r = 1.0 / y
        lb = [_LBranch(br.endpoints, 1.0 / br.l) for br in net.branches]
        gl = _conductance_matrix(ids, lb, {})
        if bus_ids:
            gl_ii = gl[nb:, nb:]
            # interior block of the 1/L network can be singular when an interior
            # node has no inductive path; fall back to zero inductances then
            try:
                sl = gl[:nb, :nb] - gl[:nb, nb:] @ np.linalg.solve(gl_ii, gl[nb:, :nb])
            except np.linalg.LinAlgError:
                sl = None
        else:
            sl = gl
    else:
        sl = None

    new_lines = []
    for i in range(nb):
        for j in range(i + 1, nb):
            y = -s[i, j]
            if y > 1e-12:
                if sl is not None and -sl[i, j] > 1e-12:
                    l_ij = 1.0 / (-sl[i, j])
                else:
                    l_ij = 0.0
                new_lines.append(LineParams(endpoints=(dgu_ids[i], dgu_ids[j]),
                                            r=1.0 / y, l=l_ij))

    new_dgus = []
    for k, d in enumerate(net.dgus):
        shunt = float(s[k].sum())  # row sum = conductance to ground seen at the PCC
        if shunt < 1e-12:
            shunt = 0.0
        new_dgus.append(DguParams(
            id=d.id, v_in=d.v_in, r_t=d.r_t, l_t=d.l_t, c_t=d.c_t,
            p_rated=d.p_rated, p_load=d.p_load, v_ref=d.v_ref, f_s=d.f_s,
            shunt_g=d.shunt_g + shunt, i_inject=d.i_inject + float(inj_b[k])))
    return MicrogridTopology(dgus=tuple(new_dgus), lines=tuple(new_lines))


def assemble_global(topology: MicrogridTopology,
                    models: dict[str, SmallSignalModel],
                    gains: dict[str, np.ndarray]) -> np.ndarray:
    """Dense closed-loop state matrix of the coupled microgrid.

    Block diagonal A_ii - B_i K_i, off-diagonal coupling blocks A_ij, three
    states per DGU, ordered as topology.dgus.  Intended for offline
    eigenvalue analysis.
    """
    ids = [d.id for d in topology.dgus]
    pos = {i: 3 * k for k, i in enumerate(ids)}
    n = 3 * len(ids)
    a = np.zeros((n, n))
    for i in ids:
        m = models[i]
        k = np.asarray(gains[i], dtype=float).reshape(3)
        if m.a_ii_aug.shape != (3, 3):
            raise NetworkError(f"{i}: augmented model must be 3x3")
        a[pos[i]:pos[i] + 3, pos[i]:pos[i] + 3] = m.a_ii_aug - np.outer(m.b_i_aug, k)
        for j, a_ij in m.a_ij_aug.items():
            a[pos[i]:pos[i] + 3, pos[j]:pos[j] + 3] = a_ij
    return a
