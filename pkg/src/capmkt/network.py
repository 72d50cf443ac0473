"""DC load-flow network model.

Holds the zonal/nodal grid description, PTDF construction, the
exact-projection feasibility test for zonal net positions (existence of an
auxiliary nodal dispatch meeting all line limits), and the extraction of a
maximal NTC box of bilateral border exchanges.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.optimize import linprog

from .qp import QPInfeasibleError, solve_qp

logger = logging.getLogger(__name__)

__all__ = [
    "Line",
    "Network",
    "PTDFMatrix",
    "NTCBox",
    "NetworkError",
    "ProjectionResult",
    "build_ptdf",
    "compute_dc_flows",
    "exact_projection_feasible",
    "compute_max_ntc_box",
    "truncate_scenario_demands",
    "dump_ptdf_csv",
]

BALANCE_RTOL = 1e-6


class NetworkError(Exception):
    pass


@dataclass(frozen=True)
class Line:
    from_node: str
    to_node: str
    susceptance: float
    f_max_mw: float

    @property
    def id(self) -> str:
        return f"{self.from_node}-{self.to_node}"


@dataclass(frozen=True)
class Network:
    """Zonal transmission grid.

    ``demand_share`` allocates each zone's demand to its nodes; shares are
    nonnegative and sum to one within every zone.
    """

    nodes: tuple
    lines: tuple
    zones: tuple
    node_zone: dict
    demand_share: dict

    def __post_init__(self):
        nodes = tuple(self.nodes)
        zones = tuple(self.zones)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "zones", zones)
        object.__setattr__(self, "lines", tuple(self.lines))
        if set(self.node_zone) != set(nodes):
            raise NetworkError("node_zone must map every node exactly once")
        for n, z in self.node_zone.items():
            if z not in zones:
                raise NetworkError(f"node {n} assigned to unknown zone {z}")
        for z in zones:
            members = [n for n in nodes if self.node_zone[n] == z]
            if not members:
                raise NetworkError(f"zone {z} has no nodes")
            total = sum(self.demand_share.get(n, 0.0) for n in members)
            if abs(total - 1.0) > 1e-9:
                raise NetworkError(f"demand shares in zone {z} sum to {total}, expected 1")
        if any(s < 0 for s in self.demand_share.values()):
            raise NetworkError("demand shares must be nonnegative")
        for ln in self.lines:
            if ln.f_max_mw <= 0:
                raise NetworkError(f"line {ln.id} has nonpositive f_max")
            if ln.from_node not in nodes or ln.to_node not in nodes:
                raise NetworkError(f"line {ln.id} references unknown node")
        if not self._connected():
            raise NetworkError("network graph is not connected")

    def _connected(self) -> bool:
        if not self.nodes:
            return False
        adj = {n: set() for n in self.nodes}
        for ln in self.lines:
            adj[ln.from_node].add(ln.to_node)
            adj[ln.to_node].add(ln.from_node)
        seen = {self.nodes[0]}
        stack = [self.nodes[0]]
        while stack:
            for m in adj[stack.pop()]:
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        return len(seen) == len(self.nodes)

    # index helpers -----------------------------------------------------
    @property
    def node_index(self) -> dict:
        return {n: i for i, n in enumerate(self.nodes)}

    @property
    def zone_index(self) -> dict:
        return {z: i for i, z in enumerate(self.zones)}

    def zone_nodes(self, zone) -> list:
        return [n for n in self.nodes if self.node_zone[n] == zone]

    def zone_membership_matrix(self) -> np.ndarray:
        """|Z| x |N| indicator matrix of zone membership."""
        M = np.zeros((len(self.zones), len(self.nodes)))
        for j, n in enumerate(self.nodes):
            M[self.zone_index[self.node_zone[n]], j] = 1.0
        return M

    def share_vector(self) -> np.ndarray:
        return np.array([self.demand_share[n] for n in self.nodes])

    def f_max_vector(self) -> np.ndarray:
        return np.array([ln.f_max_mw for ln in self.lines])

    def borders(self) -> list:
        """Ordered zone pairs connected by at least one line."""
        pairs = set()
        for ln in self.lines:
            z1 = self.node_zone[ln.from_node]
            z2 = self.node_zone[ln.to_node]
            if z1 != z2:
                pairs.add(tuple(sorted((z1, z2))))
        return sorted(pairs)


@dataclass(frozen=True)
class PTDFMatrix:
    """Line-by-node sensitivities of flows to balanced nodal injections."""

    entries: np.ndarray
    slack: str
    line_ids: tuple
    node_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "entries", np.asarray(self.entries, dtype=float))
        if self.entries.shape != (len(self.line_ids), len(self.node_ids)):
            raise NetworkError("PTDF entries shape does not match line/node ids")


@dataclass(frozen=True)
class NTCBox:
    """Bilateral exchange bounds per border, both directions nonnegative."""

    borders: tuple
    atc_plus: np.ndarray
    atc_minus: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "atc_plus", np.asarray(self.atc_plus, dtype=float))
        object.__setattr__(self, "atc_minus", np.asarray(self.atc_minus, dtype=float))
        if np.any(self.atc_plus < -1e-9) or np.any(self.atc_minus < -1e-9):
            raise NetworkError("ATC bounds must be nonnegative")


@dataclass
class ProjectionResult:
    feasible: bool
    dispatch: np.ndarray | None = None
    injections: np.ndarray | None = None
    flows: np.ndarray | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.feasible


def build_ptdf(network: Network, slack: str) -> PTDFMatrix:
    """Build the PTDF matrix of a connected DC network for a slack node.

    Flows follow the line orientation (from -> to positive). The slack
    column is identically zero; flows of balanced injection vectors are
    slack independent.
    """
    if slack not in network.nodes:
        raise NetworkError(f"slack node {slack} not in network")
    n = len(network.nodes)
    idx = network.node_index
    b = np.array([ln.susceptance for ln in network.lines])
    if np.any(b <= 0):
        raise NetworkError("susceptances must be positive")
    A = np.zeros((len(network.lines), n))
    for k, ln in enumerate(network.lines):
        A[k, idx[ln.from_node]] = 1.0
        A[k, idx[ln.to_node]] = -1.0
    B_bus = A.T @ (b[:, None] * A)
    keep = [i for i in range(n) if i != idx[slack]]
    B_red = B_bus[np.ix_(keep, keep)]
    cond = np.linalg.cond(B_red)
    if not np.isfinite(cond) or cond > 1e12:
        raise NetworkError(
            f"reduced susceptance matrix is numerically singular (cond={cond:.3e})")
    X = np.zeros((n, n))
    X[np.ix_(keep, keep)] = np.linalg.inv(B_red)
    ptdf = (b[:, None] * A) @ X
    ptdf[:, idx[slack]] = 0.0
    return PTDFMatrix(ptdf, slack, tuple(ln.id for ln in network.lines), network.nodes)


def compute_dc_flows(ptdf: PTDFMatrix, injections) -> np.ndarray:
    """Line flows of a balanced nodal injection vector (MW)."""
    r = np.asarray(injections, dtype=float).ravel()
    if r.shape[0] != len(ptdf.node_ids):
        raise NetworkError(
            f"injection vector has {r.shape[0]} entries, expected {len(ptdf.node_ids)}")
    imbalance = abs(float(np.sum(r)))
    if imbalance > BALANCE_RTOL * max(float(np.sum(np.abs(r))), 1e-12):
        raise NetworkError(
            f"injections are unbalanced: sum={np.sum(r):.6g} of gross {np.sum(np.abs(r)):.6g}")
    return ptdf.entries @ r


def exact_projection_feasible(network: Network, ptdf: PTDFMatrix, net_positions,
                              nodal_caps, nodal_demand) -> ProjectionResult:
    """Test whether zonal net positions admit a feasible nodal dispatch.

    Feasible means: there is a dispatch ``0 <= g_n <= cap_n`` whose
    injections ``r_n = g_n - d_n`` aggregate to the requested net position
    in every zone, balance system wide, and keep every line within its
    thermal limit. Returns a witness on success, an infeasibility marker
    otherwise.
    """
    np_z = np.asarray(net_positions, dtype=float).ravel()
    caps = np.asarray(nodal_caps, dtype=float).ravel()
    d = np.asarray(nodal_demand, dtype=float).ravel()
    nn = len(network.nodes)
    if np_z.shape[0] != len(network.zones) or caps.shape[0] != nn or d.shape[0] != nn:
        raise NetworkError("dimension mismatch between network and projection inputs")
    total = float(np.sum(np_z))
    scale = max(float(np.sum(np.abs(np_z))), 1.0)
    if abs(total) > BALANCE_RTOL * scale:
        raise NetworkError(f"net positions do not balance (sum={total:.6g})")

    M = network.zone_membership_matrix()
    F = network.f_max_vector()
    H = ptdf.entries
    # anchor pulls the witness toward the demand-share allocation of the
    # zonal production target; keeps degenerate witnesses deterministic
    prod = np_z + M @ d
    anchor = network.share_vector() * (M.T @ prod)
    A_in = np.vstack([H, -H])
    b_in = np.concatenate([F + H @ d, F - H @ d])
    try:
        res = solve_qp(np.eye(nn), -anchor, lb=np.zeros(nn), ub=caps,
                       A_eq=M, b_eq=prod, A_in=A_in, b_in=b_in)
    except QPInfeasibleError as exc:
        return ProjectionResult(False, reason=str(exc))
    g = res.x
    r = g - d
    f = H @ r
    return ProjectionResult(True, dispatch=g, injections=r, flows=f)


def truncate_scenario_demands(network: Network, nodal_caps, scenario_demands) -> list:
    """Cap each zone's scenario demand at its committed nodal capacity.

    Zones planned as structural importers are short of their own scarcity
    demand by design, which would make even the zero-exchange point of an
    NTC box infeasible. Transfer capability is therefore measured against
    the locally coverable part of each scenario demand; nodal proportions
    are preserved.
    """
    caps = np.asarray(nodal_caps, dtype=float).ravel()
    M = network.zone_membership_matrix()
    cap_z = M @ caps
    out = []
    for dem in scenario_demands:
        dem = np.asarray(dem, dtype=float).ravel()
        dem_z = M @ dem
        factors = np.ones(len(network.zones))
        for zi in range(len(network.zones)):
            if dem_z[zi] > cap_z[zi] and dem_z[zi] > 0:
                factors[zi] = cap_z[zi] / dem_z[zi]
        out.append(dem * (M.T @ factors))
    return out


def exchange_injection_map(network: Network) -> tuple:
    """Borders and the shift-key map from directed exchanges to injections.

    Exchanges are converted to nodal injections with generation shift keys
    equal to the zonal demand shares, the ex-ante convention of NTC
    domains: an exporting zone ramps its nodes up proportionally, an
    importing zone ramps down, with no intra-zonal re-dispatch. Columns are
    ordered [plus directions..., minus directions...].
    """
    borders = network.borders()
    k = len(borders)
    nn = len(network.nodes)
    zi = network.zone_index
    M = network.zone_membership_matrix()
    S = network.share_vector()
    G = np.zeros((nn, 2 * k))
    for bdx, (z1, z2) in enumerate(borders):
        col = S * M[zi[z1]] - S * M[zi[z2]]
        G[:, bdx] = col        # z1 -> z2 exchange
        G[:, k + bdx] = -col   # z2 -> z1 exchange
    return borders, G


def compute_max_ntc_box(network: Network, ptdf: PTDFMatrix, nodal_caps_fixed,
                        scarcity_demands) -> NTCBox:
    """Largest NTC box whose exchange vertices are deliverable in every scenario.

    Maximizes the sum of directed border capacities subject to: each of the
    2^k vertices of the bilateral-exchange box is deliverable in every
    scarcity scenario when exchanges shift nodal dispatch by demand-share
    shift keys around the scenario base state (demands truncated to zonal
    committed capacity, see :func:`truncate_scenario_demands`). The
    shift-key dispatch is itself a valid witness, so every vertex also
    passes the exact projection test.
    """
    borders, G = exchange_injection_map(network)
    k = len(borders)
    if not borders:
        return NTCBox((), np.zeros(0), np.zeros(0))
    if not scarcity_demands:
        raise NetworkError("at least one scarcity scenario is required")
    caps = np.asarray(nodal_caps_fixed, dtype=float).ravel()
    nn = len(network.nodes)
    demands = truncate_scenario_demands(network, caps, scarcity_demands)
    F = network.f_max_vector()
    H = ptdf.entries
    HG = H @ G

    # variables: atc_plus (k), atc_minus (k)
    A_ub_rows, b_ub = [], []
    for signs in product((1.0, -1.0), repeat=k):
        # vertex selector: plus column at +1, minus column at -1
        sel = np.zeros((2 * k, 2 * k))
        for bdx, sgn in enumerate(signs):
            if sgn > 0:
                sel[bdx, bdx] = 1.0
            else:
                sel[k + bdx, k + bdx] = 1.0
        flow_map = HG @ sel
        inj_map = G @ sel
        for sign in (1.0, -1.0):
            A_ub_rows.append(sign * flow_map)
            b_ub.append(np.full(H.shape[0], 1.0) * F)
        for s, dem in enumerate(demands):
            # shifted dispatch stays within [0, caps]
            A_ub_rows.append(inj_map)
            b_ub.append(caps - dem)
            A_ub_rows.append(-inj_map)
            b_ub.append(dem)
    A_ub = np.vstack(A_ub_rows)
    b_ub = np.concatenate(b_ub)
    c = -np.ones(2 * k)  # maximize total directed capacity
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=[(0, None)] * (2 * k),
                  method="highs")
    if not res.success:
        logger.warning("NTC box optimization found no feasible box (%s); "
                       "returning all-zero box", res.message)
        return NTCBox(tuple(borders), np.zeros(k), np.zeros(k))
    atc_plus = np.maximum(res.x[:k], 0.0)
    atc_minus = np.maximum(res.x[k: 2 * k], 0.0)
    if float(atc_plus.sum() + atc_minus.sum()) <= 1e-6:
        logger.warning("NTC box has zero volume on all borders")
        return NTCBox(tuple(borders), np.zeros(k), np.zeros(k))
    return NTCBox(tuple(borders), atc_plus, atc_minus)


def box_vertex_net_positions(network: Network, box: NTCBox) -> list:
    """Zonal net-position vectors at every vertex of an NTC box."""
    zi = network.zone_index
    out = []
    for signs in product((1.0, -1.0), repeat=len(box.borders)):
        np_z = np.zeros(len(network.zones))
        for bdx, (z1, z2) in enumerate(box.borders):
            e = box.atc_plus[bdx] if signs[bdx] > 0 else -box.atc_minus[bdx]
            np_z[zi[z1]] += e
            np_z[zi[z2]] -= e
        out.append(np_z)
    return out


def dump_ptdf_csv(ptdf: PTDFMatrix, path) -> None:
    """Write the PTDF matrix as (line-id, node-id, value) rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["line_id", "node_id", "value"])
        for i, lid in enumerate(ptdf.line_ids):
            for j, nid in enumerate(ptdf.node_ids):
                writer.writerow([lid, nid, repr(float(ptdf.entries[i, j]))])
