"""Market clearing problems.

Single-step clearing of the coupled zonal energy markets (flow-based, with
an auxiliary nodal dispatch witness), construction of scarcity scenarios
and zonal capacity demand, and annual capacity-market clearing in four
variants: no cross-border participation, flow-based coupling, NTC-bounded
bilateral exchanges, and implicit participation (handled through adjusted
capacity demand).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .network import Network, NTCBox, PTDFMatrix
from .qp import QPInfeasibleError, solve_qp

logger = logging.getLogger(__name__)

__all__ = [
    "SupplyOffer",
    "DemandBid",
    "CapacityOffer",
    "EnergyStepOutcome",
    "EnergyMarketOutcome",
    "ScarcityScenario",
    "CapacityMarketOutcome",
    "ClearingError",
    "InfeasibleClearingError",
    "clear_energy_market_step",
    "build_scarcity_scenarios",
    "compute_capacity_demand",
    "clear_capacity_market_fbmc",
    "clear_capacity_market_ntc",
    "clear_capacity_market_nocbp",
    "export_witness_csv",
]


class ClearingError(Exception):
    pass


class InfeasibleClearingError(ClearingError):
    def __init__(self, message, detail=None):
        super().__init__(message)
        self.detail = detail or {}


@dataclass(frozen=True)
class SupplyOffer:
    """Marginal-cost supply schedule b_lin + a_quad * g up to cap_mw."""

    gen_id: str
    zone: str
    a_quad: float
    b_lin: float
    cap_mw: float


@dataclass(frozen=True)
class DemandBid:
    """Zonal demand: an inelastic block and a linearly decreasing elastic block."""

    zone: str
    inelastic_mw: float
    inelastic_value: float
    elastic_cap_mw: float
    wtp: float


@dataclass(frozen=True)
class CapacityOffer:
    gen_id: str
    zone: str
    quantity_mw: float
    price: float = 0.0


@dataclass
class EnergyStepOutcome:
    zones: tuple
    prices: np.ndarray
    net_positions: np.ndarray
    flows: np.ndarray
    nodal_dispatch: np.ndarray
    nodal_injections: np.ndarray
    nodal_demand: np.ndarray
    dispatch: dict
    elastic: np.ndarray
    inelastic: np.ndarray
    ens: np.ndarray
    welfare: float


@dataclass
class EnergyMarketOutcome:
    """Zonal prices, net positions, flows and nodal witness over all steps."""

    zones: tuple
    line_ids: tuple
    node_ids: tuple
    prices: np.ndarray          # zones x steps
    net_positions: np.ndarray   # zones x steps, positive = net export
    flows: np.ndarray           # lines x steps
    nodal_dispatch: np.ndarray  # nodes x steps
    nodal_injections: np.ndarray
    nodal_demand: np.ndarray
    nodal_caps: np.ndarray      # nodes
    price_cap: float


@dataclass
class ScarcityScenario:
    """A stressed system state against which deliverability is certified."""

    id: str
    nodal_capacity_demand: np.ndarray
    description: str

    def zonal_totals(self, network: Network) -> np.ndarray:
        return network.zone_membership_matrix() @ self.nodal_capacity_demand


@dataclass
class CapacityMarketOutcome:
    zones: tuple
    prices: np.ndarray             # per zone, per MW-year
    zonal_demand: np.ndarray
    cleared_offers: dict           # gen id -> MW
    zonal_cleared: np.ndarray      # Y^cm per zone
    net_obligation: np.ndarray     # per zone, positive = net export of obligations
    scenario_ids: tuple = ()
    scarcity_dispatch: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    scarcity_injections: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    scarcity_flows: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    nodal_allocation: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bilateral_exchanges: dict | None = None


# ---------------------------------------------------------------------------
# energy market
# ---------------------------------------------------------------------------

def clear_energy_market_step(t: int, offers, bids, network: Network,
                             ptdf: PTDFMatrix, installed, price_cap: float,
                             renewables=None) -> EnergyStepOutcome:
    """Clear one timestep of the coupled zonal energy markets.

    ``installed`` caps the zonal total of the auxiliary nodal dispatch;
    ``renewables`` is zonal must-run infeed treated as negative demand.
    Returns zonal prices (duals of the zonal balances), net positions with
    a feasibility witness, and per-offer dispatch.
    """
    if price_cap <= 0:
        raise ClearingError("price cap must be positive")
    zones = network.zones
    nz, nn = len(zones), len(network.nodes)
    zi = network.zone_index
    offers = list(offers)
    bids_by_zone = {b.zone: b for b in bids}
    if set(bids_by_zone) != set(zones):
        raise ClearingError("exactly one demand bid per zone is required")
    R = np.zeros(nz)
    if renewables:
        for z, val in renewables.items():
            R[zi[z]] = float(val)
    inst = np.array([float(installed[z]) for z in zones])
    for z in zones:
        cap_sum = sum(o.cap_mw for o in offers if o.zone == z)
        if cap_sum > inst[zi[z]] + 1e-6 * max(1.0, inst[zi[z]]):
            raise InfeasibleClearingError(
                f"nodal capacity allocation infeasible in zone {z}: offered "
                f"{cap_sum:.1f} MW exceeds installed {inst[zi[z]]:.1f} MW",
                detail={"zone": z})

    no = len(offers)
    # variables: g (no), e (nz), i (nz), ghat (nn), NP (nz)
    n_var = no + 2 * nz + nn + nz
    ge, ee, ie, gh, npo = 0, no, no + nz, no + 2 * nz, no + 2 * nz + nn
    M = network.zone_membership_matrix()
    S = network.share_vector()
    H = ptdf.entries
    F = network.f_max_vector()
    smap = (M * S[None, :]).T  # nodes x zones: nodal share of zonal demand

    Pd = np.zeros(n_var)
    q = np.zeros(n_var)
    ecap = np.zeros(nz)
    icap = np.zeros(nz)
    for z, b in bids_by_zone.items():
        j = zi[z]
        ecap[j] = b.elastic_cap_mw
        icap[j] = b.inelastic_mw
        if b.elastic_cap_mw > 0:
            Pd[ee + j] = b.wtp / b.elastic_cap_mw
        q[ee + j] = -b.wtp
        q[ie + j] = -min(b.inelastic_value, price_cap)
    for k, o in enumerate(offers):
        Pd[ge + k] = o.a_quad
        q[ge + k] = o.b_lin

    lb = np.zeros(n_var)
    ub = np.full(n_var, np.inf)
    ub[ge:ge + no] = [max(o.cap_mw, 0.0) for o in offers]
    ub[ee:ee + nz] = ecap
    ub[ie:ie + nz] = icap
    lb[npo:] = -np.inf

    A_eq = []
    b_eq = []
    for z in zones:  # zonal balance -> price dual
        j = zi[z]
        row = np.zeros(n_var)
        for k, o in enumerate(offers):
            if o.zone == z:
                row[ge + k] = 1.0
        row[ee + j] = -1.0
        row[ie + j] = -1.0
        row[npo + j] = -1.0
        A_eq.append(row)
        b_eq.append(-R[j])
    for z in zones:  # witness aggregation
        j = zi[z]
        row = np.zeros(n_var)
        row[gh:gh + nn] = M[j]
        row[ee + j] = -1.0
        row[ie + j] = -1.0
        row[npo + j] = -1.0
        A_eq.append(row)
        b_eq.append(-R[j])
    row = np.zeros(n_var)
    row[npo:] = 1.0
    A_eq.append(row)
    b_eq.append(0.0)

    A_in = []
    b_in = []
    # witness totals equal zonal production through the two balance rows, so
    # the installed-capacity cap on the witness is already implied by the
    # per-offer caps (checked above); restating it would only create a
    # redundant, dual-degenerate constraint
    # flows: H @ (ghat - smap@(e+i) + smap@R) within +-F
    blockE = -H @ smap
    cshift = H @ (smap @ R)
    for sign in (1.0, -1.0):
        for l in range(H.shape[0]):
            row = np.zeros(n_var)
            row[gh:gh + nn] = sign * H[l]
            row[ee:ee + nz] = sign * blockE[l]
            row[ie:ie + nz] = sign * blockE[l]
            A_in.append(row)
            b_in.append(F[l] - sign * cshift[l])

    try:
        res = solve_qp(np.diag(Pd), q, lb=lb, ub=ub,
                       A_eq=np.array(A_eq), b_eq=np.array(b_eq),
                       A_in=np.array(A_in), b_in=np.array(b_in))
    except QPInfeasibleError as exc:
        raise InfeasibleClearingError(f"energy clearing infeasible at step {t}: {exc}")

    prices = np.clip(-res.eq_duals[:nz], 0.0, price_cap)
    x = res.x
    e = x[ee:ee + nz]
    i = x[ie:ie + nz]
    ghat = x[gh:gh + nn]
    np_z = x[npo:]
    d_nodal = smap @ (e + i) - smap @ R
    inj = ghat - d_nodal
    flows = H @ inj
    dispatch = {o.gen_id: float(x[ge + k]) for k, o in enumerate(offers)}
    return EnergyStepOutcome(zones=zones, prices=prices, net_positions=np_z,
                             flows=flows, nodal_dispatch=ghat,
                             nodal_injections=inj, nodal_demand=d_nodal,
                             dispatch=dispatch, elastic=e, inelastic=i,
                             ens=icap - i, welfare=-res.objective)


# ---------------------------------------------------------------------------
# scarcity scenarios and capacity demand
# ---------------------------------------------------------------------------

def build_scarcity_scenarios(peak_residual, network: Network, mode: str = "all",
                             simultaneous_share: float = 0.95,
                             self_share: float = 1.0,
                             other_share: float = 0.9) -> list:
    """Stressed states: one simultaneous scenario plus one per zone.

    ``peak_residual`` maps zone to its peak residual demand (MW); nodal
    values follow the zonal demand shares.
    """
    zones = network.zones
    peaks = np.array([float(peak_residual[z]) for z in zones])
    if np.any(peaks < 0):
        raise ClearingError("peak residual demand must be nonnegative")
    S = network.share_vector()
    M = network.zone_membership_matrix()

    def nodal(zonal_targets):
        return S * (M.T @ zonal_targets)

    scenarios = []
    if mode in ("all", "simultaneous"):
        scenarios.append(ScarcityScenario(
            id="simultaneous",
            nodal_capacity_demand=nodal(simultaneous_share * peaks),
            description="simultaneous"))
    if mode in ("all", "zonal"):
        for j, z in enumerate(zones):
            targets = other_share * peaks
            targets[j] = self_share * peaks[j]
            scenarios.append(ScarcityScenario(
                id=f"zonal-{z}",
                nodal_capacity_demand=nodal(targets),
                description=f"zonal-{z}"))
    if not scenarios:
        raise ClearingError(f"unknown scenario mode {mode!r}")
    return scenarios


def compute_capacity_demand(design: str, profiles, *, eps: float, wtp: float,
                            price_cap: float, fbmc_result=None,
                            network: Network | None = None) -> dict:
    """Zonal demand for firm capacity.

    Peak residual demand evaluated at the price cap: inelastic demand plus
    the elastic demand at the cap, net of renewable infeed. The implicit
    design subtracts the imports expected during the zone's own scarcity
    scenario of a prior flow-based solution.
    """
    infeed = profiles.renewable_infeed()
    out = {}
    for j, z in enumerate(profiles.zones):
        D = profiles.demand[z]
        at_cap = (1.0 - eps) * D + eps * D * (1.0 - price_cap / wtp)
        residual = at_cap - infeed[j]
        val = float(np.max(residual))
        if val < 0:
            logger.warning("capacity demand in zone %s is negative (%.1f MW); "
                           "floored at 0", z, val)
            val = 0.0
        out[z] = val
    if design == "CM-Implicit":
        if fbmc_result is None:
            raise ClearingError("CM-Implicit requires a prior CM-FBMC outcome")
        if network is None:
            raise ClearingError("CM-Implicit requires the network for zonal sums")
        M = network.zone_membership_matrix()
        for j, z in enumerate(network.zones):
            sid = f"zonal-{z}"
            if sid not in fbmc_result.scenario_ids:
                raise ClearingError(f"FBMC outcome lacks scenario {sid}")
            s = fbmc_result.scenario_ids.index(sid)
            np_sc = float(M[j] @ fbmc_result.scarcity_injections[s])
            imports = max(0.0, -np_sc)
            out[z] = max(0.0, out[z] - imports)
    return out


# ---------------------------------------------------------------------------
# capacity market clearings
# ---------------------------------------------------------------------------

def fbmc_deliverability_blocks(network: Network, ptdf: PTDFMatrix, scenarios,
                               nodal_caps=None):
    """Constraint matrices of the flow-based deliverability set.

    Variable layout: [Pco (Z), ycmr (N), gsc (S*N)]. Callers append their
    own clearing-balance coupling. Returns (n_var, offsets, equalities,
    inequalities, bounds) with ycmr <= nodal_caps when caps are given; the
    zonal tie of ycmr to cleared volumes is left to the caller.
    """
    nz = len(network.zones)
    nn = len(network.nodes)
    ns = len(scenarios)
    n_var = nz + nn + ns * nn
    o_pco, o_ycmr, o_gsc = 0, nz, nz + nn
    M = network.zone_membership_matrix()
    H = ptdf.entries
    F = network.f_max_vector()

    A_eq, b_eq, A_in, b_in = [], [], [], []
    for s, sc in enumerate(scenarios):
        D = np.asarray(sc.nodal_capacity_demand, dtype=float)
        ofs = o_gsc + s * nn
        row = np.zeros(n_var)  # global balance of scarcity injections
        row[ofs:ofs + nn] = 1.0
        A_eq.append(row)
        b_eq.append(float(D.sum()))
        for j in range(nz):  # obligations covered: Pco_z <= sum injections
            row = np.zeros(n_var)
            row[o_pco + j] = 1.0
            row[ofs:ofs + nn] = -M[j]
            A_in.append(row)
            b_in.append(-float(M[j] @ D))
        for k in range(nn):  # dispatch within committed nodal capacity
            row = np.zeros(n_var)
            row[ofs + k] = 1.0
            row[o_ycmr + k] = -1.0
            A_in.append(row)
            b_in.append(0.0)
        for sign in (1.0, -1.0):  # thermal limits on scarcity flows
            for l in range(H.shape[0]):
                row = np.zeros(n_var)
                row[ofs:ofs + nn] = sign * H[l]
                A_in.append(row)
                b_in.append(F[l] + sign * float(H[l] @ D))
    row = np.zeros(n_var)  # obligations trade balances across zones
    row[o_pco:o_pco + nz] = 1.0
    A_eq.append(row)
    b_eq.append(0.0)

    lb = np.zeros(n_var)
    lb[o_pco:o_pco + nz] = -np.inf
    ub = np.full(n_var, np.inf)
    if nodal_caps is not None:
        ub[o_ycmr:o_ycmr + nn] = np.asarray(nodal_caps, dtype=float)
    offsets = {"pco": o_pco, "ycmr": o_ycmr, "gsc": o_gsc, "n_var": n_var}
    return offsets, (A_eq, b_eq), (A_in, b_in), (lb, ub)


def _assemble_outcome(network, ptdf, scenarios, offers, cleared, demand_vec,
                      prices, pco, ycmr, gsc, exchanges=None):
    zones = network.zones
    nn = len(network.nodes)
    ns = len(scenarios)
    inj = np.zeros((ns, nn))
    flows = np.zeros((ns, len(network.lines)))
    for s, sc in enumerate(scenarios):
        inj[s] = gsc[s] - sc.nodal_capacity_demand
        if ptdf is not None:  # NTC clearing carries no network sensitivities
            flows[s] = ptdf.entries @ inj[s]
    zonal_cleared = np.zeros(len(zones))
    for o, x in zip(offers, cleared):
        zonal_cleared[network.zone_index[o.zone]] += x
    return CapacityMarketOutcome(
        zones=zones,
        prices=np.maximum(np.asarray(prices, dtype=float), 0.0),
        zonal_demand=np.asarray(demand_vec, dtype=float),
        cleared_offers={o.gen_id: float(x) for o, x in zip(offers, cleared)},
        zonal_cleared=zonal_cleared,
        net_obligation=np.asarray(pco, dtype=float),
        scenario_ids=tuple(sc.id for sc in scenarios),
        scarcity_dispatch=np.asarray(gsc, dtype=float).reshape(ns, nn),
        scarcity_injections=inj,
        scarcity_flows=flows,
        nodal_allocation=np.asarray(ycmr, dtype=float),
        bilateral_exchanges=exchanges,
    )


def clear_capacity_market_fbmc(offers, demand, scenarios, network: Network,
                               ptdf: PTDFMatrix, nodal_caps) -> CapacityMarketOutcome:
    """Annual coupled capacity auction with flow-based deliverability.

    Minimizes procurement cost of the price-quantity offers subject to
    zonal capacity balances and, for every scarcity scenario, the existence
    of a nodal dispatch of committed capacity that serves the scenario
    demand within all network limits.
    """
    if not scenarios:
        raise ClearingError("at least one scarcity scenario is required")
    offers = list(offers)
    zones = network.zones
    offsets, (A_eq, b_eq), (A_in, b_in), (lb, ub) = fbmc_deliverability_blocks(
        network, ptdf, scenarios, nodal_caps)
    base = offsets["n_var"]
    n_var = base + len(offers)
    demand_vec = np.array([float(demand[z]) for z in zones])

    def widen(row):
        return np.concatenate([row, np.zeros(len(offers))])

    A_eq = [widen(r) for r in A_eq]
    A_in = [widen(r) for r in A_in]
    balance_rows = []
    for j, z in enumerate(zones):  # sum offers - Pco = demand  -> price dual
        row = np.zeros(n_var)
        row[offsets["pco"] + j] = -1.0
        for k, o in enumerate(offers):
            if o.zone == z:
                row[base + k] = 1.0
        balance_rows.append(len(A_eq))
        A_eq.append(row)
        b_eq.append(demand_vec[j])
    for j, z in enumerate(zones):  # nodal allocation covers cleared volume
        row = np.zeros(n_var)
        row[offsets["ycmr"]:offsets["ycmr"] + len(network.nodes)] = \
            network.zone_membership_matrix()[j]
        row[offsets["pco"] + j] = -1.0
        A_eq.append(row)
        b_eq.append(demand_vec[j])

    lb = np.concatenate([lb, np.zeros(len(offers))])
    ub = np.concatenate([ub, np.array([max(o.quantity_mw, 0.0) for o in offers])])
    c = np.zeros(n_var)
    for k, o in enumerate(offers):
        c[base + k] = o.price
    res = linprog(c, A_ub=np.array(A_in), b_ub=np.array(b_in),
                  A_eq=np.array(A_eq), b_eq=np.array(b_eq),
                  bounds=list(zip(lb, np.where(np.isinf(ub), None, ub))),
                  method="highs")
    if not res.success:
        detail = _diagnose_deliverability(network, scenarios, nodal_caps, demand_vec)
        raise InfeasibleClearingError(
            f"flow-based capacity clearing infeasible: {res.message}; "
            + detail["summary"], detail=detail)
    duals = np.array([res.eqlin.marginals[i] for i in balance_rows])
    x = res.x
    nn = len(network.nodes)
    gsc = x[offsets["gsc"]:offsets["gsc"] + len(scenarios) * nn].reshape(
        len(scenarios), nn)
    return _assemble_outcome(network, ptdf, scenarios, offers, x[base:],
                             demand_vec, duals,
                             x[offsets["pco"]:offsets["pco"] + len(zones)],
                             x[offsets["ycmr"]:offsets["ycmr"] + nn], gsc)


def _diagnose_deliverability(network, scenarios, nodal_caps, demand_vec):
    caps = np.asarray(nodal_caps, dtype=float)
    lines = []
    for sc in scenarios:
        need = float(np.sum(sc.nodal_capacity_demand))
        have = float(np.sum(caps))
        if need > have:
            lines.append(f"scenario {sc.id}: demand {need:.0f} MW exceeds "
                         f"total committed capacity {have:.0f} MW")
    if float(demand_vec.sum()) > float(caps.sum()):
        lines.append(f"total capacity demand {demand_vec.sum():.0f} MW exceeds "
                     f"nodal caps {caps.sum():.0f} MW")
    return {"summary": "; ".join(lines) or "no aggregate shortfall detected; "
            "binding network constraints", "checks": lines}


def clear_capacity_market_ntc(offers, demand, scenarios, ntc_box: NTCBox,
                              network: Network,
                              zonal_caps=None) -> CapacityMarketOutcome:
    """Annual capacity auction with bilateral trade inside an NTC box.

    Deliverability is zonal: the net obligation of each zone must be
    covered by its scarcity dispatch, itself limited by cleared capacity.
    """
    if not scenarios:
        raise ClearingError("at least one scarcity scenario is required")
    offers = list(offers)
    caps = zonal_caps
    zones = network.zones
    nz = len(zones)
    zi = network.zone_index
    ns = len(scenarios)
    k = len(ntc_box.borders)
    demand_vec = np.array([float(demand[z]) for z in zones])
    M = network.zone_membership_matrix()

    # variables: x offers, e_plus (k), e_minus (k), gsc zonal (ns*nz)
    no = len(offers)
    n_var = no + 2 * k + ns * nz
    o_ep, o_em, o_g = no, no + k, no + 2 * k

    def pco_row(j):
        row = np.zeros(n_var)
        for bdx, (z1, z2) in enumerate(ntc_box.borders):
            if zi[z1] == j:
                row[o_ep + bdx] += 1.0
                row[o_em + bdx] -= 1.0
            if zi[z2] == j:
                row[o_ep + bdx] -= 1.0
                row[o_em + bdx] += 1.0
        return row

    A_eq, b_eq, A_in, b_in = [], [], [], []
    balance_rows = []
    for j, z in enumerate(zones):  # sum offers - Pco = demand
        row = -pco_row(j)
        for q, o in enumerate(offers):
            if o.zone == z:
                row[q] = 1.0
        balance_rows.append(len(A_eq))
        A_eq.append(row)
        b_eq.append(demand_vec[j])
    for s, sc in enumerate(scenarios):
        D_z = sc.zonal_totals(network)
        for j in range(nz):
            # Pco_z <= gsc_z - D_z
            row = pco_row(j)
            row[o_g + s * nz + j] = -1.0
            A_in.append(row)
            b_in.append(-float(D_z[j]))
            # gsc_z <= cleared zonal capacity
            row = np.zeros(n_var)
            row[o_g + s * nz + j] = 1.0
            for q, o in enumerate(offers):
                if zi[o.zone] == j:
                    row[q] = -1.0
            A_in.append(row)
            b_in.append(0.0)
    if caps is not None:
        for j, z in enumerate(zones):
            row = np.zeros(n_var)
            for q, o in enumerate(offers):
                if o.zone == z:
                    row[q] = 1.0
            A_in.append(row)
            b_in.append(float(caps[z]))

    lb = np.zeros(n_var)
    ub = np.full(n_var, np.inf)
    ub[:no] = [max(o.quantity_mw, 0.0) for o in offers]
    ub[o_ep:o_ep + k] = ntc_box.atc_plus
    ub[o_em:o_em + k] = ntc_box.atc_minus
    c = np.zeros(n_var)
    c[:no] = [o.price for o in offers]
    res = linprog(c, A_ub=np.array(A_in), b_ub=np.array(b_in),
                  A_eq=np.array(A_eq), b_eq=np.array(b_eq),
                  bounds=list(zip(lb, np.where(np.isinf(ub), None, ub))),
                  method="highs")
    if not res.success:
        raise InfeasibleClearingError(
            f"NTC capacity clearing infeasible: {res.message}")
    duals = np.array([res.eqlin.marginals[i] for i in balance_rows])
    x = res.x
    pco = np.array([float(pco_row(j) @ x) for j in range(nz)])
    exchanges = {}
    for bdx, border in enumerate(ntc_box.borders):
        exchanges[border] = float(x[o_ep + bdx] - x[o_em + bdx])
    gsc_z = x[o_g:].reshape(ns, nz)
    S = network.share_vector()
    gsc_nodal = np.array([S * (M.T @ gsc_z[s]) for s in range(ns)])
    zonal_cleared = M.T @ (demand_vec + pco)
    ycmr = S * zonal_cleared
    return _assemble_outcome(network, None, scenarios, offers,
                             x[:no], demand_vec, duals, pco, ycmr, gsc_nodal,
                             exchanges=exchanges)


def clear_capacity_market_nocbp(offers, demand, zonal_caps=None) -> CapacityMarketOutcome:
    """Purely zonal capacity auction: merit order on offer prices."""
    offers = list(offers)
    zones = tuple(sorted(demand))
    prices = np.zeros(len(zones))
    cleared = [0.0] * len(offers)
    for j, z in enumerate(zones):
        need = float(demand[z])
        if need < 0:
            raise ClearingError(f"negative capacity demand in zone {z}")
        pool = sorted((k for k, o in enumerate(offers) if o.zone == z),
                      key=lambda k: (offers[k].price, offers[k].gen_id))
        available = sum(offers[k].quantity_mw for k in pool)
        cap = float(zonal_caps[z]) if zonal_caps and z in zonal_caps else np.inf
        if need > min(available, cap) + 1e-6:
            raise InfeasibleClearingError(
                f"capacity demand {need:.0f} MW in zone {z} exceeds offered "
                f"potential {min(available, cap):.0f} MW")
        remaining = need
        price = 0.0
        for k in pool:
            if remaining <= 1e-12:
                break
            take = min(offers[k].quantity_mw, remaining)
            cleared[k] = take
            remaining -= take
            price = offers[k].price
        prices[j] = price if need > 1e-12 else 0.0
    zonal_cleared = np.array([sum(cleared[k] for k, o in enumerate(offers)
                                  if o.zone == z) for z in zones])
    return CapacityMarketOutcome(
        zones=zones, prices=prices,
        zonal_demand=np.array([float(demand[z]) for z in zones]),
        cleared_offers={o.gen_id: float(c) for o, c in zip(offers, cleared)},
        zonal_cleared=zonal_cleared,
        net_obligation=np.zeros(len(zones)),
    )


def export_witness_csv(outcome: CapacityMarketOutcome, network: Network, path) -> None:
    """Audit dump of scarcity witnesses: nodal rows then line rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record", "scenario", "location", "dispatch_mw",
                    "injection_mw", "flow_mw"])
        for s, sid in enumerate(outcome.scenario_ids):
            for k, node in enumerate(network.nodes):
                w.writerow(["node", sid, node,
                            repr(float(outcome.scarcity_dispatch[s, k])),
                            repr(float(outcome.scarcity_injections[s, k])), ""])
            for l, line in enumerate(network.lines):
                w.writerow(["line", sid, line.id, "", "",
                            repr(float(outcome.scarcity_flows[s, l]))])
