"""Centralized welfare-maximization oracle.

Solves each market design as a single convex program over all agents'
decisions and extracts prices from the clearing-constraint duals. Serves
as the independent cross-check of the decentralized equilibrium: for
convex markets the competitive equilibrium and the welfare maximum
coincide. Built on cvxpy; an order of magnitude slower than the
equilibrium path is acceptable here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .market_clearing import (
    build_scarcity_scenarios,
    compute_capacity_demand,
    fbmc_deliverability_blocks,
)
from .participants import ConsumerDecision, GeneratorDecision

logger = logging.getLogger(__name__)

__all__ = ["WelfareSolution", "solve_welfare_max", "compare_solutions"]

_SOLVER_ORDER = ("CLARABEL", "CVXOPT", "SCS")


@dataclass
class WelfareSolution:
    design: str
    generators: dict
    consumers: dict
    energy_prices: np.ndarray       # zones x steps
    net_positions: np.ndarray
    capacity_prices: np.ndarray | None
    net_obligation: np.ndarray | None
    welfare: float
    generation_cost: float
    investment_cost: float
    ens_cost: float
    meta: dict = field(default_factory=dict)

    @property
    def total_system_cost(self) -> float:
        return self.generation_cost + self.investment_cost + self.ens_cost


def _solve(problem: cp.Problem):
    last = None
    for name in _SOLVER_ORDER:
        if name not in cp.installed_solvers():
            continue
        try:
            problem.solve(solver=name)
        except (cp.SolverError, Exception) as exc:  # noqa: BLE001
            last = exc
            continue
        if problem.status in ("optimal", "optimal_inaccurate"):
            if problem.status == "optimal_inaccurate":
                logger.warning("welfare solve only reached %s with %s",
                               problem.status, name)
            return name
    raise RuntimeError(f"welfare optimization failed: status="
                       f"{problem.status!r}, last error: {last}")


def solve_welfare_max(scenario, data, *, fbmc_outcome=None,
                      ntc_box=None) -> WelfareSolution:
    """Global welfare maximum of one market design with clearing duals.

    Unserved inelastic demand is valued at the price cap inside the
    allocation (the value consumers can express in a capped market) and at
    the true willingness to pay in the reported cost of unserved energy.
    """
    design = scenario.design
    cap = float(scenario.price_cap)
    net = data.network
    zones = net.zones
    nz = len(zones)
    nn = len(net.nodes)
    T = data.grid.n_steps
    W = data.grid.weights
    zi = net.zone_index
    techs = list(data.techs)
    ng = len(techs)
    R = data.renewable_infeed
    M = net.zone_membership_matrix()
    S = net.share_vector()
    H = data.ptdf.entries
    F = net.f_max_vector()
    has_cm = design in ("CM-NoCBP", "CM-FBMC", "CM-NTC", "CM-Implicit")
    cm_trades = design in ("CM-FBMC", "CM-NTC")

    g = cp.Variable((ng, T), nonneg=True)
    y = cp.Variable(ng)
    e = cp.Variable((nz, T), nonneg=True)
    i = cp.Variable((nz, T), nonneg=True)
    NP = cp.Variable((nz, T))
    ghat = cp.Variable((nn, T), nonneg=True)

    cons = [y >= np.array([t.existing for t in techs])]
    af = np.vstack([t.availability_profile(T) for t in techs])
    cons.append(g <= cp.multiply(af, cp.reshape(y, (ng, 1), order="C") @
                                 np.ones((1, T))))

    ecap = np.vstack([c.elastic_share * c.ref_demand for c in data.consumers])
    icap = np.vstack([(1 - c.elastic_share) * c.ref_demand
                      for c in data.consumers])
    wtp = np.array([c.wtp for c in data.consumers])
    vcap = np.minimum(wtp, cap)
    cons += [e <= ecap, i <= icap]

    zone_gens = {j: [k for k, t in enumerate(techs) if zi[t.zone] == j]
                 for j in range(nz)}
    balance = []
    for j in range(nz):
        total_g = cp.sum(g[zone_gens[j], :], axis=0) if zone_gens[j] else 0
        balance.append(total_g + R[j] - e[j] - i[j] - NP[j] == 0)
    cons += balance
    for j in range(nz):  # nodal witness aggregation
        cons.append(M[j] @ ghat - NP[j] == e[j] + i[j] - R[j])
    cons.append(cp.sum(NP, axis=0) == 0)
    smap = (M * S[None, :]).T
    dnodal = smap @ (e + i - R)
    flows = H @ (ghat - dnodal)
    cons += [flows <= F[:, None] @ np.ones((1, T)),
             flows >= -F[:, None] @ np.ones((1, T))]

    utility = 0
    quad = wtp[:, None] / (2.0 * np.maximum(ecap, 1e-9))
    for j in range(nz):
        utility += cp.sum(cp.multiply(W, vcap[j] * i[j] + wtp[j] * e[j]
                                      - cp.multiply(quad[j], cp.square(e[j]))))
    gen_cost = 0
    for k, t in enumerate(techs):
        gen_cost += cp.sum(cp.multiply(W, 0.5 * t.a_quad * cp.square(g[k])
                                       + t.b_lin * g[k]))
    inv_cost = cp.sum(cp.multiply(
        np.array([t.capex for t in techs]),
        y - np.array([t.existing for t in techs])))

    cm_balance = None
    ycm = None
    pco_expr = None
    scenarios = []
    dcm_vec = np.zeros(nz)
    extra_vars = {}
    if has_cm:
        base_demand = compute_capacity_demand(
            "CM-NoCBP", data.profiles, eps=scenario.elastic_share,
            wtp=scenario.wtp, price_cap=cap)
        scenarios = build_scarcity_scenarios(
            base_demand, net,
            simultaneous_share=scenario.scarcity_simultaneous_share,
            self_share=scenario.scarcity_zonal_self,
            other_share=scenario.scarcity_zonal_other)
        if design == "CM-Implicit":
            if fbmc_outcome is None:
                raise ValueError("CM-Implicit requires the CM-FBMC outcome")
            demand = compute_capacity_demand(
                design, data.profiles, eps=scenario.elastic_share,
                wtp=scenario.wtp, price_cap=cap, fbmc_result=fbmc_outcome,
                network=net)
        else:
            demand = base_demand
        dcm_vec = np.array([demand[z] for z in zones])
        ycm = cp.Variable(ng, nonneg=True)
        cons.append(ycm <= y)
        if design == "CM-FBMC":
            offs, (A_eq, b_eq), (A_in, b_in), (lb, ub) = \
                fbmc_deliverability_blocks(net, data.ptdf, scenarios)
            wvec = cp.Variable(offs["n_var"])
            cons += [np.array(A_eq) @ wvec == np.array(b_eq),
                     np.array(A_in) @ wvec <= np.array(b_in),
                     wvec[offs["ycmr"]:] >= 0]
            pco_expr = wvec[offs["pco"]:offs["pco"] + nz]
            for j in range(nz):  # nodal allocation covers cleared volume
                cons.append(M[j] @ wvec[offs["ycmr"]:offs["ycmr"] + nn]
                            == dcm_vec[j] + pco_expr[j])
            extra_vars["wvec"] = wvec
            extra_vars["offs"] = offs
        elif design == "CM-NTC":
            if ntc_box is None:
                raise ValueError("CM-NTC requires a precomputed NTC box")
            k = len(ntc_box.borders)
            ep = cp.Variable(k, nonneg=True)
            em = cp.Variable(k, nonneg=True)
            cons += [ep <= ntc_box.atc_plus, em <= ntc_box.atc_minus]
            Tmap = np.zeros((nz, 2 * k))
            for bdx, (z1, z2) in enumerate(ntc_box.borders):
                Tmap[zi[z1], bdx] += 1.0
                Tmap[zi[z2], bdx] -= 1.0
                Tmap[zi[z1], k + bdx] -= 1.0
                Tmap[zi[z2], k + bdx] += 1.0
            pco_expr = Tmap @ cp.hstack([ep, em])
            gsc_z = cp.Variable((len(scenarios), nz), nonneg=True)
            for s, sc in enumerate(scenarios):
                D_z = sc.zonal_totals(net)
                for j in range(nz):
                    cons.append(pco_expr[j] <= gsc_z[s, j] - D_z[j])
                    zone_sum = cp.sum(ycm[zone_gens[j]]) if zone_gens[j] else 0
                    cons.append(gsc_z[s, j] <= zone_sum)
            extra_vars["exchanges"] = (ep, em)
        else:
            pco_expr = np.zeros(nz)
        cm_balance = []
        for j in range(nz):
            zone_sum = cp.sum(ycm[zone_gens[j]]) if zone_gens[j] else 0
            if cm_trades:
                cm_balance.append(zone_sum - pco_expr[j] == dcm_vec[j])
            else:
                cm_balance.append(zone_sum == dcm_vec[j])
        cons += cm_balance

    problem = cp.Problem(cp.Maximize(utility - gen_cost - inv_cost), cons)
    solver = _solve(problem)

    lam = np.zeros((nz, T))
    for j in range(nz):
        lam[j] = -np.asarray(balance[j].dual_value).ravel() / W
    lam = np.clip(lam, 0.0, cap)
    lam_cm = None
    pco_val = None
    if has_cm:
        lam_cm = np.array([float(np.abs(np.asarray(c.dual_value)))
                           for c in cm_balance])
        pco_val = (np.asarray(pco_expr.value).ravel()
                   if cm_trades else np.zeros(nz))

    gens = {}
    for k, t in enumerate(techs):
        gens[t.id] = GeneratorDecision(
            dispatch=np.maximum(np.asarray(g.value)[k], 0.0),
            capacity=float(y.value[k]),
            cm_offer=float(ycm.value[k]) if ycm is not None else 0.0)
    consumers = {}
    ens_cost = 0.0
    for j, z in enumerate(zones):
        ev = np.clip(np.asarray(e.value)[j], 0.0, ecap[j])
        iv = np.clip(np.asarray(i.value)[j], 0.0, icap[j])
        ens = icap[j] - iv
        consumers[z] = ConsumerDecision(demand=ev + iv, elastic=ev,
                                        inelastic=iv, ens=ens)
        ens_cost += float(np.sum(W * data.consumers[j].wtp * ens))

    return WelfareSolution(
        design=design, generators=gens, consumers=consumers,
        energy_prices=lam, net_positions=np.asarray(NP.value),
        capacity_prices=lam_cm, net_obligation=pco_val,
        welfare=float(problem.value),
        generation_cost=float(gen_cost.value),
        investment_cost=float(inv_cost.value),
        ens_cost=ens_cost,
        meta={"solver": solver, "capacity_demand": dict(zip(zones, dcm_vec)),
              "scenarios": scenarios})


def compare_solutions(eq, wf: WelfareSolution) -> dict:
    """Max relative gaps per variable class between the two solution paths."""
    gaps = {}

    def rel(a, b, floor):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        scale = max(float(np.max(np.abs(b), initial=0.0)), floor)
        return float(np.max(np.abs(a - b), initial=0.0)) / scale

    disp_eq = np.vstack([eq.generators[k].dispatch for k in sorted(eq.generators)])
    disp_wf = np.vstack([wf.generators[k].dispatch for k in sorted(wf.generators)])
    gaps["dispatch"] = rel(disp_eq, disp_wf, 1.0)
    inv_eq = np.array([eq.generators[k].capacity for k in sorted(eq.generators)])
    inv_wf = np.array([wf.generators[k].capacity for k in sorted(wf.generators)])
    gaps["investment"] = rel(inv_eq, inv_wf, 1.0)
    gaps["prices"] = rel(eq.energy.prices, wf.energy_prices, 1.0)
    gaps["net_positions"] = rel(eq.energy.net_positions, wf.net_positions, 1.0)
    dem_eq = np.vstack([eq.consumers[z].demand for z in sorted(eq.consumers)])
    dem_wf = np.vstack([wf.consumers[z].demand for z in sorted(wf.consumers)])
    gaps["demand"] = rel(dem_eq, dem_wf, 1.0)
    if eq.capacity is not None and wf.capacity_prices is not None:
        gaps["capacity_prices"] = rel(eq.capacity.prices, wf.capacity_prices, 1.0)
        gaps["net_obligation"] = rel(eq.capacity.net_obligation,
                                     wf.net_obligation, 1.0)
    return gaps
