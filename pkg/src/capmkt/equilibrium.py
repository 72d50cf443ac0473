"""Equilibrium computation by penalized best-response iteration.

The competitive equilibrium of generators, consumers, the energy market
operator and the capacity market operator is the fixed point of their
coupled optimality conditions. It is computed with an alternating
direction method: each agent solves its subproblem augmented with a
quadratic penalty on the market imbalances it contributes to, then prices
take a projected subgradient step on the imbalances. Energy prices live in
[0, price cap]; capacity prices are nonnegative.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .market_clearing import (
    CapacityMarketOutcome,
    EnergyMarketOutcome,
    build_scarcity_scenarios,
    compute_capacity_demand,
    fbmc_deliverability_blocks,
)
from .participants import (
    AdmmTerms,
    GeneratorDecision,
    consumer_best_response,
    generator_best_response,
)
from .qp import QPInfeasibleError, solve_qp  # noqa: F401  (re-exported kernel)

logger = logging.getLogger(__name__)

__all__ = [
    "ADMMConfig",
    "EquilibriumSolution",
    "OscillationError",
    "price_update",
    "solve_qp",
    "solve_equilibrium",
    "check_no_profitable_deviation",
    "DeviationReport",
    "residual_history_csv",
]

_ANCHOR_WEIGHT = 1e-6  # relative weight tying degenerate witnesses to demand shares


class OscillationError(Exception):
    """Residuals stopped improving; suggests a penalty-weight rescale."""


@dataclass
class ADMMConfig:
    """Coordinator parameters.

    ``rho`` is the hourly energy-price step per MW of zonal imbalance; the
    capacity-market step ``rho_cm`` defaults to a scale-matched multiple.
    Residual balancing doubles or halves the steps when primal and dual
    residuals drift apart by more than a factor of ten.
    """

    rho: float = 0.1
    rho_cm: float | None = None
    primal_tol: float = 1e-6
    dual_tol: float = 1e-6
    max_iter: int = 20_000
    sweep: str = "gauss-seidel"
    seed: int = 0
    rescale: bool = True
    rescale_every: int = 25
    stall_window: int = 500

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.primal_tol <= 0 or self.dual_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.sweep not in ("gauss-seidel", "jacobi"):
            raise ValueError(f"unknown sweep style {self.sweep!r}")


@dataclass
class EquilibriumSolution:
    design: str
    generators: dict
    consumers: dict
    energy: EnergyMarketOutcome
    capacity: CapacityMarketOutcome | None
    scenarios: list
    residual_history: list
    converged: bool
    iterations: int
    price_cap: float
    capacity_demand: dict | None = None
    meta: dict = field(default_factory=dict)


def price_update(prices, imbalance, rho, caps):
    """Projected dual ascent: clamp(prices + rho * excess demand, 0, caps)."""
    caps_arr = np.asarray(caps, dtype=float)
    if np.any(caps_arr <= 0):
        raise ValueError("price caps must be positive")
    return np.clip(np.asarray(prices, dtype=float) + rho * np.asarray(imbalance,
                   dtype=float), 0.0, caps_arr)


# ---------------------------------------------------------------------------
# operator subproblems
# ---------------------------------------------------------------------------

class _EnergyOperator:
    """Per-step net-position choice inside the network transfer domain.

    The subproblem constrains net positions by network deliverability only
    (balanced nonnegative witness dispatch within thermal limits). Zonal
    capacity adequacy is the generators' side of the balance; restating it
    here would force the operator to serve any bid demand regardless of
    price and admits spurious fixed points with price wedges across
    uncongested borders. At any balanced fixed point the witness satisfies
    the capacity bounds automatically.
    """

    def __init__(self, data):
        net = data.network
        self.nz = len(net.zones)
        self.nn = len(net.nodes)
        self.M = net.zone_membership_matrix()
        self.S = net.share_vector()
        self.H = data.ptdf.entries
        self.F = net.f_max_vector()
        nv = self.nz + self.nn
        self.nv = nv
        # anchor map: ghat_n ~ share_n * (NP + dnet) of its zone
        self.C = (self.M * self.S[None, :]).T  # nodes x zones
        self.A_eq = np.zeros((self.nz + 1, nv))
        self.A_eq[:self.nz, :self.nz] = -np.eye(self.nz)
        self.A_eq[:self.nz, self.nz:] = self.M
        self.A_eq[self.nz, :self.nz] = 1.0
        nl = self.H.shape[0]
        self.A_in = np.zeros((2 * nl, nv))
        self.A_in[:nl, self.nz:] = self.H
        self.A_in[nl:, self.nz:] = -self.H
        self.lb = np.concatenate([np.full(self.nz, -np.inf), np.zeros(self.nn)])
        self.warm = {}

    def solve(self, t, lam, surplus, dnet_z, rho):
        nu = _ANCHOR_WEIGHT * rho
        dnodal = self.S * (self.M.T @ dnet_z)
        P = np.zeros((self.nv, self.nv))
        P[:self.nz, :self.nz] = rho * np.eye(self.nz) + nu * (self.C.T @ self.C)
        P[:self.nz, self.nz:] = -nu * self.C.T
        P[self.nz:, :self.nz] = -nu * self.C
        P[self.nz:, self.nz:] = nu * np.eye(self.nn)
        q = np.zeros(self.nv)
        q[:self.nz] = lam - rho * surplus + nu * (self.C.T @ dnodal)
        q[self.nz:] = -nu * dnodal
        b_eq = np.concatenate([dnet_z, [0.0]])
        nl = self.H.shape[0]
        b_in = np.concatenate([self.F + self.H @ dnodal,
                               self.F - self.H @ dnodal])
        try:
            res = solve_qp(P, q, lb=self.lb, A_eq=self.A_eq, b_eq=b_eq,
                           A_in=self.A_in, b_in=b_in, warm_active=self.warm.get(t))
        except QPInfeasibleError:
            # pathological renewable excess: keep the previous position
            return None
        self.warm[t] = res.active_set
        np_z = res.x[:self.nz]
        ghat = res.x[self.nz:]
        flows = self.H @ (ghat - dnodal)
        return np_z, ghat, flows

    def deviation_value(self, lam, dnet_z):
        """Best attainable hourly trade value -sum(lam * NP) over the domain."""
        c = np.zeros(self.nv)
        c[:self.nz] = lam
        dnodal = self.S * (self.M.T @ dnet_z)
        b_in = np.concatenate([self.F + self.H @ dnodal,
                               self.F - self.H @ dnodal])
        bounds = [(None, None)] * self.nz + [(0, None)] * self.nn
        res = linprog(c, A_ub=self.A_in, b_ub=b_in, A_eq=self.A_eq,
                      b_eq=np.concatenate([dnet_z, [0.0]]), bounds=bounds,
                      method="highs")
        if not res.success:
            return None
        return -float(res.fun)


class _CapacityOperatorFBMC:
    """Annual obligation-trade choice with flow-based deliverability."""

    def __init__(self, data, scenarios, dcm_vec):
        net = data.network
        self.nz = len(net.zones)
        self.nn = len(net.nodes)
        self.M = net.zone_membership_matrix()
        self.S = net.share_vector()
        self.dcm = dcm_vec
        offs, (A_eq, b_eq), (A_in, b_in), (lb, ub) = fbmc_deliverability_blocks(
            net, data.ptdf, scenarios)
        self.o = offs
        nv = offs["n_var"]
        for j in range(self.nz):  # nodal allocation covers cleared volume
            row = np.zeros(nv)
            row[offs["ycmr"]:offs["ycmr"] + self.nn] = self.M[j]
            row[offs["pco"] + j] = -1.0
            A_eq.append(row)
            b_eq.append(dcm_vec[j])
        self.A_eq = np.array(A_eq)
        self.b_eq = np.array(b_eq)
        self.A_in = np.array(A_in)
        self.b_in = np.array(b_in)
        self.lb = lb
        self.ub = ub
        self.ns = len(scenarios)
        self.D = np.array([sc.nodal_capacity_demand for sc in scenarios])
        self.warm = None

    def _quadratic(self, rho_cm, lam_cm, surplus):
        nv = self.o["n_var"]
        nu = _ANCHOR_WEIGHT * rho_cm
        P = np.zeros((nv, nv))
        q = np.zeros(nv)
        op, oy, og = self.o["pco"], self.o["ycmr"], self.o["gsc"]
        P[op:op + self.nz, op:op + self.nz] = rho_cm * np.eye(self.nz)
        q[op:op + self.nz] = lam_cm - rho_cm * surplus
        # anchors: ycmr ~ share * (dcm + Pco); gsc ~ D + share * Pco
        Cy = (self.M * self.S[None, :]).T
        blk = nu * (Cy.T @ Cy)
        P[op:op + self.nz, op:op + self.nz] += blk * (1 + self.ns)
        P[oy:oy + self.nn, oy:oy + self.nn] = nu * np.eye(self.nn)
        P[op:op + self.nz, oy:oy + self.nn] = -nu * Cy.T
        P[oy:oy + self.nn, op:op + self.nz] = -nu * Cy
        c0 = self.S * (self.M.T @ self.dcm)
        q[op:op + self.nz] += nu * (Cy.T @ c0)
        q[oy:oy + self.nn] = -nu * c0
        for s in range(self.ns):
            ofs = og + s * self.nn
            P[ofs:ofs + self.nn, ofs:ofs + self.nn] = nu * np.eye(self.nn)
            P[op:op + self.nz, ofs:ofs + self.nn] = -nu * Cy.T
            P[ofs:ofs + self.nn, op:op + self.nz] = -nu * Cy
            q[ofs:ofs + self.nn] = -nu * self.D[s]
            q[op:op + self.nz] += nu * (Cy.T @ self.D[s])
        return P, q

    def solve(self, lam_cm, surplus, rho_cm):
        P, q = self._quadratic(rho_cm, lam_cm, surplus)
        res = solve_qp(P, q, lb=self.lb, ub=self.ub, A_eq=self.A_eq,
                       b_eq=self.b_eq, A_in=self.A_in, b_in=self.b_in,
                       warm_active=self.warm)
        self.warm = res.active_set
        op, oy, og = self.o["pco"], self.o["ycmr"], self.o["gsc"]
        pco = res.x[op:op + self.nz]
        ycmr = res.x[oy:oy + self.nn]
        gsc = res.x[og:].reshape(self.ns, self.nn)
        return pco, ycmr, gsc

    def deviation_value(self, lam_cm):
        nv = self.o["n_var"]
        c = np.zeros(nv)
        c[self.o["pco"]:self.o["pco"] + self.nz] = lam_cm
        bounds = list(zip(self.lb, np.where(np.isinf(self.ub), None, self.ub)))
        res = linprog(c, A_ub=self.A_in, b_ub=self.b_in, A_eq=self.A_eq,
                      b_eq=self.b_eq, bounds=bounds, method="highs")
        if not res.success:
            return None
        return -float(res.fun)


class _CapacityOperatorNTC:
    """Annual obligation trade inside an NTC box, zonal deliverability."""

    def __init__(self, data, scenarios, dcm_vec, box):
        net = data.network
        self.net = net
        self.nz = len(net.zones)
        self.box = box
        self.k = len(box.borders)
        self.ns = len(scenarios)
        self.dcm = dcm_vec
        zi = net.zone_index
        self.D_z = np.array([sc.zonal_totals(net) for sc in scenarios])
        # variables: e_plus (k), e_minus (k), gsc_z (ns*nz)
        nv = 2 * self.k + self.ns * self.nz
        self.nv = nv
        T = np.zeros((self.nz, 2 * self.k))  # Pco = T @ [e+; e-]
        for bdx, (z1, z2) in enumerate(box.borders):
            T[zi[z1], bdx] += 1.0
            T[zi[z2], bdx] -= 1.0
            T[zi[z1], self.k + bdx] -= 1.0
            T[zi[z2], self.k + bdx] += 1.0
        self.T = T
        A_in, b_in = [], []
        for s in range(self.ns):
            og = 2 * self.k + s * self.nz
            for j in range(self.nz):
                row = np.zeros(nv)  # Pco_z <= gsc_z - D_z
                row[:2 * self.k] = T[j]
                row[og + j] = -1.0
                A_in.append(row)
                b_in.append(-float(self.D_z[s, j]))
                row = np.zeros(nv)  # gsc_z <= dcm_z + Pco_z
                row[og + j] = 1.0
                row[:2 * self.k] = -T[j]
                A_in.append(row)
                b_in.append(float(dcm_vec[j]))
        self.A_in = np.array(A_in)
        self.b_in = np.array(b_in)
        self.lb = np.zeros(nv)
        self.ub = np.concatenate([box.atc_plus, box.atc_minus,
                                  np.full(self.ns * self.nz, np.inf)])
        self.warm = None

    def solve(self, lam_cm, surplus, rho_cm):
        nu = _ANCHOR_WEIGHT * rho_cm
        P = nu * np.eye(self.nv)
        P[:2 * self.k, :2 * self.k] += rho_cm * (self.T.T @ self.T)
        q = np.zeros(self.nv)
        q[:2 * self.k] = self.T.T @ (lam_cm - rho_cm * surplus)
        for s in range(self.ns):
            og = 2 * self.k + s * self.nz
            q[og:og + self.nz] = -nu * self.D_z[s]
        res = solve_qp(P, q, lb=self.lb, ub=self.ub, A_in=self.A_in,
                       b_in=self.b_in, warm_active=self.warm)
        self.warm = res.active_set
        e = res.x[:2 * self.k]
        pco = self.T @ e
        gsc_z = res.x[2 * self.k:].reshape(self.ns, self.nz)
        exchanges = {b: float(e[i] - e[self.k + i])
                     for i, b in enumerate(self.box.borders)}
        return pco, gsc_z, exchanges

    def deviation_value(self, lam_cm):
        c = np.zeros(self.nv)
        c[:2 * self.k] = self.T.T @ lam_cm
        bounds = list(zip(self.lb, np.where(np.isinf(self.ub), None, self.ub)))
        res = linprog(c, A_ub=self.A_in, b_ub=self.b_in, bounds=bounds,
                      method="highs")
        if not res.success:
            return None
        return -float(res.fun)


# ---------------------------------------------------------------------------
# coordinator
# ---------------------------------------------------------------------------

def solve_equilibrium(scenario, data, cfg: ADMMConfig | None = None, *,
                      fbmc_outcome=None, ntc_box=None) -> EquilibriumSolution:
    """Compute the competitive equilibrium of one market design.

    ``scenario`` selects the design and price cap, ``data`` carries the
    network, technologies and profiles. CM-NTC requires ``ntc_box`` and
    CM-Implicit requires ``fbmc_outcome`` (the prerequisite flow-based
    solution).
    """
    cfg = cfg or ADMMConfig()
    design = scenario.design
    cap = float(scenario.price_cap)
    net = data.network
    zones = net.zones
    nz = len(zones)
    T = data.grid.n_steps
    W = data.grid.weights
    zi = net.zone_index
    techs = list(data.techs)
    tech_zone = np.array([zi[t.zone] for t in techs])
    R = data.renewable_infeed

    has_cm = design in ("CM-NoCBP", "CM-FBMC", "CM-NTC", "CM-Implicit")
    cm_trades = design in ("CM-FBMC", "CM-NTC")

    if data.consumers and (
            abs(data.consumers[0].elastic_share - scenario.elastic_share) > 1e-12
            or abs(data.consumers[0].wtp - scenario.wtp) > 1e-9):
        logger.warning(
            "scenario consumer parameters (eps=%.4g, wtp=%.6g) differ from the "
            "case data (eps=%.4g, wtp=%.6g); the scenario values drive the "
            "capacity demand", scenario.elastic_share, scenario.wtp,
            data.consumers[0].elastic_share, data.consumers[0].wtp)

    dcm_vec = np.zeros(nz)
    scenarios = []
    cm_op = None
    capacity_demand = None
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
            capacity_demand = compute_capacity_demand(
                design, data.profiles, eps=scenario.elastic_share,
                wtp=scenario.wtp, price_cap=cap, fbmc_result=fbmc_outcome,
                network=net)
        else:
            capacity_demand = base_demand
        dcm_vec = np.array([capacity_demand[z] for z in zones])
        if design == "CM-FBMC":
            cm_op = _CapacityOperatorFBMC(data, scenarios, dcm_vec)
        elif design == "CM-NTC":
            if ntc_box is None:
                raise ValueError("CM-NTC requires a precomputed NTC box")
            cm_op = _CapacityOperatorNTC(data, scenarios, dcm_vec, box=ntc_box)

    # consumers bid their inelastic value up to the price cap
    consumers = []
    for blk in data.consumers:
        c = type(blk)(zone=blk.zone, ref_demand=blk.ref_demand,
                      elastic_share=blk.elastic_share, wtp=blk.wtp,
                      bid_cap=min(cap, blk.wtp))
        consumers.append(c)
    cons_by_zone = {c.zone: c for c in consumers}

    # state
    b_min = min(t.b_lin for t in techs)
    lam = np.full((nz, T), b_min)
    lam_cm = np.zeros(nz)
    if has_cm:
        for j, z in enumerate(zones):
            zone_capex = [t.capex for t in techs if t.zone == z]
            lam_cm[j] = min(zone_capex) if zone_capex else 0.0
    g = np.zeros((len(techs), T))
    y = np.array([t.existing for t in techs], dtype=float)
    ycm = np.zeros(len(techs))
    d = np.zeros((nz, T))
    cons_dec = {}
    for j, z in enumerate(zones):
        dec = consumer_best_response(cons_by_zone[z], data.grid, lam[j])
        cons_dec[z] = dec
        d[j] = dec.demand
    np_z = np.zeros((nz, T))
    pco = np.zeros(nz)
    exchanges = None
    ycmr_last = np.zeros(len(net.nodes))
    gsc_last = np.zeros((len(scenarios), len(net.nodes))) if scenarios else None
    gsc_z_last = np.zeros((len(scenarios), nz)) if scenarios else None

    E = np.zeros((nz, T))
    for j in range(nz):
        E[j] = R[j] - d[j]
    Ecm = -dcm_vec.copy() if has_cm else np.zeros(nz)

    energy_op = _EnergyOperator(data)
    rho = cfg.rho
    rho_cm = cfg.rho_cm if cfg.rho_cm is not None else cfg.rho * 40.0
    peak = max(data.system_peak(), 1.0)
    cm_scale = max(float(dcm_vec.sum()), peak, 1.0)

    gen_warm = [None] * len(techs)
    ghat_latest = np.zeros((len(net.nodes), T))
    flows_latest = np.zeros((len(net.lines), T))
    history = []
    best_primal = np.inf
    best_iter = 0
    converged = False
    it = 0

    y_zonal = np.zeros(nz)

    jacobi = cfg.sweep == "jacobi"
    relax = 0.5  # damping of simultaneous sweeps; sequential sweeps need none

    for it in range(1, cfg.max_iter + 1):
        E_ref = E.copy() if jacobi else E
        Ecm_ref = Ecm.copy() if jacobi else Ecm
        if jacobi:
            g0, y0, ycm0 = g.copy(), y.copy(), ycm.copy()
            d0, np0, pco0 = d.copy(), np_z.copy(), pco.copy()
        max_change = 0.0

        # generators
        for k, tech in enumerate(techs):
            j = tech_zone[k]
            anchor = g[k] - E_ref[j]
            terms = AdmmTerms(rho_energy=rho, energy_anchor=anchor,
                              rho_capacity=rho_cm if has_cm else 0.0,
                              capacity_anchor=(ycm[k] - Ecm_ref[j]) if has_cm else 0.0)
            dec = generator_best_response(
                tech, data.grid, lam[j], cm_price=lam_cm[j] if has_cm else None,
                admm_terms=terms, warm_active=gen_warm[k])
            gen_warm[k] = dec.meta.get("active_set")
            dg = dec.dispatch - g[k]
            E[j] += dg
            max_change = max(max_change, float(np.max(np.abs(dg))),
                             abs(dec.capacity - y[k]),
                             abs(dec.cm_offer - ycm[k]))
            if has_cm:
                Ecm[j] += dec.cm_offer - ycm[k]
            g[k] = dec.dispatch
            y[k] = dec.capacity
            ycm[k] = dec.cm_offer

        # consumers
        for j, z in enumerate(zones):
            anchor = d[j] + E_ref[j]
            terms = AdmmTerms(rho_energy=rho, energy_anchor=anchor)
            dec = consumer_best_response(cons_by_zone[z], data.grid, lam[j], terms)
            dd = dec.demand - d[j]
            E[j] -= dd
            max_change = max(max_change, float(np.max(np.abs(dd))))
            d[j] = dec.demand
            cons_dec[z] = dec

        # energy market operator, independently per step
        for t in range(T):
            surplus = E_ref[:, t] + np_z[:, t] if jacobi else E[:, t] + np_z[:, t]
            dnet = d[:, t] - R[:, t]
            step = energy_op.solve(t, lam[:, t], surplus, dnet, rho)
            if step is None:
                continue
            new_np, ghat, fl = step
            E[:, t] = (E[:, t] + np_z[:, t]) - new_np
            max_change = max(max_change, float(np.max(np.abs(new_np - np_z[:, t]))))
            np_z[:, t] = new_np
            ghat_latest[:, t] = ghat
            flows_latest[:, t] = fl

        # capacity market operator
        if cm_trades and cm_op is not None:
            surplus_cm = Ecm_ref + pco if jacobi else Ecm + pco
            if design == "CM-FBMC":
                new_pco, ycmr_last, gsc_last = cm_op.solve(lam_cm, surplus_cm, rho_cm)
            else:
                new_pco, gsc_z_last, exchanges = cm_op.solve(lam_cm, surplus_cm,
                                                             rho_cm)
            Ecm = (Ecm + pco) - new_pco
            max_change = max(max_change, float(np.max(np.abs(new_pco - pco))))
            pco = new_pco

        if jacobi:
            # damp the simultaneous sweep and rebuild residuals
            g = g0 + relax * (g - g0)
            y = y0 + relax * (y - y0)
            ycm = ycm0 + relax * (ycm - ycm0)
            d = d0 + relax * (d - d0)
            np_z = np0 + relax * (np_z - np0)
            pco = pco0 + relax * (pco - pco0)
            for j, z in enumerate(zones):
                E[j] = R[j] - d[j] - np_z[j]
                Ecm[j] = -pco[j] - dcm_vec[j] if has_cm else 0.0
            for k in range(len(techs)):
                E[tech_zone[k]] += g[k]
                if has_cm:
                    Ecm[tech_zone[k]] += ycm[k]
            max_change *= relax

        # price updates (imbalance = excess demand = -E)
        lam = price_update(lam, -E, rho, cap)
        if has_cm:
            lam_cm = price_update(lam_cm, -Ecm, rho_cm, np.inf)

        primal_e = float(np.max(np.abs(E))) / peak
        primal_cm = float(np.max(np.abs(Ecm))) / cm_scale if has_cm else 0.0
        primal = max(primal_e, primal_cm)
        dual = max_change / peak
        history.append({"iteration": it, "primal_energy": primal_e,
                        "primal_capacity": primal_cm, "dual": dual,
                        "rho": rho, "rho_cm": rho_cm})

        if primal < best_primal * (1 - 1e-3):
            best_primal = primal
            best_iter = it
        elif primal < best_primal:
            best_primal = primal
        if primal <= cfg.primal_tol and dual <= cfg.dual_tol:
            converged = True
            break
        if cfg.rescale and it % cfg.rescale_every == 0:
            if primal_e > 10 * dual:
                rho = min(rho * 2.0, cfg.rho * 1e4)
            elif dual > 10 * primal_e:
                rho = max(rho / 2.0, cfg.rho * 1e-4)
            if has_cm:
                base_cm = cfg.rho_cm if cfg.rho_cm is not None else cfg.rho * 40.0
                if primal_cm > 10 * dual:
                    rho_cm = min(rho_cm * 2.0, base_cm * 1e4)
                elif dual > 10 * primal_cm:
                    rho_cm = max(rho_cm / 2.0, base_cm * 1e-4)
        if (it - best_iter) >= cfg.stall_window and \
                best_primal > 100 * cfg.primal_tol:
            raise OscillationError(
                f"primal residual stopped improving for {cfg.stall_window} "
                f"iterations (best {best_primal:.3e} at iteration {best_iter}); "
                "consider rescaling rho")

    # assemble outcome
    for j in range(nz):
        y_zonal[j] = float(np.sum(y[tech_zone == j]))
    S = net.share_vector()
    M = net.zone_membership_matrix()
    dnet_all = d - R
    nodal_demand = (S[:, None]) * (M.T @ dnet_all)
    nodal_caps = S * (M.T @ y_zonal)
    energy = EnergyMarketOutcome(
        zones=zones, line_ids=tuple(l.id for l in net.lines),
        node_ids=net.nodes, prices=lam.copy(), net_positions=np_z.copy(),
        flows=flows_latest.copy(), nodal_dispatch=ghat_latest.copy(),
        nodal_injections=ghat_latest - nodal_demand,
        nodal_demand=nodal_demand, nodal_caps=nodal_caps, price_cap=cap)

    capacity = None
    if has_cm:
        ns = len(scenarios)
        zonal_cleared_now = np.array(
            [float(np.sum(ycm[tech_zone == j])) for j in range(nz)])
        if design == "CM-FBMC" and cm_op is not None:
            ycmr = ycmr_last
            gsc = gsc_last
        elif design == "CM-NTC" and cm_op is not None:
            gsc = np.array([S * (M.T @ gsc_z_last[s]) for s in range(ns)])
            ycmr = S * (M.T @ (dcm_vec + pco))
        else:
            ycmr = S * (M.T @ zonal_cleared_now)
            gsc = np.array([np.minimum(sc.nodal_capacity_demand, ycmr)
                            for sc in scenarios])
        inj = np.array([gsc[s] - scenarios[s].nodal_capacity_demand
                        for s in range(ns)])
        flows_sc = np.array([data.ptdf.entries @ inj[s] for s in range(ns)]) \
            if design == "CM-FBMC" else np.zeros((ns, len(net.lines)))
        capacity = CapacityMarketOutcome(
            zones=zones, prices=lam_cm.copy(), zonal_demand=dcm_vec.copy(),
            cleared_offers={techs[k].id: float(ycm[k]) for k in range(len(techs))},
            zonal_cleared=zonal_cleared_now,
            net_obligation=np.asarray(pco, dtype=float).copy(),
            scenario_ids=tuple(sc.id for sc in scenarios),
            scarcity_dispatch=gsc, scarcity_injections=inj,
            scarcity_flows=flows_sc, nodal_allocation=np.asarray(ycmr),
            bilateral_exchanges=exchanges)

    gens = {tech.id: GeneratorDecision(dispatch=g[k].copy(), capacity=float(y[k]),
                                       cm_offer=float(ycm[k]))
            for k, tech in enumerate(techs)}
    meta = {"rho_final": rho, "rho_cm_final": rho_cm, "seed": cfg.seed,
            "design": design}
    if ntc_box is not None:
        meta["ntc_box"] = ntc_box
    return EquilibriumSolution(
        design=design, generators=gens, consumers=dict(cons_dec), energy=energy,
        capacity=capacity, scenarios=scenarios, residual_history=history,
        converged=converged, iterations=it, price_cap=cap,
        capacity_demand=capacity_demand, meta=meta)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

@dataclass
class DeviationReport:
    improvements: dict
    max_relative_improvement: float
    tolerance: float = 1e-4

    @property
    def ok(self) -> bool:
        return self.max_relative_improvement <= self.tolerance


def _generator_utility(tech, grid, lam, dec, cm_price):
    W = grid.weights
    rev = float(np.sum(W * lam * dec.dispatch))
    var = float(np.sum(W * tech.variable_cost(dec.dispatch)))
    inv = tech.capex * (dec.capacity - tech.existing)
    cm = cm_price * dec.cm_offer
    return rev - var - inv + cm


def _consumer_utility(block, grid, lam, dec):
    W = grid.weights
    V = block.market_value
    quad = block.wtp / (2.0 * np.maximum(block.elastic_cap(), 1e-12))
    u = (V - lam) * dec.inelastic + (block.wtp - lam) * dec.elastic \
        - quad * dec.elastic ** 2
    return float(np.sum(W * u))


def check_no_profitable_deviation(solution: EquilibriumSolution, data,
                                  tolerance: float = 1e-4) -> DeviationReport:
    """Re-solve every agent's best response at the equilibrium prices.

    Reports the relative objective improvement available to each agent; the
    solution passes when no agent can improve by more than ``tolerance``
    relative to its objective scale.
    """
    net = data.network
    zones = net.zones
    zi = net.zone_index
    lam = solution.energy.prices
    has_cm = solution.capacity is not None
    lam_cm = solution.capacity.prices if has_cm else np.zeros(len(zones))
    improvements = {}
    peak = max(data.system_peak(), 1.0)

    # consumers bid at the capped value inside the market
    capped = {}
    for blk in data.consumers:
        capped[blk.zone] = type(blk)(
            zone=blk.zone, ref_demand=blk.ref_demand,
            elastic_share=blk.elastic_share, wtp=blk.wtp,
            bid_cap=min(solution.price_cap, blk.wtp))

    y_max = 5.0 * (peak + max(t.existing for t in data.techs))
    for tech in data.techs:
        j = zi[tech.zone]
        stored = solution.generators[tech.id]
        cmp_price = float(lam_cm[j]) if has_cm else None
        best = generator_best_response(tech, data.grid, lam[j],
                                       cm_price=cmp_price, y_max=y_max)
        u0 = _generator_utility(tech, data.grid, lam[j], stored,
                                cmp_price or 0.0)
        u1 = _generator_utility(tech, data.grid, lam[j], best, cmp_price or 0.0)
        improvements[tech.id] = (u1 - u0) / max(abs(u1), abs(u0), 1e4)

    for z in zones:
        blk = capped[z]
        stored = solution.consumers[z]
        best = consumer_best_response(blk, data.grid, lam[zi[z]])
        u0 = _consumer_utility(blk, data.grid, lam[zi[z]], stored)
        u1 = _consumer_utility(blk, data.grid, lam[zi[z]], best)
        improvements[f"consumer_{z}"] = (u1 - u0) / max(abs(u1), abs(u0), 1e4)

    # energy operator: hourly trade value against the best over the domain
    op = _EnergyOperator(data)
    W = data.grid.weights
    total0 = total1 = 0.0
    for t in range(data.grid.n_steps):
        dnet = np.array([solution.consumers[z].demand[t] for z in zones]) \
            - data.renewable_infeed[:, t]
        stored_val = -float(lam[:, t] @ solution.energy.net_positions[:, t])
        best_val = op.deviation_value(lam[:, t], dnet)
        if best_val is None:
            continue
        total0 += W[t] * stored_val
        total1 += W[t] * max(best_val, stored_val)
    improvements["energy_operator"] = (total1 - total0) / max(
        abs(total1), abs(total0), 1e4)

    if has_cm and solution.design in ("CM-FBMC", "CM-NTC"):
        dcm_vec = solution.capacity.zonal_demand
        if solution.design == "CM-FBMC":
            cop = _CapacityOperatorFBMC(data, solution.scenarios, dcm_vec)
        else:
            cop = _CapacityOperatorNTC(data, solution.scenarios, dcm_vec,
                                       box=solution.meta["ntc_box"])
        stored_val = -float(lam_cm @ solution.capacity.net_obligation)
        best_val = cop.deviation_value(lam_cm)
        if best_val is not None:
            improvements["capacity_operator"] = \
                (max(best_val, stored_val) - stored_val) / max(
                    abs(best_val), abs(stored_val), 1e4)

    worst = max(improvements.values()) if improvements else 0.0
    return DeviationReport(improvements=improvements,
                           max_relative_improvement=float(worst),
                           tolerance=tolerance)


def residual_history_csv(solution: EquilibriumSolution, path) -> None:
    """Write (iteration, market, primal, dual) convergence rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "market", "primal", "dual"])
        for rec in solution.residual_history:
            w.writerow([rec["iteration"], "energy",
                        repr(rec["primal_energy"]), repr(rec["dual"])])
            w.writerow([rec["iteration"], "capacity",
                        repr(rec["primal_capacity"]), repr(rec["dual"])])
