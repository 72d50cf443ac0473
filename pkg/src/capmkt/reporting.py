"""Run metrics, machine-readable outputs and the run artifact.

Produces the system-cost, congestion-revenue, consumer-cost, trade and
capacity-mix tables of a solved design as plot-ready CSV files plus a
self-contained ``run.json`` from which a run can be re-verified. Floats
are serialized with ``repr`` so identical runs produce identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .market_clearing import CapacityMarketOutcome, EnergyMarketOutcome
from .network import Network, Line
from .participants import ConsumerDecision, GeneratorDecision
from .scenario_io import CaseData, ProfileSet, ScenarioConfig, build_case
from .equilibrium import EquilibriumSolution
from .market_clearing import ScarcityScenario

logger = logging.getLogger(__name__)

__all__ = ["RunReport", "compute_metrics", "emit_outputs", "save_run",
           "load_run"]


@dataclass
class RunReport:
    design: str
    converged: bool
    served_demand_gwh: float
    generation_cost_meur: float
    investment_cost_meur: float
    ens_cost_meur: float
    total_cost_meur: float
    increase_vs_baseline_pct: float | None
    congestion_energy_meur: float
    congestion_capacity_meur: float
    congestion_total_meur: float
    consumer_costs: dict          # zone -> {energy, capacity, ens, total} EUR/MWh
    net_capacity_trade_mw: dict   # zone -> net export of obligations
    capacity_prices: dict         # zone -> EUR/MW-year
    ens_gwh: dict                 # zone -> GWh/year
    capacity_mix_mw: dict         # (zone, tech) -> MW
    meta: dict = field(default_factory=dict)


def compute_metrics(solution: EquilibriumSolution, data: CaseData,
                    baseline: RunReport | None = None) -> RunReport:
    """Cost, revenue and trade metrics of one solved design.

    Energy congestion revenue is the operator's merchandising surplus
    -sum(price * net position); the capacity analogue uses obligation
    trades. Unserved energy is valued at the consumers' willingness to pay.
    A non-converged solution is reported with a prominent flag.
    """
    if not solution.converged:
        logger.warning("computing metrics of a NON-CONVERGED %s solution",
                       solution.design)
    net = data.network
    zones = net.zones
    W = data.grid.weights
    lam = solution.energy.prices
    R = data.renewable_infeed

    served = {}
    ens_gwh = {}
    ens_cost = 0.0
    cons_cost = {}
    for j, z in enumerate(zones):
        dec = solution.consumers[z]
        blk = data.consumers[j]
        served_mwh = float(np.sum(W * dec.demand))
        served[z] = served_mwh
        ens_mwh = float(np.sum(W * dec.ens))
        ens_gwh[z] = ens_mwh / 1e3
        zone_ens_cost = blk.wtp * ens_mwh
        ens_cost += zone_ens_cost
        energy_cost = float(np.sum(W * lam[j] * (dec.demand - R[j])))
        cap_price = float(solution.capacity.prices[j]) if solution.capacity \
            is not None else 0.0
        dcm = float(solution.capacity.zonal_demand[j]) if solution.capacity \
            is not None else 0.0
        capacity_cost = cap_price * dcm
        denom = max(served_mwh, 1e-9)
        cons_cost[z] = {
            "energy": energy_cost / denom,
            "capacity": capacity_cost / denom,
            "ens": zone_ens_cost / denom,
            "total": (energy_cost + capacity_cost + zone_ens_cost) / denom,
        }
    total_served = sum(served.values())
    sys_energy = sum(cons_cost[z]["energy"] * served[z] for z in zones)
    sys_cap = sum(cons_cost[z]["capacity"] * served[z] for z in zones)
    sys_ens = sum(cons_cost[z]["ens"] * served[z] for z in zones)
    denom = max(total_served, 1e-9)
    cons_cost["System"] = {
        "energy": sys_energy / denom,
        "capacity": sys_cap / denom,
        "ens": sys_ens / denom,
        "total": (sys_energy + sys_cap + sys_ens) / denom,
    }

    gen_cost = 0.0
    inv_cost = 0.0
    mix = {}
    for tech in data.techs:
        dec = solution.generators[tech.id]
        gen_cost += float(np.sum(W * tech.variable_cost(dec.dispatch)))
        inv_cost += tech.capex * (dec.capacity - tech.existing)
        mix[(tech.zone, tech.id)] = float(dec.capacity)

    cong_energy = float(np.sum(W * (-(lam * solution.energy.net_positions)
                                    .sum(axis=0))))
    if solution.capacity is not None:
        cong_capacity = -float(solution.capacity.prices
                               @ solution.capacity.net_obligation)
        trade = {z: float(solution.capacity.net_obligation[j])
                 for j, z in enumerate(zones)}
        cap_prices = {z: float(solution.capacity.prices[j])
                      for j, z in enumerate(zones)}
    else:
        cong_capacity = 0.0
        trade = {z: 0.0 for z in zones}
        cap_prices = {z: 0.0 for z in zones}

    total = gen_cost + inv_cost + ens_cost
    increase = None
    if baseline is not None and baseline.total_cost_meur > 0:
        increase = 100.0 * (total / 1e6 - baseline.total_cost_meur) \
            / baseline.total_cost_meur
    return RunReport(
        design=solution.design,
        converged=solution.converged,
        served_demand_gwh=total_served / 1e3,
        generation_cost_meur=gen_cost / 1e6,
        investment_cost_meur=inv_cost / 1e6,
        ens_cost_meur=ens_cost / 1e6,
        total_cost_meur=total / 1e6,
        increase_vs_baseline_pct=increase,
        congestion_energy_meur=cong_energy / 1e6,
        congestion_capacity_meur=cong_capacity / 1e6,
        congestion_total_meur=(cong_energy + cong_capacity) / 1e6,
        consumer_costs=cons_cost,
        net_capacity_trade_mw=trade,
        capacity_prices=cap_prices,
        ens_gwh=ens_gwh,
        capacity_mix_mw=mix,
        meta={"iterations": solution.iterations,
              "served_by_zone_gwh": {z: served[z] / 1e3 for z in zones}},
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _arr(a):
    return np.asarray(a, dtype=float).tolist()


def save_run(path, solution: EquilibriumSolution, data: CaseData,
             scenario: ScenarioConfig, report: RunReport | None = None) -> None:
    """Write a self-contained run artifact (inputs + solution + metrics)."""
    net = data.network
    payload = {
        "schema": "capmkt-run-1",
        "scenario": scenario.to_json(),
        "network": {
            "nodes": list(net.nodes),
            "lines": [{"from": l.from_node, "to": l.to_node,
                       "susceptance": l.susceptance, "f_max_mw": l.f_max_mw}
                      for l in net.lines],
            "zones": list(net.zones),
            "node_zone": dict(net.node_zone),
            "demand_share": dict(net.demand_share),
        },
        "grid_weights": _arr(data.grid.weights),
        "techs": [{"id": t.id, "zone": t.zone, "a_quad": t.a_quad,
                   "b_lin": t.b_lin, "capex": t.capex, "existing": t.existing,
                   "availability": _arr(t.availability_profile(data.grid.n_steps))}
                  for t in data.techs],
        "consumers": [{"zone": c.zone, "elastic_share": c.elastic_share,
                       "wtp": c.wtp, "ref_demand": _arr(c.ref_demand)}
                      for c in data.consumers],
        "profiles": {
            "zones": list(data.profiles.zones),
            "demand": {z: _arr(v) for z, v in data.profiles.demand.items()},
            "availability": {f"{t}|{z}": _arr(v) for (t, z), v
                             in data.profiles.availability.items()},
            "renewable_caps": {f"{t}|{z}": float(v) for (t, z), v
                               in data.profiles.renewable_caps.items()},
        },
        "solution": {
            "design": solution.design,
            "converged": bool(solution.converged),
            "iterations": int(solution.iterations),
            "price_cap": solution.price_cap,
            "generators": {k: {"dispatch": _arr(v.dispatch),
                               "capacity": float(v.capacity),
                               "cm_offer": float(v.cm_offer)}
                           for k, v in solution.generators.items()},
            "consumers": {z: {"demand": _arr(v.demand), "elastic": _arr(v.elastic),
                              "inelastic": _arr(v.inelastic), "ens": _arr(v.ens)}
                          for z, v in solution.consumers.items()},
            "energy": {
                "prices": _arr(solution.energy.prices),
                "net_positions": _arr(solution.energy.net_positions),
                "flows": _arr(solution.energy.flows),
                "nodal_dispatch": _arr(solution.energy.nodal_dispatch),
                "nodal_injections": _arr(solution.energy.nodal_injections),
                "nodal_demand": _arr(solution.energy.nodal_demand),
                "nodal_caps": _arr(solution.energy.nodal_caps),
            },
            "residual_history": solution.residual_history,
        },
    }
    if solution.capacity is not None:
        cap = solution.capacity
        payload["solution"]["capacity"] = {
            "prices": _arr(cap.prices),
            "zonal_demand": _arr(cap.zonal_demand),
            "cleared_offers": {k: float(v) for k, v in cap.cleared_offers.items()},
            "zonal_cleared": _arr(cap.zonal_cleared),
            "net_obligation": _arr(cap.net_obligation),
            "scenario_ids": list(cap.scenario_ids),
            "scarcity_dispatch": _arr(cap.scarcity_dispatch),
            "scarcity_injections": _arr(cap.scarcity_injections),
            "scarcity_flows": _arr(cap.scarcity_flows),
            "nodal_allocation": _arr(cap.nodal_allocation),
            "bilateral_exchanges": {f"{a}|{b}": float(v) for (a, b), v
                                    in (cap.bilateral_exchanges or {}).items()},
        }
        payload["scenarios"] = [
            {"id": sc.id, "nodal_capacity_demand": _arr(sc.nodal_capacity_demand),
             "description": sc.description} for sc in solution.scenarios]
    if report is not None:
        payload["metrics"] = report_to_json(report)
    if "ntc_box" in solution.meta:
        box = solution.meta["ntc_box"]
        payload["ntc_box"] = {"borders": [list(b) for b in box.borders],
                              "atc_plus": _arr(box.atc_plus),
                              "atc_minus": _arr(box.atc_minus)}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def load_run(path):
    """Rebuild (solution, data, scenario) from a run artifact."""
    with open(path) as fh:
        payload = json.load(fh)
    scenario = ScenarioConfig.from_json(payload["scenario"])
    netp = payload["network"]
    network = Network(
        nodes=tuple(netp["nodes"]),
        lines=tuple(Line(l["from"], l["to"], float(l["susceptance"]),
                         float(l["f_max_mw"])) for l in netp["lines"]),
        zones=tuple(netp["zones"]),
        node_zone=dict(netp["node_zone"]),
        demand_share={k: float(v) for k, v in netp["demand_share"].items()})
    prof = payload["profiles"]
    profiles = ProfileSet(
        zones=tuple(prof["zones"]),
        demand={z: np.array(v) for z, v in prof["demand"].items()},
        availability={tuple(k.split("|")): np.array(v)
                      for k, v in prof["availability"].items()},
        renewable_caps={tuple(k.split("|")): float(v)
                        for k, v in prof["renewable_caps"].items()},
        weights=np.array(payload["grid_weights"]))
    from .participants import GeneratorTech
    techs = [GeneratorTech(id=t["id"], zone=t["zone"], a_quad=t["a_quad"],
                           b_lin=t["b_lin"], capex=t["capex"],
                           existing=t["existing"],
                           availability=np.array(t["availability"]))
             for t in payload["techs"]]
    cons0 = payload["consumers"][0]
    data = build_case(profiles, network, eps=cons0["elastic_share"],
                      wtp=cons0["wtp"], techs=techs)

    solp = payload["solution"]
    gens = {k: GeneratorDecision(dispatch=np.array(v["dispatch"]),
                                 capacity=v["capacity"], cm_offer=v["cm_offer"])
            for k, v in solp["generators"].items()}
    consumers = {z: ConsumerDecision(demand=np.array(v["demand"]),
                                     elastic=np.array(v["elastic"]),
                                     inelastic=np.array(v["inelastic"]),
                                     ens=np.array(v["ens"]))
                 for z, v in solp["consumers"].items()}
    en = solp["energy"]
    energy = EnergyMarketOutcome(
        zones=network.zones, line_ids=tuple(l.id for l in network.lines),
        node_ids=network.nodes, prices=np.array(en["prices"]),
        net_positions=np.array(en["net_positions"]), flows=np.array(en["flows"]),
        nodal_dispatch=np.array(en["nodal_dispatch"]),
        nodal_injections=np.array(en["nodal_injections"]),
        nodal_demand=np.array(en["nodal_demand"]),
        nodal_caps=np.array(en["nodal_caps"]), price_cap=solp["price_cap"])
    capacity = None
    scenarios = []
    if "capacity" in solp:
        cp = solp["capacity"]
        capacity = CapacityMarketOutcome(
            zones=network.zones, prices=np.array(cp["prices"]),
            zonal_demand=np.array(cp["zonal_demand"]),
            cleared_offers=dict(cp["cleared_offers"]),
            zonal_cleared=np.array(cp["zonal_cleared"]),
            net_obligation=np.array(cp["net_obligation"]),
            scenario_ids=tuple(cp["scenario_ids"]),
            scarcity_dispatch=np.array(cp["scarcity_dispatch"]),
            scarcity_injections=np.array(cp["scarcity_injections"]),
            scarcity_flows=np.array(cp["scarcity_flows"]),
            nodal_allocation=np.array(cp["nodal_allocation"]),
            bilateral_exchanges={tuple(k.split("|")): float(v) for k, v
                                 in cp["bilateral_exchanges"].items()} or None)
        scenarios = [ScarcityScenario(
            id=s["id"], nodal_capacity_demand=np.array(s["nodal_capacity_demand"]),
            description=s["description"]) for s in payload.get("scenarios", [])]
    solution = EquilibriumSolution(
        design=solp["design"], generators=gens, consumers=consumers,
        energy=energy, capacity=capacity, scenarios=scenarios,
        residual_history=solp.get("residual_history", []),
        converged=solp["converged"], iterations=solp["iterations"],
        price_cap=solp["price_cap"],
        meta={"from_artifact": str(path)})
    if "ntc_box" in payload:
        from .network import NTCBox
        bx = payload["ntc_box"]
        solution.meta["ntc_box"] = NTCBox(
            tuple(tuple(b) for b in bx["borders"]),
            np.array(bx["atc_plus"]), np.array(bx["atc_minus"]))
    return solution, data, scenario


def report_to_json(report: RunReport) -> dict:
    out = dict(report.__dict__)
    out["consumer_costs"] = {z: dict(v) for z, v in report.consumer_costs.items()}
    out["capacity_mix_mw"] = {f"{z}|{t}": v for (z, t), v
                              in report.capacity_mix_mw.items()}
    return out


# ---------------------------------------------------------------------------
# file emission
# ---------------------------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def emit_outputs(report: RunReport, solution: EquilibriumSolution, out_dir,
                 formats=("csv", "json"), data: CaseData | None = None,
                 scenario: ScenarioConfig | None = None) -> dict:
    """Write the report tables and run artifact; returns a checksum manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    if "csv" in formats:
        _write_csv(out / "system_costs.csv",
                   ["design", "converged", "served_demand_gwh",
                    "generation_cost_meur", "investment_cost_meur",
                    "ens_cost_meur", "total_cost_meur", "increase_pct"],
                   [[report.design, report.converged, report.served_demand_gwh,
                     report.generation_cost_meur, report.investment_cost_meur,
                     report.ens_cost_meur, report.total_cost_meur,
                     report.increase_vs_baseline_pct if
                     report.increase_vs_baseline_pct is not None else ""]])
        _write_csv(out / "congestion_rents.csv",
                   ["design", "energy_meur", "capacity_meur", "total_meur"],
                   [[report.design, report.congestion_energy_meur,
                     report.congestion_capacity_meur,
                     report.congestion_total_meur]])
        _write_csv(out / "consumer_costs.csv",
                   ["zone", "energy_eur_mwh", "capacity_eur_mwh",
                    "ens_eur_mwh", "total_eur_mwh"],
                   [[z, v["energy"], v["capacity"], v["ens"], v["total"]]
                    for z, v in report.consumer_costs.items()])
        _write_csv(out / "net_trade.csv",
                   ["zone", "net_obligation_export_mw", "capacity_price_eur_mw",
                    "ens_gwh"],
                   [[z, report.net_capacity_trade_mw[z],
                     report.capacity_prices[z], report.ens_gwh[z]]
                    for z in report.net_capacity_trade_mw])
        _write_csv(out / "capacity_mix.csv",
                   ["zone", "tech", "capacity_mw"],
                   [[z, t, v] for (z, t), v in sorted(report.capacity_mix_mw.items())])
        _write_csv(out / "residuals.csv",
                   ["iteration", "market", "primal", "dual"],
                   [row for rec in solution.residual_history for row in
                    ((rec["iteration"], "energy", rec["primal_energy"],
                      rec["dual"]),
                     (rec["iteration"], "capacity", rec["primal_capacity"],
                      rec["dual"]))])
        files += ["system_costs.csv", "congestion_rents.csv",
                  "consumer_costs.csv", "net_trade.csv", "capacity_mix.csv",
                  "residuals.csv"]
    if "json" in formats:
        if data is not None and scenario is not None:
            save_run(out / "run.json", solution, data, scenario, report)
        else:
            with open(out / "run.json", "w") as fh:
                json.dump({"metrics": report_to_json(report)}, fh, indent=1)
        files.append("run.json")

    manifest = {}
    for name in files:
        digest = hashlib.sha256((out / name).read_bytes()).hexdigest()
        manifest[name] = digest
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest
