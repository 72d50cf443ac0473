"""Run orchestration: single designs, dependent designs and the full batch.

The six market designs have a dependency order: the flow-based capacity
market must be solved before the NTC design (its box is derived from the
flow-based investments) and before the implicit design (its capacity
demand nets out flow-based scarcity imports).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .equilibrium import (
    ADMMConfig,
    DeviationReport,
    check_no_profitable_deviation,
    solve_equilibrium,
)
from .network import NTCBox, compute_max_ntc_box, exact_projection_feasible
from .reporting import RunReport, compute_metrics, emit_outputs, load_run
from .scenario_io import (
    CaseData,
    ScenarioConfig,
    build_case,
    load_network_json,
    load_profiles,
    synthesize_case_study,
)

logger = logging.getLogger(__name__)

__all__ = ["RunResult", "BATCH_ORDER", "TABLE_CAPS", "resolve_case",
           "derive_ntc_box", "run_design", "run_batch", "verify_solution"]

BATCH_ORDER = ("EOM-ref", "EOM-cap", "CM-NoCBP", "CM-FBMC", "CM-NTC",
               "CM-Implicit")
TABLE_CAPS = {"EOM-ref": 20_000.0, "EOM-cap": 4_000.0, "CM-NoCBP": 4_000.0,
              "CM-FBMC": 4_000.0, "CM-NTC": 4_000.0, "CM-Implicit": 4_000.0}


@dataclass
class RunResult:
    scenario: ScenarioConfig
    solution: object
    report: RunReport
    deviation: DeviationReport | None
    verified: bool


def resolve_case(data_dir=None, seed: int = 0) -> CaseData:
    """Load profiles/network from a directory, or synthesize the case study."""
    if data_dir is not None:
        root = Path(data_dir)
        if (root / "demand.csv").exists() and (root / "network.json").exists():
            profiles = load_profiles(root)
            network = load_network_json(root / "network.json")
            return build_case(profiles, network)
        logger.info("data directory %s lacks demand.csv/network.json; "
                    "using the synthetic case study", root)
    from .scenario_io import SynthParams
    profiles, network = synthesize_case_study(SynthParams(seed=seed))
    return build_case(profiles, network)


def derive_ntc_box(fbmc_solution, data: CaseData) -> NTCBox:
    """NTC box extracted from a flow-based capacity-market solution."""
    if fbmc_solution.capacity is None or not fbmc_solution.scenarios:
        raise ValueError("NTC box derivation needs a capacity-market solution "
                         "with scarcity scenarios")
    return compute_max_ntc_box(
        data.network, data.ptdf, fbmc_solution.capacity.nodal_allocation,
        [sc.nodal_capacity_demand for sc in fbmc_solution.scenarios])


def run_design(scenario: ScenarioConfig, data: CaseData,
               cfg: ADMMConfig | None = None, *, fbmc_solution=None,
               ntc_box=None, baseline: RunReport | None = None,
               verify: bool = True) -> RunResult:
    """Solve one design, compute metrics and verify the fixed point."""
    kwargs = {}
    if scenario.design == "CM-NTC":
        if ntc_box is None:
            if fbmc_solution is None:
                raise ValueError("CM-NTC requires an FBMC solution or an NTC box")
            ntc_box = derive_ntc_box(fbmc_solution, data)
        kwargs["ntc_box"] = ntc_box
    if scenario.design == "CM-Implicit":
        if fbmc_solution is None:
            raise ValueError("CM-Implicit requires the CM-FBMC solution")
        kwargs["fbmc_outcome"] = fbmc_solution.capacity
    solution = solve_equilibrium(scenario, data, cfg, **kwargs)
    report = compute_metrics(solution, data, baseline=baseline)
    deviation = None
    verified = False
    if verify:
        deviation, deliverable = verify_solution(solution, data)
        verified = deviation.ok and deliverable and solution.converged
    return RunResult(scenario=scenario, solution=solution, report=report,
                     deviation=deviation, verified=verified)


def verify_solution(solution, data: CaseData):
    """No-profitable-deviation check plus deliverability re-checks."""
    deviation = check_no_profitable_deviation(solution, data)
    deliverable = True
    net = data.network
    fmax = net.f_max_vector()
    # stored energy witnesses respect every line limit at every step
    flows = solution.energy.flows
    if flows.size and bool(np.any(np.abs(flows) > fmax[:, None] + 1e-3)):
        deliverable = False
    if solution.capacity is not None and solution.design == "CM-FBMC":
        caps = solution.capacity.nodal_allocation
        for sc in solution.scenarios:
            res = exact_projection_feasible(
                net, data.ptdf, solution.capacity.net_obligation, caps,
                sc.nodal_capacity_demand)
            if not res.feasible:
                logger.warning("scenario %s failed the deliverability recheck",
                               sc.id)
                deliverable = False
    if solution.capacity is not None and solution.design == "CM-NTC":
        M = net.zone_membership_matrix()
        cleared = solution.capacity.zonal_cleared
        pco = solution.capacity.net_obligation
        for s, sc in enumerate(solution.scenarios):
            d_z = sc.zonal_totals(net)
            gsc_z = M @ solution.capacity.scarcity_dispatch[s]
            if np.any(pco - (gsc_z - d_z) > 1e-3) or \
                    np.any(gsc_z - cleared > 1e-3):
                deliverable = False
    return deviation, deliverable


def run_batch(data: CaseData, out_dir, cfg: ADMMConfig | None = None,
              seed: int = 0, designs=BATCH_ORDER, wtp: float = 20_000.0,
              emit: bool = True) -> dict:
    """Run the designs in dependency order; EOM-ref is the cost baseline."""
    out = Path(out_dir)
    results = {}
    baseline = None
    fbmc = None
    box = None
    for design in designs:
        scenario = ScenarioConfig(design=design, price_cap=TABLE_CAPS[design],
                                  wtp=wtp, seed=seed,
                                  fbmc_run="<in-batch>" if design in
                                  ("CM-NTC", "CM-Implicit") else None)
        result = run_design(scenario, data, cfg, fbmc_solution=fbmc,
                            ntc_box=box if design == "CM-NTC" else None,
                            baseline=baseline)
        results[design] = result
        if design == "EOM-ref":
            baseline = result.report
            result.report.increase_vs_baseline_pct = 0.0
        if design == "CM-FBMC":
            fbmc = result.solution
            box = derive_ntc_box(fbmc, data)
        if emit:
            emit_outputs(result.report, result.solution, out / design,
                         data=data, scenario=scenario)
        logger.info("%s: converged=%s iterations=%d total_cost=%.0f MEUR",
                    design, result.solution.converged,
                    result.solution.iterations, result.report.total_cost_meur)
    if emit:
        summary = {d: {"total_cost_meur": r.report.total_cost_meur,
                       "converged": bool(r.solution.converged),
                       "verified": bool(r.verified)}
                   for d, r in results.items()}
        with open(out / "batch_summary.json", "w") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
    return results


def load_fbmc_artifact(path):
    """Load a CM-FBMC run artifact for dependent designs."""
    solution, data, scenario = load_run(path)
    if solution.design != "CM-FBMC":
        raise ValueError(f"artifact at {path} is a {solution.design} run, "
                         "expected CM-FBMC")
    return solution, data, scenario
