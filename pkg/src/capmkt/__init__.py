"""Long-run equilibrium simulator for coupled electricity energy and
capacity markets under six market designs, including flow-based coupling
of capacity markets."""

from .equilibrium import (
    ADMMConfig,
    EquilibriumSolution,
    check_no_profitable_deviation,
    price_update,
    solve_equilibrium,
)
from .market_clearing import (
    CapacityMarketOutcome,
    EnergyMarketOutcome,
    ScarcityScenario,
    build_scarcity_scenarios,
    clear_capacity_market_fbmc,
    clear_capacity_market_nocbp,
    clear_capacity_market_ntc,
    clear_energy_market_step,
    compute_capacity_demand,
)
from .network import (
    Line,
    Network,
    NTCBox,
    PTDFMatrix,
    build_ptdf,
    compute_dc_flows,
    compute_max_ntc_box,
    exact_projection_feasible,
)
from .participants import (
    ConsumerBlock,
    GeneratorDecision,
    GeneratorTech,
    TimeGrid,
    consumer_best_response,
    generator_best_response,
)
from .qp import solve_qp
from .reporting import RunReport, compute_metrics, emit_outputs
from .runner import run_batch, run_design
from .scenario_io import (
    CaseData,
    ProfileSet,
    ScenarioConfig,
    build_case,
    calibrate_demand,
    load_profiles,
    synthesize_case_study,
)
from .welfare import WelfareSolution, compare_solutions, solve_welfare_max

__version__ = "0.1.0"

__all__ = [
    "ADMMConfig", "EquilibriumSolution", "check_no_profitable_deviation",
    "price_update", "solve_equilibrium", "CapacityMarketOutcome",
    "EnergyMarketOutcome", "ScarcityScenario", "build_scarcity_scenarios",
    "clear_capacity_market_fbmc", "clear_capacity_market_nocbp",
    "clear_capacity_market_ntc", "clear_energy_market_step",
    "compute_capacity_demand", "Line", "Network", "NTCBox", "PTDFMatrix",
    "build_ptdf", "compute_dc_flows", "compute_max_ntc_box",
    "exact_projection_feasible", "ConsumerBlock", "GeneratorDecision",
    "GeneratorTech", "TimeGrid", "consumer_best_response",
    "generator_best_response", "solve_qp", "RunReport", "compute_metrics",
    "emit_outputs", "run_batch", "run_design", "CaseData", "ProfileSet",
    "ScenarioConfig", "build_case", "calibrate_demand", "load_profiles",
    "synthesize_case_study", "WelfareSolution", "compare_solutions",
    "solve_welfare_max",
]
