"""Command line interface.

Exit codes: 0 converged and verified, 2 solved but not converged (or not
verified), 1 error.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .equilibrium import ADMMConfig
from .reporting import emit_outputs, load_run
from .runner import (
    BATCH_ORDER,
    derive_ntc_box,
    load_fbmc_artifact,
    resolve_case,
    run_batch,
    run_design,
    verify_solution,
)
from .scenario_io import ScenarioConfig, data_root

logger = logging.getLogger(__name__)


def _admm_config(scenario: ScenarioConfig | None, seed, max_iter, rho):
    base = scenario.admm_config() if scenario is not None else ADMMConfig()
    kwargs = dict(
        rho=rho if rho is not None else base.rho,
        rho_cm=base.rho_cm,
        primal_tol=base.primal_tol,
        dual_tol=base.dual_tol,
        max_iter=max_iter if max_iter is not None else base.max_iter,
        sweep=base.sweep,
        seed=seed if seed is not None else base.seed,
    )
    return ADMMConfig(**kwargs)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="verbose logging")
def main(verbose):
    """Long-run equilibrium simulator for coupled energy/capacity markets."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")


run_options = [
    click.option("--seed", type=int, default=None, help="random seed override"),
    click.option("--max-iter", type=int, default=None,
                 help="iteration limit override"),
    click.option("--rho", type=float, default=None,
                 help="penalty weight override"),
]


def _apply(opts):
    def deco(fn):
        for opt in reversed(opts):
            fn = opt(fn)
        return fn
    return deco


@main.command("run")
@click.option("--scenario", "scenario_path", required=True,
              type=click.Path(exists=True), help="scenario JSON file")
@click.option("--out", "out_dir", required=True, type=click.Path(),
              help="output directory")
@_apply(run_options)
def run_cmd(scenario_path, out_dir, seed, max_iter, rho):
    """Solve one market-design scenario and emit its outputs."""
    try:
        scenario = ScenarioConfig.load(scenario_path)
        scenario.require_fbmc_artifact()
        cfg = _admm_config(scenario, seed, max_iter, rho)
        data = resolve_case(scenario.data_dir or data_root(), seed=cfg.seed)
        fbmc_solution = None
        if scenario.design in ("CM-NTC", "CM-Implicit"):
            fbmc_solution, _, _ = load_fbmc_artifact(scenario.fbmc_run)
        result = run_design(scenario, data, cfg, fbmc_solution=fbmc_solution)
        emit_outputs(result.report, result.solution, out_dir,
                     data=data, scenario=scenario)
        _echo_result(result)
        sys.exit(0 if (result.solution.converged and result.verified) else 2)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@main.command("batch")
@click.option("--all-designs", is_flag=True, required=True,
              help="run the six designs in dependency order")
@click.option("--data", "data_dir", type=click.Path(), default=None,
              help="data root (defaults to CAPMKT_DATA_DIR or synthetic)")
@click.option("--out", "out_dir", required=True, type=click.Path())
@_apply(run_options)
def batch_cmd(all_designs, data_dir, out_dir, seed, max_iter, rho):
    """Run all six market designs and emit per-design outputs."""
    try:
        seed = seed if seed is not None else 0
        cfg = _admm_config(None, seed, max_iter, rho)
        data = resolve_case(data_dir if data_dir else data_root(), seed=seed)
        results = run_batch(data, out_dir, cfg, seed=seed)
        ok = True
        for design in BATCH_ORDER:
            result = results[design]
            _echo_result(result)
            ok = ok and result.solution.converged and result.verified
        sys.exit(0 if ok else 2)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@main.command("ntc-domain")
@click.option("--fbmc", "fbmc_path", required=True, type=click.Path(exists=True),
              help="CM-FBMC run.json artifact")
@click.option("--out", "out_path", required=True, type=click.Path())
def ntc_domain_cmd(fbmc_path, out_path):
    """Extract the maximal NTC box from a flow-based run artifact."""
    try:
        solution, data, _ = load_fbmc_artifact(fbmc_path)
        box = derive_ntc_box(solution, data)
        payload = {"borders": [list(b) for b in box.borders],
                   "atc_plus_mw": [float(v) for v in box.atc_plus],
                   "atc_minus_mw": [float(v) for v in box.atc_minus]}
        with open(out_path, "w") as fh:
            json.dump(payload, fh, indent=1)
        click.echo(f"NTC box written to {out_path}")
        for b, p, m in zip(box.borders, box.atc_plus, box.atc_minus):
            click.echo(f"  {b[0]}->{b[1]}: +{p:.1f} / -{m:.1f} MW")
        sys.exit(0)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@main.command("verify")
@click.option("--run", "run_path", required=True, type=click.Path(exists=True),
              help="run.json artifact")
def verify_cmd(run_path):
    """Re-run equilibrium and deliverability checks on a stored run."""
    try:
        solution, data, _ = load_run(run_path)
        deviation, deliverable = verify_solution(solution, data)
        click.echo(f"design: {solution.design} converged: {solution.converged}")
        click.echo(f"max relative improvement: "
                   f"{deviation.max_relative_improvement:.3e} "
                   f"(tolerance {deviation.tolerance})")
        click.echo(f"deliverability: {'ok' if deliverable else 'VIOLATED'}")
        ok = solution.converged and deviation.ok and deliverable
        sys.exit(0 if ok else 2)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


def _echo_result(result):
    rep = result.report
    dev = result.deviation.max_relative_improvement if result.deviation else float("nan")
    click.echo(
        f"{rep.design}: converged={result.solution.converged} "
        f"iters={result.solution.iterations} "
        f"total={rep.total_cost_meur:.1f} MEUR "
        f"ens={sum(rep.ens_gwh.values()):.4f} GWh "
        f"max_deviation={dev:.2e} verified={result.verified}")


if __name__ == "__main__":
    main()
