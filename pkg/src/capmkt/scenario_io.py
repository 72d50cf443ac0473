"""Configuration, data ingestion and the synthetic case study.

File formats:

* ``demand.csv`` rows ``zone,timestep,demand_mw``
* ``availability.csv`` rows ``tech,zone,timestep,availability``
* ``renewables.csv`` rows ``tech,zone,capacity_mw`` (exogenous capacities)
* ``network.json`` with nodes, lines (from, to, susceptance, f_max_mw),
  zones, node_zone and demand shares
* scenario ``.json`` mirroring :class:`ScenarioConfig`

The environment variable ``CAPMKT_DATA_DIR`` supplies the default data
root. Floats are serialized with ``repr`` so a synthesize/save/load round
trip is bit identical.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .network import Line, Network, build_ptdf
from .participants import ConsumerBlock, GeneratorTech, TimeGrid

logger = logging.getLogger(__name__)

__all__ = [
    "DESIGNS",
    "ScenarioConfig",
    "ProfileSet",
    "SynthParams",
    "CaseData",
    "ProfileValidationError",
    "load_profiles",
    "save_profiles",
    "synthesize_case_study",
    "calibrate_demand",
    "load_network_json",
    "save_network_json",
    "default_thermal_techs",
    "build_case",
    "data_root",
]

DESIGNS = ("EOM-ref", "EOM-cap", "CM-NoCBP", "CM-FBMC", "CM-NTC", "CM-Implicit")
CM_DESIGNS = ("CM-NoCBP", "CM-FBMC", "CM-NTC", "CM-Implicit")
NEEDS_FBMC = ("CM-NTC", "CM-Implicit")

RENEWABLE_TECHS = ("solar", "wind")

# investment and operating cost parameters of the thermal technologies;
# peak units get more expensive from zone A to C
THERMAL_COSTS = {
    "base": dict(capex=190_000.0, a_quad=0.008, b_lin=20.0),
    "mid": dict(capex=110_000.0, a_quad=0.032, b_lin=55.0),
}
PEAK_COSTS = (
    dict(capex=60_000.0, a_quad=0.04, b_lin=90.0),
    dict(capex=70_000.0, a_quad=0.06, b_lin=90.0),
    dict(capex=80_000.0, a_quad=0.08, b_lin=90.0),
)


class ProfileValidationError(Exception):
    """Input files violated the documented schema; carries all violations."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def data_root(explicit=None) -> Path:
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get("CAPMKT_DATA_DIR", "."))


@dataclass
class ScenarioConfig:
    """One market-design run: design selector, caps, scarcity and data knobs."""

    design: str
    price_cap: float
    wtp: float = 20_000.0
    elastic_share: float = 0.2
    scarcity_simultaneous_share: float = 0.95
    scarcity_zonal_self: float = 1.0
    scarcity_zonal_other: float = 0.9
    weights: list | None = None
    data_dir: str | None = None
    seed: int = 0
    admm: dict = field(default_factory=dict)
    fbmc_run: str | None = None

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValueError(f"unknown market design {self.design!r}; "
                             f"expected one of {DESIGNS}")
        if self.price_cap <= 0:
            raise ValueError("price cap must be positive")
        if self.price_cap > self.wtp + 1e-9:
            raise ValueError("price cap cannot exceed the willingness to pay")

    @property
    def has_capacity_market(self) -> bool:
        return self.design in CM_DESIGNS

    def require_fbmc_artifact(self) -> None:
        if self.design in NEEDS_FBMC and not self.fbmc_run:
            raise ValueError(
                f"design {self.design} requires a prior CM-FBMC artifact "
                "(fbmc_run path)")

    def admm_config(self, **overrides):
        from .equilibrium import ADMMConfig
        kwargs = dict(self.admm)
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        kwargs.setdefault("seed", self.seed)
        return ADMMConfig(**kwargs)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "ScenarioConfig":
        return cls(**payload)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass
class ProfileSet:
    """Demand, renewable availability and capacities on a common time grid."""

    zones: tuple
    demand: dict
    availability: dict
    renewable_caps: dict
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.zones = tuple(self.zones)
        self.demand = {z: np.asarray(v, dtype=float) for z, v in self.demand.items()}
        self.availability = {k: np.asarray(v, dtype=float)
                             for k, v in self.availability.items()}
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
        self.validate()

    def validate(self):
        problems = []
        lengths = {len(v) for v in self.demand.values()}
        lengths |= {len(v) for v in self.availability.values()}
        if len(lengths) > 1:
            problems.append(f"timestep counts differ across series: {sorted(lengths)}")
        for z, v in self.demand.items():
            if np.any(v < 0):
                problems.append(f"negative demand in zone {z}")
        for (tech, z), v in self.availability.items():
            if np.any((v < 0) | (v > 1)):
                problems.append(f"availability outside [0,1] for {tech}/{z}")
        for key, cap in self.renewable_caps.items():
            if cap < 0:
                problems.append(f"negative renewable capacity for {key}")
        if problems:
            raise ProfileValidationError(problems)

    @property
    def n_steps(self) -> int:
        return len(next(iter(self.demand.values())))

    def demand_matrix(self) -> np.ndarray:
        return np.vstack([self.demand[z] for z in self.zones])

    def renewable_infeed(self) -> np.ndarray:
        """Zone-by-step renewable generation (MW)."""
        out = np.zeros((len(self.zones), self.n_steps))
        for (tech, zone), cap in self.renewable_caps.items():
            if zone not in self.zones:
                continue
            av = self.availability.get((tech, zone))
            if av is None:
                continue
            out[self.zones.index(zone)] += cap * av
        return out


def _parse_float(value, where, problems):
    try:
        return float(value)
    except (TypeError, ValueError):
        problems.append(f"non-numeric value {value!r} at {where}")
        return math.nan


def load_profiles(path) -> ProfileSet:
    """Read and validate demand/availability/renewables files from a directory."""
    root = Path(path)
    problems = []
    demand_rows = {}
    zones = []
    demand_path = root / "demand.csv"
    if not demand_path.exists():
        raise ProfileValidationError([f"missing file {demand_path}"])
    with open(demand_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["zone", "timestep", "demand_mw"]:
            problems.append(f"demand.csv header {reader.fieldnames} != "
                            "['zone', 'timestep', 'demand_mw']")
        for i, row in enumerate(reader, start=2):
            zone = row.get("zone", "")
            t = int(_parse_float(row.get("timestep"), f"demand.csv row {i}", problems))
            val = _parse_float(row.get("demand_mw"), f"demand.csv row {i}", problems)
            if (zone, t) in demand_rows:
                problems.append(f"duplicate (zone, timestep) key ({zone}, {t}) "
                                f"at demand.csv row {i}")
            demand_rows[(zone, t)] = val
            if zone not in zones:
                zones.append(zone)

    av_rows = {}
    av_path = root / "availability.csv"
    if av_path.exists():
        with open(av_path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["tech", "zone", "timestep", "availability"]:
                problems.append(f"availability.csv header {reader.fieldnames} != "
                                "['tech', 'zone', 'timestep', 'availability']")
            for i, row in enumerate(reader, start=2):
                key = (row.get("tech", ""), row.get("zone", ""),
                       int(_parse_float(row.get("timestep"), f"availability.csv row {i}",
                                        problems)))
                val = _parse_float(row.get("availability"), f"availability.csv row {i}",
                                   problems)
                if key in av_rows:
                    problems.append(f"duplicate (tech, zone, timestep) key {key} "
                                    f"at availability.csv row {i}")
                if not math.isnan(val) and not 0.0 <= val <= 1.0:
                    problems.append(f"availability {val} outside [0, 1] "
                                    f"at availability.csv row {i}")
                av_rows[key] = val

    caps = {}
    ren_path = root / "renewables.csv"
    if ren_path.exists():
        with open(ren_path, newline="") as fh:
            reader = csv.DictReader(fh)
            for i, row in enumerate(reader, start=2):
                caps[(row.get("tech", ""), row.get("zone", ""))] = _parse_float(
                    row.get("capacity_mw"), f"renewables.csv row {i}", problems)

    steps = sorted({t for (_, t) in demand_rows})
    if steps and steps != list(range(len(steps))):
        problems.append(f"timesteps are not contiguous from 0: {steps[:5]}...")
    for z in zones:
        missing = [t for t in steps if (z, t) not in demand_rows]
        if missing:
            problems.append(f"zone {z} missing timesteps {missing}")
    av_keys = sorted({(tech, z) for (tech, z, _) in av_rows})
    for tech, z in av_keys:
        missing = [t for t in steps if (tech, z, t) not in av_rows]
        if missing:
            problems.append(f"availability {tech}/{z} missing timesteps {missing}")
    if problems:
        raise ProfileValidationError(problems)

    demand = {z: np.array([demand_rows[(z, t)] for t in steps]) for z in zones}
    availability = {(tech, z): np.array([av_rows[(tech, z, t)] for t in steps])
                    for tech, z in av_keys}
    return ProfileSet(zones=tuple(zones), demand=demand, availability=availability,
                      renewable_caps=caps)


def save_profiles(profiles: ProfileSet, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "demand.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["zone", "timestep", "demand_mw"])
        for z in profiles.zones:
            for t, val in enumerate(profiles.demand[z]):
                w.writerow([z, t, repr(float(val))])
    with open(root / "availability.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tech", "zone", "timestep", "availability"])
        for (tech, z) in sorted(profiles.availability):
            for t, val in enumerate(profiles.availability[(tech, z)]):
                w.writerow([tech, z, t, repr(float(val))])
    with open(root / "renewables.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tech", "zone", "capacity_mw"])
        for (tech, z) in sorted(profiles.renewable_caps):
            w.writerow([tech, z, repr(float(profiles.renewable_caps[(tech, z)]))])


def load_network_json(path) -> Network:
    with open(path) as fh:
        payload = json.load(fh)
    lines = tuple(Line(l["from"], l["to"], float(l["susceptance"]),
                       float(l["f_max_mw"])) for l in payload["lines"])
    return Network(nodes=tuple(payload["nodes"]), lines=lines,
                   zones=tuple(payload["zones"]),
                   node_zone=dict(payload["node_zone"]),
                   demand_share={k: float(v) for k, v in payload["demand_share"].items()})


def save_network_json(network: Network, path) -> None:
    payload = {
        "nodes": list(network.nodes),
        "lines": [{"from": l.from_node, "to": l.to_node,
                   "susceptance": l.susceptance, "f_max_mw": l.f_max_mw}
                  for l in network.lines],
        "zones": list(network.zones),
        "node_zone": dict(network.node_zone),
        "demand_share": dict(network.demand_share),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


@dataclass
class SynthParams:
    """Knobs of the deterministic synthetic case-study generator."""

    seed: int = 0
    n_steps: int = 24
    peak_demands: dict = field(default_factory=lambda: {
        "A": 19_000.0, "B": 16_000.0, "C": 18_000.0})
    stress_hours: dict = field(default_factory=lambda: {"A": 18, "B": 19, "C": 20})
    stress_weight_h: float = 0.04
    neighbor_share: float = 0.9
    elastic_share: float = 0.2
    wtp: float = 20_000.0
    price_cap: float = 4_000.0
    renewable_caps: dict = field(default_factory=lambda: {
        ("solar", "A"): 15_400.0, ("wind", "A"): 13_700.0,
        ("solar", "B"): 8_800.0, ("wind", "B"): 5_300.0,
        ("solar", "C"): 18_700.0, ("wind", "C"): 8_300.0})
    solar_peak_availability: float = 0.35
    wind_mean_availability: float = 0.22
    wind_swing: float = 0.08
    stress_availability_cap: float = 0.10
    cross_border_fmax: float = 3_000.0
    intra_zonal_fmax: float = 500.0


def _case_network(params: SynthParams) -> Network:
    return Network(
        nodes=("n1", "n2", "n3", "n4"),
        lines=(
            Line("n1", "n2", 1.0, params.intra_zonal_fmax),
            Line("n1", "n3", 1.0, params.cross_border_fmax),
            Line("n2", "n4", 1.0, params.cross_border_fmax),
            Line("n3", "n4", 1.0, params.cross_border_fmax),
        ),
        zones=("A", "B", "C"),
        node_zone={"n1": "A", "n2": "A", "n3": "B", "n4": "C"},
        demand_share={"n1": 0.5, "n2": 0.5, "n3": 1.0, "n4": 1.0},
    )


# diurnal gross-demand shape as a fraction of the zonal peak (non-stress hours)
_DAY_SHAPE = np.array([
    0.60, 0.57, 0.55, 0.54, 0.54, 0.56, 0.61, 0.67, 0.71, 0.73, 0.74, 0.75,
    0.75, 0.74, 0.73, 0.73, 0.75, 0.78, 0.78, 0.78, 0.78, 0.71, 0.66, 0.62,
])


def synthesize_case_study(params: SynthParams | None = None):
    """Deterministic three-zone, four-node case study.

    Returns ``(ProfileSet, Network)``. Gross demand peaks hit the target
    peaks exactly at each zone's (non-coincident) stress hour; the three
    stress hours carry a small annual weight, representing rare scarcity
    conditions, and renewable availability is capped there. Demand at the
    other zones' stress hours is calibrated so residual demand at the price
    cap equals ``neighbor_share`` of the zone's own peak residual demand.
    """
    p = params or SynthParams()
    if p.n_steps != 24:
        raise ValueError("the synthetic generator produces a 24-step day")
    network = _case_network(p)
    zones = network.zones
    hours = np.arange(24)
    stress_steps = sorted(p.stress_hours.values())

    availability = {}
    for zone in zones:
        solar = np.where(
            (hours >= 6) & (hours <= 18),
            p.solar_peak_availability * np.sin(np.pi * (hours - 6) / 12.0) ** 2,
            0.0,
        )
        phase = {"A": 0.0, "B": 3.0, "C": 6.0}.get(zone, 0.0)
        wind = p.wind_mean_availability + p.wind_swing * np.cos(
            2 * np.pi * (hours - 2 - phase) / 24.0)
        solar = solar.copy()
        wind = wind.copy()
        for h in stress_steps:
            solar[h] = min(solar[h], p.stress_availability_cap)
            wind[h] = min(wind[h], p.stress_availability_cap)
        availability[("solar", zone)] = np.clip(solar, 0.0, 1.0)
        availability[("wind", zone)] = np.clip(wind, 0.0, 1.0)

    # elastic demand served at the price cap, as a fraction of reference demand
    cap_factor = (1.0 - p.elastic_share) + p.elastic_share * (1.0 - p.price_cap / p.wtp)

    demand = {}
    infeed = {z: sum(p.renewable_caps.get((tech, z), 0.0) * availability[(tech, z)]
                     for tech in RENEWABLE_TECHS) for z in zones}
    for zone in zones:
        peak = p.peak_demands[zone]
        own = p.stress_hours[zone]
        d = peak * _DAY_SHAPE.copy()
        d[own] = peak
        # own peak residual demand evaluated at the price cap
        dcm = cap_factor * peak - infeed[zone][own]
        for other_zone, h in p.stress_hours.items():
            if other_zone == zone:
                continue
            d[h] = (p.neighbor_share * dcm + infeed[zone][h]) / cap_factor
        demand[zone] = d

    weights = np.full(24, (8760.0 - p.stress_weight_h * len(stress_steps)) /
                      (24 - len(stress_steps)))
    for h in stress_steps:
        weights[h] = p.stress_weight_h

    profiles = ProfileSet(zones=zones, demand=demand, availability=availability,
                          renewable_caps=dict(p.renewable_caps), weights=weights)
    return profiles, network


def calibrate_demand(profiles: ProfileSet, eps: float = 0.2,
                     wtp: float = 20_000.0) -> list:
    """Consumer blocks with an elastic share ``eps`` of reference demand."""
    if not 0.0 < eps < 1.0:
        raise ValueError("elastic share must lie in (0, 1)")
    return [ConsumerBlock(zone=z, ref_demand=profiles.demand[z],
                          elastic_share=eps, wtp=wtp)
            for z in profiles.zones]


def default_thermal_techs(zones) -> list:
    """Base, mid and zone-specific peak units for each zone."""
    techs = []
    for i, zone in enumerate(zones):
        for name in ("base", "mid"):
            techs.append(GeneratorTech(id=f"{name}_{zone}", zone=zone,
                                       **THERMAL_COSTS[name]))
        techs.append(GeneratorTech(id=f"peak_{zone}", zone=zone,
                                   **PEAK_COSTS[min(i, len(PEAK_COSTS) - 1)]))
    return techs


@dataclass
class CaseData:
    """Everything a solver needs for one case: grid, agents, profiles."""

    network: Network
    ptdf: object
    grid: TimeGrid
    techs: list
    consumers: list
    renewable_infeed: np.ndarray  # zones x steps, MW
    profiles: ProfileSet

    @property
    def zones(self) -> tuple:
        return self.network.zones

    def zone_techs(self, zone) -> list:
        return [t for t in self.techs if t.zone == zone]

    def system_peak(self) -> float:
        return float(np.max(self.profiles.demand_matrix().sum(axis=0)))


def build_case(profiles: ProfileSet, network: Network, weights=None,
               eps: float = 0.2, wtp: float = 20_000.0, techs=None,
               slack=None) -> CaseData:
    if set(profiles.zones) != set(network.zones):
        raise ValueError("profile zones do not match network zones")
    if weights is None:
        weights = profiles.weights
    if weights is None:
        weights = np.full(profiles.n_steps, 8760.0 / profiles.n_steps)
    grid = TimeGrid(weights)
    if grid.n_steps != profiles.n_steps:
        raise ValueError("weight vector length does not match profiles")
    ptdf = build_ptdf(network, slack=slack or network.nodes[0])
    consumers = calibrate_demand(profiles, eps=eps, wtp=wtp)
    consumers = [next(c for c in consumers if c.zone == z) for z in network.zones]
    infeed_by_zone = profiles.renewable_infeed()
    order = [profiles.zones.index(z) for z in network.zones]
    infeed = infeed_by_zone[order]
    return CaseData(network=network, ptdf=ptdf, grid=grid,
                    techs=techs if techs is not None else default_thermal_techs(network.zones),
                    consumers=consumers, renewable_infeed=infeed, profiles=profiles)
