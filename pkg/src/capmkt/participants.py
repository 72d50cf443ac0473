"""Price-taking market participants.

Best-response subproblems of generators (dispatch, investment, firm
capacity offer) and of zonal consumers (elastic/inelastic demand and load
shedding), with optional proximal penalty terms used by the equilibrium
coordinator. Each best response is an exact solve of a small strictly
convex program.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .qp import solve_qp

__all__ = [
    "TimeGrid",
    "GeneratorTech",
    "GeneratorDecision",
    "ConsumerBlock",
    "ConsumerDecision",
    "AdmmTerms",
    "UnboundedBestResponse",
    "generator_best_response",
    "consumer_best_response",
]


class UnboundedBestResponse(Exception):
    """Best response has a direction of unbounded improvement."""


@dataclass(frozen=True)
class TimeGrid:
    """Representative timesteps with hours-per-year weights."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if np.any(w <= 0):
            raise ValueError("time weights must be positive")
        object.__setattr__(self, "weights", w)

    @property
    def n_steps(self) -> int:
        return int(self.weights.shape[0])

    @property
    def annual_hours(self) -> float:
        return float(self.weights.sum())


@dataclass(frozen=True)
class GeneratorTech:
    """Technology and cost data of one generator agent.

    Variable cost of dispatching g MW is (a_quad/2) g^2 + b_lin g per hour;
    marginal cost a_quad*g + b_lin. ``capex`` is the annualized investment
    cost per MW, ``existing`` the pre-built capacity that cannot be
    divested, ``availability`` the per-step usable fraction of capacity.
    """

    id: str
    zone: str
    a_quad: float
    b_lin: float
    capex: float
    existing: float = 0.0
    availability: object = 1.0

    def __post_init__(self):
        if self.a_quad < 0 or self.capex < 0 or self.existing < 0:
            raise ValueError(f"generator {self.id}: negative cost/capacity parameter")
        af = np.atleast_1d(np.asarray(self.availability, dtype=float))
        if np.any(af < 0) or np.any(af > 1):
            raise ValueError(f"generator {self.id}: availability outside [0, 1]")

    def availability_profile(self, n_steps: int) -> np.ndarray:
        af = np.atleast_1d(np.asarray(self.availability, dtype=float))
        if af.shape[0] == 1:
            return np.full(n_steps, af[0])
        if af.shape[0] != n_steps:
            raise ValueError(f"generator {self.id}: availability length {af.shape[0]} "
                             f"does not match {n_steps} steps")
        return af

    def variable_cost(self, dispatch) -> np.ndarray:
        g = np.asarray(dispatch, dtype=float)
        return 0.5 * self.a_quad * g * g + self.b_lin * g

    def marginal_cost(self, dispatch) -> np.ndarray:
        return self.a_quad * np.asarray(dispatch, dtype=float) + self.b_lin


@dataclass
class GeneratorDecision:
    """Dispatch per step (MW), installed capacity (MW), capacity offer (MW)."""

    dispatch: np.ndarray
    capacity: float
    cm_offer: float = 0.0
    meta: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.dispatch = np.asarray(self.dispatch, dtype=float)


@dataclass
class ConsumerBlock:
    """Zonal consumer: reference demand split into elastic and inelastic parts.

    The elastic block has quadratic utility with intercept ``wtp`` and
    capacity ``elastic_share * ref_demand``; unserved inelastic demand
    forfeits ``wtp`` per MWh. ``bid_cap`` caps the value the inelastic
    block can express in the market (price-capped designs); it defaults to
    the true willingness to pay.
    """

    zone: str
    ref_demand: np.ndarray
    elastic_share: float
    wtp: float
    bid_cap: float | None = None

    def __post_init__(self):
        self.ref_demand = np.atleast_1d(np.asarray(self.ref_demand, dtype=float))
        if np.any(self.ref_demand < 0):
            raise ValueError(f"consumer {self.zone}: negative reference demand")
        if not (0.0 < self.elastic_share < 1.0):
            raise ValueError(f"consumer {self.zone}: elastic share must be in (0, 1)")
        if self.wtp <= 0:
            raise ValueError(f"consumer {self.zone}: willingness to pay must be positive")

    @property
    def market_value(self) -> float:
        return self.wtp if self.bid_cap is None else min(self.wtp, self.bid_cap)

    def elastic_cap(self) -> np.ndarray:
        return self.elastic_share * self.ref_demand

    def inelastic_ref(self) -> np.ndarray:
        return (1.0 - self.elastic_share) * self.ref_demand

    def elastic_demand_at(self, price) -> np.ndarray:
        """Closed-form elastic demand of the quadratic utility."""
        lam = np.asarray(price, dtype=float)
        cap = self.elastic_cap()
        return np.clip(cap * (1.0 - lam / self.wtp), 0.0, cap)


@dataclass
class ConsumerDecision:
    demand: np.ndarray
    elastic: np.ndarray
    inelastic: np.ndarray
    ens: np.ndarray
    meta: dict = field(default_factory=dict, repr=False, compare=False)


@dataclass
class AdmmTerms:
    """Proximal penalty passed to a best response by the coordinator.

    The energy-market term adds (weight_t * rho_energy / 2) *
    (x_t - energy_anchor_t)^2 per step, expressed in the agent's own
    decision variable (dispatch for generators, total demand for
    consumers). The capacity term is the annual analogue on the capacity
    offer.
    """

    rho_energy: float
    energy_anchor: np.ndarray
    rho_capacity: float = 0.0
    capacity_anchor: float = 0.0

    def __post_init__(self):
        if self.rho_energy <= 0:
            raise ValueError("penalty weight must be positive")
        self.energy_anchor = np.atleast_1d(np.asarray(self.energy_anchor, dtype=float))


def generator_best_response(tech: GeneratorTech, grid: TimeGrid, energy_prices,
                            cm_price: float | None = None,
                            admm_terms: AdmmTerms | None = None,
                            y_max: float | None = None,
                            warm_active=None) -> GeneratorDecision:
    """Profit-maximizing dispatch, investment and capacity offer.

    ``cm_price`` of None disables the capacity market (offer fixed at 0).
    Without ``admm_terms`` this is the pure best response; a direction of
    unbounded profit raises :class:`UnboundedBestResponse` naming the
    missing bound.
    """
    lam = np.atleast_1d(np.asarray(energy_prices, dtype=float))
    T = grid.n_steps
    if lam.shape[0] != T:
        raise ValueError(f"price vector has {lam.shape[0]} steps, grid has {T}")
    if not np.all(np.isfinite(lam)) or np.any(lam < 0):
        raise ValueError("energy prices must be finite and nonnegative")
    W = grid.weights
    af = tech.availability_profile(T)
    has_cm = cm_price is not None
    lam_cm = float(cm_price) if has_cm else 0.0

    rho_e = admm_terms.rho_energy if admm_terms is not None else 0.0
    a_e = admm_terms.energy_anchor if admm_terms is not None else np.zeros(T)
    rho_cm = admm_terms.rho_capacity if admm_terms is not None else 0.0
    a_cm = admm_terms.capacity_anchor if admm_terms is not None else 0.0

    if admm_terms is None and y_max is None:
        # detect directions of unbounded improvement before solving
        margin_limit = lam_cm if has_cm else 0.0
        if tech.a_quad == 0.0:
            margin_limit += float(np.sum(W * af * np.maximum(lam - tech.b_lin, 0.0)))
        if margin_limit > tech.capex + 1e-9:
            raise UnboundedBestResponse(
                f"generator {tech.id}: profit grows without bound in capacity y "
                f"(marginal value {margin_limit:.6g} exceeds capex {tech.capex:.6g}); "
                "an upper bound on y is required")

    n = T + 2  # g_0..g_{T-1}, y, ycm
    iy, icm = T, T + 1
    Pd = np.zeros(n)
    quad = W * (tech.a_quad + rho_e)
    Pd[:T] = quad
    Pd[icm] = rho_cm
    q = np.zeros(n)
    q[:T] = W * (tech.b_lin - lam - rho_e * a_e)
    q[iy] = tech.capex
    q[icm] = -lam_cm - rho_cm * a_cm

    lb = np.zeros(n)
    lb[iy] = tech.existing
    ub = np.full(n, np.inf)
    if y_max is not None:
        ub[iy] = float(y_max)
        ub[:T] = af * float(y_max) + 1.0
    if not has_cm:
        ub[icm] = 0.0

    A_in = np.zeros((T + 1, n))
    A_in[np.arange(T), np.arange(T)] = 1.0
    A_in[np.arange(T), iy] = -af
    A_in[T, icm] = 1.0
    A_in[T, iy] = -1.0
    b_in = np.zeros(T + 1)

    res = solve_qp(np.diag(Pd), q, lb=lb, ub=ub, A_in=A_in, b_in=b_in,
                   warm_active=warm_active)
    g = np.maximum(res.x[:T], 0.0)
    y = max(float(res.x[iy]), tech.existing)
    ycm = float(np.clip(res.x[icm], 0.0, y))
    g = np.minimum(g, af * y)
    dec = GeneratorDecision(dispatch=g, capacity=y, cm_offer=ycm)
    dec.meta["kkt_residual"] = res.kkt_residual
    dec.meta["active_set"] = res.active_set
    return dec


def _consumer_closed_form(block: ConsumerBlock, lam: np.ndarray) -> ConsumerDecision:
    """Penalty-free best response: closed-form elastic block, bang-bang inelastic."""
    e = block.elastic_demand_at(lam)
    i_ref = block.inelastic_ref()
    serve = lam <= block.market_value + 1e-12  # indifference resolved toward serving
    i = np.where(serve, i_ref, 0.0)
    ens = i_ref - i
    return ConsumerDecision(demand=e + i, elastic=e, inelastic=i, ens=ens)


def consumer_best_response(block: ConsumerBlock, grid: TimeGrid, energy_prices,
                           admm_terms: AdmmTerms | None = None) -> ConsumerDecision:
    """Surplus-maximizing demand split for one zonal consumer.

    Solves, independently per step, the two-variable box-constrained
    problem in (elastic, inelastic) demand by exact case enumeration.
    """
    lam = np.atleast_1d(np.asarray(energy_prices, dtype=float))
    T = grid.n_steps
    if lam.shape[0] != T or block.ref_demand.shape[0] != T:
        raise ValueError("price/demand vectors must match the time grid")
    if admm_terms is None:
        return _consumer_closed_form(block, lam)

    W = grid.weights
    rho = admm_terms.rho_energy
    a = admm_terms.energy_anchor
    emax = block.elastic_cap()
    imax = block.inelastic_ref()
    V = block.market_value
    wtp = block.wtp
    # per-step minimization in (e, i):
    #   0.5*ce*e^2 + 0.5*rho_w*(e+i-a)^2 + le*e + li*i
    safe_cap = np.where(emax > 0, emax, 1.0)
    ce = W * wtp / safe_cap
    rho_w = W * rho
    le = W * (lam - wtp)
    li = W * (lam - V)

    cands_e, cands_i = [], []
    zero = np.zeros(T)
    # interior stationary points per activity pattern of the two boxes
    e_ii = (li - le) / ce
    i_ii = a - e_ii - li / rho_w
    cands_e.append(e_ii), cands_i.append(i_ii)
    for i_fix in (zero, imax):
        e_f = (rho_w * (a - i_fix) - le) / (ce + rho_w)
        cands_e.append(e_f), cands_i.append(i_fix)
    for e_fix in (zero, emax):
        i_f = a - e_fix - li / rho_w
        cands_e.append(e_fix), cands_i.append(i_f)
    for e_fix in (zero, emax):
        for i_fix in (zero, imax):
            cands_e.append(e_fix), cands_i.append(i_fix)

    tol = 1e-7 * np.maximum(1.0, np.abs(li) + np.abs(le))
    btol = 1e-9 * np.maximum(1.0, imax + emax)
    best_e = np.full(T, np.nan)
    best_i = np.full(T, np.nan)
    chosen = np.zeros(T, dtype=bool)
    for e_c, i_c in zip(cands_e, cands_i):
        ge = ce * e_c + rho_w * (e_c + i_c - a) + le
        gi = rho_w * (e_c + i_c - a) + li
        ok = (e_c >= -btol) & (e_c <= emax + btol) & (i_c >= -btol) & (i_c <= imax + btol)
        at_e_lo = np.abs(e_c) <= btol
        at_e_hi = np.abs(e_c - emax) <= btol
        at_i_lo = np.abs(i_c) <= btol
        at_i_hi = np.abs(i_c - imax) <= btol
        ok &= np.where(at_e_lo, ge >= -tol, np.where(at_e_hi, ge <= tol, np.abs(ge) <= tol))
        ok &= np.where(at_i_lo, gi >= -tol, np.where(at_i_hi, gi <= tol, np.abs(gi) <= tol))
        take = ok & ~chosen
        best_e = np.where(take, e_c, best_e)
        best_i = np.where(take, i_c, best_i)
        chosen |= take
    if not np.all(chosen):
        # numerically ambiguous steps: fall back to the exact QP kernel
        for t in np.where(~chosen)[0]:
            P = np.array([[ce[t] + rho_w[t], rho_w[t]], [rho_w[t], rho_w[t] + 1e-9]])
            qv = np.array([le[t] - rho_w[t] * a[t], li[t] - rho_w[t] * a[t]])
            r = solve_qp(P, qv, lb=[0.0, 0.0], ub=[emax[t], imax[t]])
            best_e[t], best_i[t] = r.x

    e = np.clip(best_e, 0.0, emax)
    i = np.clip(best_i, 0.0, imax)
    dec = ConsumerDecision(demand=e + i, elastic=e, inelastic=i, ens=imax - i)
    return dec
