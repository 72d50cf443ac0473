"""Dense convex QP kernel.

Solves

    min  0.5 x'Px + q'x
    s.t. A_eq x  = b_eq
         A_in x <= b_in
         lb <= x <= ub

with a dual active-set method (Goldfarb/Idnani style, dense KKT solves).
All subproblems in this package are small (tens of variables), strictly
convex in the decision variables, and need exact duals, which is what this
method provides. Infeasibility is detected from an unbounded dual ray and
reported with a certificate instead of a tolerance threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "QPResult",
    "QPError",
    "QPInfeasibleError",
    "QPNonconvexError",
    "solve_qp",
]

_FEAS_TOL = 1e-9
_DUAL_TOL = 1e-11
_MAX_PIVOTS = 2000


class QPError(Exception):
    """Base error for the QP kernel."""


class QPInfeasibleError(QPError):
    """Constraints are inconsistent.

    Carries a Farkas-style certificate: the offending row and the
    combination of active rows proving it cannot be satisfied.
    """

    def __init__(self, message, row=None, weights=None):
        super().__init__(message)
        self.row = row
        self.weights = weights


class QPNonconvexError(QPError):
    """Objective failed the convexity check."""


@dataclass
class QPResult:
    x: np.ndarray
    objective: float
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    lb_duals: np.ndarray
    ub_duals: np.ndarray
    kkt_residual: float
    pivots: int
    active_set: tuple = field(default=())


def _as_2d(a, n):
    if a is None:
        return np.zeros((0, n))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return np.zeros((0, n))
    if a.shape[1] != n:
        raise ValueError(f"constraint matrix has {a.shape[1]} columns, expected {n}")
    return a


def _as_1d(b, m, name):
    if b is None:
        if m != 0:
            raise ValueError(f"{name} missing")
        return np.zeros(0)
    b = np.atleast_1d(np.asarray(b, dtype=float)).ravel()
    if b.shape[0] != m:
        raise ValueError(f"{name} has length {b.shape[0]}, expected {m}")
    return b


def _check_convex(P):
    """Symmetrize and verify positive semidefiniteness; regularize if singular."""
    P = 0.5 * (P + P.T)
    d = np.diag(P)
    if np.any(d < -1e-12 * max(1.0, float(np.max(np.abs(d), initial=0.0)))):
        raise QPNonconvexError("negative quadratic diagonal after canonicalization")
    try:
        np.linalg.cholesky(P)
        return P
    except np.linalg.LinAlgError:
        pass
    w = np.linalg.eigvalsh(P)
    scale = max(1.0, float(np.max(np.abs(w))))
    if w[0] < -1e-10 * scale:
        raise QPNonconvexError(f"indefinite objective (min eigenvalue {w[0]:.3e})")
    # positive semidefinite but singular: tiny ridge keeps the KKT solves well posed
    return P + (1e-12 * scale) * np.eye(P.shape[0])


def _kkt_solve(P, A, rhs_top, rhs_bot):
    """Solve [[P, A'], [A, 0]] [u; v] = [rhs_top; rhs_bot]."""
    n = P.shape[0]
    m = A.shape[0]
    if m == 0:
        return np.linalg.solve(P, rhs_top), np.zeros(0)
    K = np.zeros((n + m, n + m))
    K[:n, :n] = P
    K[:n, n:] = A.T
    K[n:, :n] = A
    rhs = np.concatenate([rhs_top, rhs_bot])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def solve_qp(P, q, lb=None, ub=None, A_eq=None, b_eq=None, A_in=None, b_in=None,
             max_pivots=_MAX_PIVOTS, warm_active=None):
    """Solve a convex QP; returns primal solution, exact duals and KKT residual.

    Deterministic for identical inputs (fixed pivot tie-breaking). Raises
    :class:`QPInfeasibleError` with a certificate when the constraints are
    inconsistent and :class:`QPNonconvexError` for indefinite objectives.

    ``warm_active`` may carry the ``active_set`` of a previous solve with the
    same constraint layout; it seeds the active-set iteration and typically
    collapses repeated near-identical solves to a single KKT factorization.
    """
    q = np.atleast_1d(np.asarray(q, dtype=float)).ravel()
    n = q.shape[0]
    P = np.asarray(P, dtype=float)
    if P.ndim == 1:
        P = np.diag(P)
    if P.shape != (n, n):
        raise ValueError(f"P has shape {P.shape}, expected ({n}, {n})")
    P = _check_convex(P)

    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float).ravel()
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float).ravel()
    if lb.shape[0] != n or ub.shape[0] != n:
        raise ValueError("bound vectors must match variable count")
    if np.any(lb > ub + 1e-12):
        k = int(np.argmax(lb - ub))
        raise QPInfeasibleError(f"bound lb[{k}]={lb[k]} exceeds ub[{k}]={ub[k]}", row=("lb", k))

    A_eq = _as_2d(A_eq, n)
    b_eq = _as_1d(b_eq, A_eq.shape[0], "b_eq")
    A_in = _as_2d(A_in, n)
    b_in = _as_1d(b_in, A_in.shape[0], "b_in")
    m_in = A_in.shape[0]
    n_eq = A_eq.shape[0]

    # fast path: separable bound-constrained problem
    if n_eq == 0 and m_in == 0 and np.count_nonzero(P - np.diag(np.diag(P))) == 0:
        d = np.diag(P)
        if np.all(d > 0):
            x = np.clip(-q / d, lb, ub)
            grad = d * x + q
            at_lb = np.isclose(x, lb) & np.isfinite(lb)
            at_ub = np.isclose(x, ub) & np.isfinite(ub)
            lo = np.where(at_lb & (grad > 0), grad, 0.0)
            hi = np.where(at_ub & (grad < 0), -grad, 0.0)
            obj = float(0.5 * x @ (d * x) + q @ x)
            res = _kkt_residual(P, q, x, A_eq, np.zeros(0), A_in, np.zeros(0),
                                lo, hi, b_eq, b_in, lb, ub)
            return QPResult(x, obj, np.zeros(0), np.zeros(0), lo, hi, res, 0)

    # assemble inequality rows: user rows, then upper bounds, then lower bounds
    ub_idx = np.where(np.isfinite(ub))[0]
    lb_idx = np.where(np.isfinite(lb))[0]
    E_ub = np.zeros((ub_idx.size, n))
    E_ub[np.arange(ub_idx.size), ub_idx] = 1.0
    E_lb = np.zeros((lb_idx.size, n))
    E_lb[np.arange(lb_idx.size), lb_idx] = -1.0
    G = np.vstack([A_in, E_ub, E_lb])
    h = np.concatenate([b_in, ub[ub_idx], -lb[lb_idx]])
    m = G.shape[0]

    # start from the equality-constrained minimizer
    x, nu = _kkt_solve(P, A_eq, -q, b_eq)
    if n_eq > 0:
        eq_res = float(np.max(np.abs(A_eq @ x - b_eq)))
        if eq_res > 1e-6 * max(1.0, float(np.max(np.abs(b_eq), initial=0.0))):
            raise QPInfeasibleError(
                f"equality constraints inconsistent (residual {eq_res:.3e})", row=("eq",))

    active: list[int] = []
    u_act: list[float] = []
    tol = _FEAS_TOL * max(1.0, float(np.max(np.abs(h), initial=0.0)))
    p_inf = max(1.0, float(np.max(np.abs(P))))
    pivots = 0

    if warm_active:
        active = [int(i) for i in warm_active if 0 <= int(i) < m]
        # rebuild a dual-feasible start: minimize subject to the warm rows,
        # dropping any whose multiplier comes out negative
        while active:
            pivots += 1
            A_act = np.vstack([A_eq, G[active]])
            xw, ww = _kkt_solve(P, A_act, -q, np.concatenate([b_eq, h[active]]))
            w_in = ww[n_eq:]
            k = int(np.argmin(w_in))
            if w_in[k] < -_DUAL_TOL:
                active.pop(k)
                continue
            x, nu = xw, ww[:n_eq]
            u_act = [max(float(v), 0.0) for v in w_in]
            break
        else:
            x, nu = _kkt_solve(P, A_eq, -q, b_eq)

    while True:
        s = G @ x - h
        p = int(np.argmax(s))
        if s[p] <= tol:
            break
        a_p = G[p]
        a_norm2 = float(a_p @ a_p)
        u_p = 0.0
        while True:
            pivots += 1
            if pivots > max_pivots:
                raise QPError(f"active-set iteration limit ({max_pivots}) exceeded")
            A_act = np.vstack([A_eq, G[active]]) if active else A_eq
            z, w = _kkt_solve(P, A_act, a_p, np.zeros(A_act.shape[0]))
            w_eq = w[:n_eq]
            w_in = w[n_eq:]
            zPz = float(a_p @ z)  # equals z'Pz >= 0
            s_p = float(a_p @ x - h[p])
            if s_p <= tol:
                break
            t_block = np.inf
            k_block = -1
            for j, wj in enumerate(w_in):
                if wj > _DUAL_TOL:
                    cand = u_act[j] / wj
                    if cand < t_block - 1e-15:
                        t_block = cand
                        k_block = j
            degenerate = zPz <= 1e-10 * a_norm2 / p_inf
            t_full = np.inf if degenerate else s_p / zPz
            if not np.isfinite(min(t_full, t_block)):
                raise QPInfeasibleError(
                    f"inconsistent constraints: row {p} cannot be satisfied "
                    f"(violation {s_p:.6g})",
                    row=p, weights=np.asarray(w_in))
            if t_block < t_full:
                # partial step: a blocking dual hits zero, drop that row
                x = x - t_block * z
                nu = nu - t_block * w_eq
                for j in range(len(u_act)):
                    u_act[j] -= t_block * w_in[j]
                u_p += t_block
                active.pop(k_block)
                u_act.pop(k_block)
                continue
            # full step: constraint p becomes active
            x = x - t_full * z
            nu = nu - t_full * w_eq
            for j in range(len(u_act)):
                u_act[j] -= t_full * w_in[j]
            u_p += t_full
            break
        if u_p > 0.0:
            active.append(p)
            u_act.append(u_p)

    # unpack duals
    u = np.zeros(m)
    for idx, val in zip(active, u_act):
        u[idx] += max(val, 0.0)
    ineq_duals = u[:m_in].copy()
    ub_duals = np.zeros(n)
    lb_duals = np.zeros(n)
    ub_duals[ub_idx] = u[m_in:m_in + ub_idx.size]
    lb_duals[lb_idx] = u[m_in + ub_idx.size:]

    obj = float(0.5 * x @ P @ x + q @ x)
    res = _kkt_residual(P, q, x, A_eq, nu, A_in, ineq_duals, lb_duals, ub_duals,
                        b_eq, b_in, lb, ub)
    return QPResult(x, obj, nu, ineq_duals, lb_duals, ub_duals, res, pivots,
                    tuple(active))


def _kkt_residual(P, q, x, A_eq, nu, A_in, u, lo, hi, b_eq, b_in, lb, ub):
    """Max relative KKT residual over stationarity, feasibility, complementarity."""
    grad = P @ x + q
    if A_eq.shape[0]:
        grad = grad + A_eq.T @ nu
    if A_in.shape[0]:
        grad = grad + A_in.T @ u
    grad = grad + hi - lo
    scale = max(1.0, float(np.max(np.abs(q), initial=0.0)),
                float(np.max(np.abs(P @ x), initial=0.0)))
    r_stat = float(np.max(np.abs(grad), initial=0.0)) / scale
    r_feas = 0.0
    if A_eq.shape[0]:
        r_feas = max(r_feas, float(np.max(np.abs(A_eq @ x - b_eq))) /
                     max(1.0, float(np.max(np.abs(b_eq), initial=0.0))))
    if A_in.shape[0]:
        viol = A_in @ x - b_in
        r_feas = max(r_feas, float(np.max(viol, initial=0.0)) /
                     max(1.0, float(np.max(np.abs(b_in), initial=0.0))))
    bscale = max(1.0, float(np.max(np.abs(x), initial=0.0)))
    r_feas = max(r_feas, float(np.max(lb - x, initial=0.0)) / bscale)
    r_feas = max(r_feas, float(np.max(x - ub, initial=0.0)) / bscale)
    r_comp = 0.0
    if A_in.shape[0]:
        r_comp = float(np.max(np.abs(u * (A_in @ x - b_in)), initial=0.0)) / scale / bscale
    return max(r_stat, r_feas, r_comp)
