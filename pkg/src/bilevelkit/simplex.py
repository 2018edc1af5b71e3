"""Bounded-variable primal simplex with certificates.

Solves   min c'x   s.t.  row_lo <= A x <= row_hi,  lb <= x <= ub
by appending one ranged slack per row (A x - s = 0, s in [row_lo, row_hi]) and
running a two-phase revised simplex over the equality system.  Desk-scale by
design: the basis is refactorized densely every iteration, which is simple,
numerically safe and fast enough below a few hundred rows.

Guarantees targeted here, in order: never a wrong answer (numerical trouble
surfaces as ITERATION_LIMIT), exact statuses with verifiable certificates
(Farkas vector for infeasibility, improving ray for unboundedness), and
deterministic pivoting (Dantzig with lowest-index ties, Bland's rule after a
degeneracy streak).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

PIVOT_TOL = 1e-9
FEAS_TOL = 1e-7
DEGEN_STREAK = 30
DEFAULT_MAX_ITERS = 20000


class LpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITERATION_LIMIT = "iteration_limit"


@dataclass
class LpData:
    """Ranged-row LP in dense form."""
    c: np.ndarray
    A: np.ndarray
    row_lo: np.ndarray
    row_hi: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    obj_const: float = 0.0

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def copy(self) -> "LpData":
        return LpData(self.c.copy(), self.A, self.row_lo.copy(), self.row_hi.copy(),
                      self.lb.copy(), self.ub.copy(), self.obj_const)


@dataclass
class LpResult:
    status: LpStatus
    obj: float = math.nan
    x: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None          # row duals at optimum
    farkas: Optional[np.ndarray] = None     # row vector certifying infeasibility
    ray: Optional[np.ndarray] = None        # structural improving ray
    iters: int = 0


def farkas_certificate_value(lp: LpData, y: np.ndarray) -> float:
    """Positive value certifies infeasibility.

    For any feasible x with slack s = A x:  y'(A x - s) = 0, hence
    sum_j max over [lb,ub] of (y'A)_j x_j  +  sum_i max over [lo,hi] of (-y_i) s_i
    must be >= 0.  The certificate value is the negation of that upper bound.
    """
    q = y @ lp.A
    total = 0.0
    for qj, lo, hi in zip(q, lp.lb, lp.ub):
        if abs(qj) <= 1e-11:
            continue
        cap = qj * hi if qj > 0 else qj * lo
        if not math.isfinite(cap):
            return -math.inf
        total += cap
    for yi, lo, hi in zip(-y, lp.row_lo, lp.row_hi):
        if abs(yi) <= 1e-11:
            continue
        cap = yi * hi if yi > 0 else yi * lo
        if not math.isfinite(cap):
            return -math.inf
        total += cap
    return -total


def column_template(A: np.ndarray) -> np.ndarray:
    """Shared read-only column block [A | -I | +I]; reusable across solves."""
    m = A.shape[0]
    return np.hstack([A, -np.eye(m), np.eye(m)]) if m else A.astype(float)


class _Tableau:
    """Working state over the extended system [A | -I | +I] v = 0.

    The last block holds artificial columns: one per row whose slack cannot be
    placed inside its range at the start, with bounds [min(0,a), max(0,a)] so
    the signed phase-1 cost drives it to zero without crossing.  The basis
    inverse is maintained explicitly with rank-one (eta) updates and
    refactorized periodically, so one iteration costs O(m*n) for pricing plus
    O(m^2) for the update instead of a fresh O(m^3) solve.  A start point may
    place nonbasic structural variables strictly between their bounds; the
    pricing and ratio tests treat those as free to move either way.
    """

    REFACTOR_EVERY = 64

    def __init__(self, lp: LpData, template: Optional[np.ndarray] = None,
                 start: Optional[np.ndarray] = None):
        self.lp = lp
        m, n = lp.m, lp.n
        self.m, self.n_struct = m, n
        self.M = template if template is not None else column_template(lp.A)
        self.lb = np.concatenate([lp.lb, lp.row_lo, np.zeros(m)])
        self.ub = np.concatenate([lp.ub, lp.row_hi, np.zeros(m)])
        self.n_total = n + 2 * m
        self.art_range = range(n + m, n + 2 * m)

        if start is not None:
            x = np.clip(start, lp.lb, lp.ub)
            x = np.where(np.isfinite(x), x, 0.0)
        else:
            x = np.where(np.isfinite(lp.lb), lp.lb,
                         np.where(np.isfinite(lp.ub), lp.ub, 0.0))
        act = lp.A @ x if m else np.zeros(0)
        s = np.clip(act, lp.row_lo, lp.row_hi)
        a = s - act  # A x - s + a = 0
        a[np.abs(a) <= 1e-12] = 0.0
        self.lb[n + m:] = np.minimum(0.0, a)
        self.ub[n + m:] = np.maximum(0.0, a)

        self.values = np.concatenate([x, s, a])
        basis = np.arange(n, n + m)
        art_rows = np.nonzero(a != 0.0)[0]
        basis[art_rows] = n + m + art_rows
        self.basis = basis
        self.in_basis = np.zeros(self.n_total, dtype=bool)
        self.in_basis[self.basis] = True
        diag = -np.ones(m)
        diag[art_rows] = 1.0
        self.binv = np.diag(diag)
        self.phase1_cost = np.zeros(self.n_total)
        self.phase1_cost[n + m:] = np.sign(a)
        self.pivots_since_refactor = 0
        self.iters = 0

    def refactorize(self) -> bool:
        """Recompute the basis inverse and basic values from scratch."""
        if self.m == 0:
            return True
        try:
            self.binv = np.linalg.inv(self.M[:, self.basis])
        except np.linalg.LinAlgError:
            return False
        nb = ~self.in_basis
        self.values[self.basis] = self.binv @ (-(self.M[:, nb] @ self.values[nb]))
        self.pivots_since_refactor = 0
        return True

    def recompute_basics(self) -> bool:
        return self.refactorize()

    def run(self, cost: np.ndarray, max_iters: int) -> tuple[str, Optional[int], Optional[float], Optional[np.ndarray]]:
        """Minimize cost'v from the current basis.

        Returns (status, entering, direction, y): status is 'optimal',
        'unbounded' or 'limit'; on 'unbounded' the entering column and its
        direction describe the improving ray; y is the final dual vector.
        """
        degen = 0
        bland = False
        y = np.zeros(self.m)
        while True:
            if self.iters >= max_iters:
                return "limit", None, None, y
            self.iters += 1
            if self.m:
                y = cost[self.basis] @ self.binv
                d = cost - y @ self.M
                d[self.basis] = 0.0
            else:
                d = cost.astype(float)

            enter, direction = self._pick_entering(d, bland)
            if enter is None:
                return "optimal", None, None, y

            alpha = self.binv @ self.M[:, enter] if self.m else np.zeros(0)
            step, leave_pos, leave_to = self._ratio_test(enter, direction, alpha)
            if step is None:
                return "unbounded", enter, direction, y

            if step <= PIVOT_TOL:
                degen += 1
                if degen >= DEGEN_STREAK:
                    bland = True
            else:
                degen = 0
                bland = False

            self.values[enter] += direction * step
            if self.m:
                self.values[self.basis] -= direction * step * alpha
            if leave_pos is not None:
                if abs(alpha[leave_pos]) < 1e-11:
                    if not self.refactorize():
                        return "limit", None, None, y
                    continue
                leaving = self.basis[leave_pos]
                self.values[leaving] = self.lb[leaving] if leave_to == "lo" else self.ub[leaving]
                self.basis[leave_pos] = enter
                self.in_basis[leaving] = False
                self.in_basis[enter] = True
                pivot_row = self.binv[leave_pos] / alpha[leave_pos]
                self.binv -= np.outer(alpha, pivot_row)
                self.binv[leave_pos] = pivot_row
                self.pivots_since_refactor += 1
                if self.pivots_since_refactor >= self.REFACTOR_EVERY:
                    if not self.refactorize():
                        return "limit", None, None, y

    def _pick_entering(self, d: np.ndarray, bland: bool) -> tuple[Optional[int], float]:
        v, lo, hi = self.values, self.lb, self.ub
        at_lo = np.isfinite(lo) & (v <= lo + FEAS_TOL)
        at_hi = np.isfinite(hi) & (v >= hi - FEAS_TOL)
        free = ~self.in_basis & ~(at_lo & at_hi)
        up = free & ~at_hi & (d < -PIVOT_TOL)
        dn = free & ~at_lo & (d > PIVOT_TOL)
        if bland:
            cand = np.nonzero(up | dn)[0]
            if cand.size == 0:
                return None, 0.0
            j = int(cand[0])
            return j, 1.0 if up[j] else -1.0
        score = np.where(up, -d, np.where(dn, d, 0.0))
        j = int(np.argmax(score))
        if score[j] <= PIVOT_TOL:
            return None, 0.0
        return j, 1.0 if up[j] else -1.0

    def _ratio_test(self, enter: int, direction: float, alpha: np.ndarray):
        """Largest step for the entering move; (None, ...) when unbounded."""
        own_t = math.inf
        if direction > 0 and math.isfinite(self.ub[enter]):
            own_t = self.ub[enter] - self.values[enter]
        elif direction < 0 and math.isfinite(self.lb[enter]):
            own_t = self.values[enter] - self.lb[enter]

        row_t = math.inf
        leave_pos = None
        leave_to = None
        if self.m:
            rate = direction * alpha
            bl = self.values[self.basis]
            with np.errstate(divide="ignore", invalid="ignore"):
                t_dn = np.where(rate > PIVOT_TOL, (bl - self.lb[self.basis]) / rate, math.inf)
                t_up = np.where(rate < -PIVOT_TOL, (bl - self.ub[self.basis]) / rate, math.inf)
            t_all = np.minimum(t_dn, t_up)
            t_all = np.nan_to_num(t_all, nan=math.inf, posinf=math.inf, neginf=0.0)
            t_all = np.maximum(t_all, 0.0)
            i_min = int(np.argmin(t_all))
            row_t = float(t_all[i_min])
            if math.isfinite(row_t):
                ties = np.nonzero(t_all <= row_t + PIVOT_TOL)[0]
                i_min = int(ties[np.argmin(self.basis[ties])])
                row_t = float(t_all[i_min])
                leave_pos = i_min
                leave_to = "lo" if t_dn[i_min] <= t_up[i_min] else "hi"

        if own_t <= row_t + PIVOT_TOL and math.isfinite(own_t):
            return own_t, None, "flip"
        if leave_pos is None:
            return None, None, None
        return row_t, leave_pos, leave_to


def solve_lp(lp: LpData, max_iters: int = DEFAULT_MAX_ITERS,
             template: Optional[np.ndarray] = None,
             start: Optional[np.ndarray] = None) -> LpResult:
    """Two-phase simplex; statuses are exact or explicitly ITERATION_LIMIT.

    ``template`` may carry a precomputed [A | -I | +I] block shared across
    solves with the same matrix; ``start`` warm-starts the initial point.
    """
    n, m = lp.n, lp.m
    if np.any(lp.lb > lp.ub + FEAS_TOL) or np.any(lp.row_lo > lp.row_hi + FEAS_TOL):
        # Trivially contradictory box; certificate is the offending row when any.
        bad = np.where(lp.row_lo > lp.row_hi + FEAS_TOL)[0]
        y = np.zeros(m)
        if bad.size:
            y[bad[0]] = 1.0
        return LpResult(LpStatus.INFEASIBLE, farkas=y)

    tab = _Tableau(lp, template=template, start=start)

    # Phase 1: drive the signed artificial mass to zero (skipped when the
    # start point already yields a feasible slack basis).
    phase1 = float(tab.phase1_cost @ tab.values)
    if phase1 > 0.0:
        status, _, _, y1 = tab.run(tab.phase1_cost, max_iters)
        if status == "limit":
            return LpResult(LpStatus.ITERATION_LIMIT, iters=tab.iters)
        phase1 = float(tab.phase1_cost @ tab.values)
        if phase1 > FEAS_TOL * max(1.0, float(np.abs(lp.A).max(initial=0.0))):
            return LpResult(LpStatus.INFEASIBLE, farkas=y1, iters=tab.iters)

    # Pin artificials at zero for phase 2.
    for j in tab.art_range:
        tab.lb[j] = tab.ub[j] = 0.0
        tab.values[j] = 0.0

    cost2 = np.concatenate([lp.c, np.zeros(m), np.zeros(m)])
    status, enter, direction, y2 = tab.run(cost2, max_iters)
    if status == "limit":
        return LpResult(LpStatus.ITERATION_LIMIT, iters=tab.iters)
    if status == "unbounded":
        ray = np.zeros(tab.n_total)
        ray[enter] = direction
        if m:
            alpha = tab.binv @ tab.M[:, enter]
            ray[tab.basis] = -direction * alpha
        return LpResult(LpStatus.UNBOUNDED, ray=ray[:n], iters=tab.iters)

    # Kill accumulated drift and confirm the claimed optimum is feasible.
    if not tab.refactorize():
        return LpResult(LpStatus.ITERATION_LIMIT, iters=tab.iters)
    scale = 1.0 + float(np.abs(tab.values[np.isfinite(tab.values)]).max(initial=0.0))
    viol = np.maximum(tab.lb - tab.values, tab.values - tab.ub).max(initial=0.0)
    if viol > 100.0 * FEAS_TOL * scale:
        return LpResult(LpStatus.ITERATION_LIMIT, iters=tab.iters)

    x = tab.values[:n].copy()
    obj = float(lp.c @ x) + lp.obj_const
    return LpResult(LpStatus.OPTIMAL, obj=obj, x=x, y=y2, iters=tab.iters)
