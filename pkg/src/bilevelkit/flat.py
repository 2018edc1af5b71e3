"""Flat single-level problem containers.

Everything downstream of KKT assembly (reformulation, the internal MILP
engine, the LP/MPS writers) works on this representation: plain variables
with bounds and an integrality flag, ranged linear rows, ranged quadratic
rows, SOS1 sets, indicator records, explicit complement records and one
objective stored in minimization form with the user's sense remembered.

Rows are ranged: ``lo <= fn(x) <= hi`` where ``fn`` includes its constant.
Equality is ``lo == hi``; one-sided rows use infinities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import AffineFunction, ConeKind, ConeSet, Diagnostic, QuadraticFunction, Sense
from .simplex import LpData


@dataclass
class FlatVar:
    id: int
    name: str
    lb: float = -math.inf
    ub: float = math.inf
    is_binary: bool = False


@dataclass
class LinRow:
    name: str
    fn: AffineFunction
    lo: float
    hi: float

    def violation(self, values: dict[int, float]) -> float:
        v = self.fn.evaluate(values)
        return max(0.0, self.lo - v, v - self.hi)


@dataclass
class QuadRow:
    """``lo <= sum q_ij x_i x_j + lin(x) <= hi``."""
    name: str
    quad: dict[tuple[int, int], float]
    lin: AffineFunction
    lo: float
    hi: float

    def value(self, values: dict[int, float]) -> float:
        v = self.lin.evaluate(values)
        for (i, j), c in self.quad.items():
            v += c * values[i] * values[j]
        return v


@dataclass
class SosSet:
    """At most one member may be nonzero."""
    name: str
    members: list[tuple[int, float]]  # (variable id, weight)


@dataclass
class IndicatorRec:
    """When ``binary == active_value`` the target is clamped to [lo, hi].

    The target is either an existing row (by index) or a single variable.
    """
    name: str
    binary: int
    active_value: int
    row_index: Optional[int]
    var: Optional[int]
    lo: float
    hi: float


@dataclass
class ComplementRec:
    """Explicit complementarity pair kept for export: y  perp  expr rows."""
    name: str
    y_ids: list[int]
    rows: list[AffineFunction]
    cone: ConeSet


class SingleLevelProblem:
    """Flat problem; objective held in minimization form."""

    def __init__(self, name: str = "flat"):
        self.name = name
        self.vars: list[FlatVar] = []
        self.rows: list[LinRow] = []
        self.quad_rows: list[QuadRow] = []
        self.sos1: list[SosSet] = []
        self.indicators: list[IndicatorRec] = []
        self.complements: list[ComplementRec] = []
        self.objective = QuadraticFunction()
        self.user_sense: Sense = Sense.MIN
        self.warnings: list[Diagnostic] = []
        self.metadata: dict = {}

    # -- construction --------------------------------------------------------

    def add_var(self, name: str, lb: float = -math.inf, ub: float = math.inf,
                is_binary: bool = False) -> int:
        self.vars.append(FlatVar(len(self.vars), name, float(lb), float(ub), is_binary))
        return len(self.vars) - 1

    def add_row(self, name: str, fn: AffineFunction, lo: float, hi: float) -> int:
        self.rows.append(LinRow(name, fn.copy(), float(lo), float(hi)))
        return len(self.rows) - 1

    def add_quad_row(self, name: str, quad: dict, lin: AffineFunction,
                     lo: float, hi: float) -> int:
        q = {}
        for (i, j), c in quad.items():
            if c != 0.0:
                key = (i, j) if i <= j else (j, i)
                q[key] = q.get(key, 0.0) + c
        self.quad_rows.append(QuadRow(name, q, lin.copy(), float(lo), float(hi)))
        return len(self.quad_rows) - 1

    def set_objective(self, fn: QuadraticFunction, user_sense: Sense) -> None:
        """Store the user's objective; kept internally as a minimization."""
        self.user_sense = user_sense
        self.objective = fn.copy() if user_sense == Sense.MIN else fn.scaled(-1.0)

    def user_objective(self, internal_value: float) -> float:
        return internal_value if self.user_sense == Sense.MIN else -internal_value

    # -- views ----------------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.vars)

    def binaries(self) -> list[int]:
        return [v.id for v in self.vars if v.is_binary]

    def is_linear(self) -> bool:
        return not self.quad_rows and self.objective.is_affine()

    def var_values(self, x: np.ndarray) -> dict[int, float]:
        return {j: float(x[j]) for j in range(self.n)}

    def lp_data(self) -> LpData:
        """Continuous relaxation of the linear part (quad rows ignored)."""
        n = self.n
        c = np.zeros(n)
        for v, coef in self.objective.affine.terms.items():
            c[v] = coef
        m = len(self.rows)
        A = np.zeros((m, n))
        lo = np.zeros(m)
        hi = np.zeros(m)
        for i, row in enumerate(self.rows):
            for v, coef in row.fn.terms.items():
                A[i, v] = coef
            lo[i] = row.lo - row.fn.constant
            hi[i] = row.hi - row.fn.constant
        lb = np.array([v.lb for v in self.vars])
        ub = np.array([v.ub for v in self.vars])
        return LpData(c=c, A=A, row_lo=lo, row_hi=hi, lb=lb, ub=ub,
                      obj_const=self.objective.affine.constant)

    def copy(self) -> "SingleLevelProblem":
        import copy as _copy
        out = SingleLevelProblem(self.name)
        out.vars = [_copy.copy(v) for v in self.vars]
        out.rows = [LinRow(r.name, r.fn.copy(), r.lo, r.hi) for r in self.rows]
        out.quad_rows = [QuadRow(r.name, dict(r.quad), r.lin.copy(), r.lo, r.hi)
                         for r in self.quad_rows]
        out.sos1 = [SosSet(s.name, list(s.members)) for s in self.sos1]
        out.indicators = [_copy.copy(i) for i in self.indicators]
        out.complements = [ComplementRec(c.name, list(c.y_ids),
                                         [r.copy() for r in c.rows], c.cone)
                           for c in self.complements]
        out.objective = self.objective.copy()
        out.user_sense = self.user_sense
        out.warnings = list(self.warnings)
        out.metadata = dict(self.metadata)
        return out

    def data_norm(self) -> float:
        vals = [1.0]
        vals.extend(abs(c) for c in self.objective.affine.terms.values())
        vals.extend(abs(c) for c in self.objective.quad.values())
        for row in self.rows:
            vals.extend(abs(c) for c in row.fn.terms.values())
            vals.append(abs(row.fn.constant))
        for row in self.quad_rows:
            vals.extend(abs(c) for c in row.quad.values())
            vals.extend(abs(c) for c in row.lin.terms.values())
        for v in self.vars:
            if math.isfinite(v.lb):
                vals.append(abs(v.lb))
            if math.isfinite(v.ub):
                vals.append(abs(v.ub))
        return max(vals)
