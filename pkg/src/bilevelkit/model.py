"""Intermediate representation for two-level optimization problems.

A problem holds variables tagged with the level that decides them, function-in-set
constraints built from affine rows, and one quadratic objective per level.  Every
downstream transformation (dualization, KKT assembly, reformulation, export)
consumes this representation, so it is kept canonical and deterministic:

* functions store no zero coefficients and iterate in sorted variable order;
* quadratic terms are stored once per unordered pair (i <= j);
* objective senses are preserved as written by the user and only normalized to
  minimization inside :func:`lower_blocks`, so reported values keep the user sense.

Variables of kind ``DUAL_OF_LOWER`` live in the upper level but are bound to the
dual of a named lower-level constraint; they are substituted by the matching
multiplier during KKT assembly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

PSD_REL_TOL = 1e-8


class Level(enum.Enum):
    UPPER = "upper"
    LOWER = "lower"
    DUAL_OF_LOWER = "dual_of_lower"


class Sense(enum.Enum):
    MIN = "min"
    MAX = "max"


class ConeKind(enum.Enum):
    NONNEGATIVES = "nonneg"
    NONPOSITIVES = "nonpos"
    ZEROS = "zeros"
    SECOND_ORDER_CONE = "soc"
    REALS = "reals"  # only as a dual cone / flat-problem membership

SCALAR_CONES = (ConeKind.NONNEGATIVES, ConeKind.NONPOSITIVES, ConeKind.ZEROS)
LOWER_LEVEL_CONES = SCALAR_CONES + (ConeKind.SECOND_ORDER_CONE,)


@dataclass(frozen=True)
class ConeSet:
    kind: ConeKind
    dim: int = 1

    def __post_init__(self):
        if self.kind == ConeKind.SECOND_ORDER_CONE:
            if self.dim < 2:
                raise ValueError("second-order cone needs dim >= 2")
        elif self.kind in SCALAR_CONES and self.dim != 1:
            raise ValueError(f"{self.kind.value} rows are scalar (dim = 1)")
        if self.dim < 1:
            raise ValueError("cone dim must be positive")

    def contains(self, v: np.ndarray, tol: float = 0.0) -> bool:
        return self.violation(v) <= tol

    def violation(self, v) -> float:
        """Distance-like violation of membership, 0 when inside."""
        v = np.atleast_1d(np.asarray(v, dtype=float))
        if self.kind == ConeKind.NONNEGATIVES:
            return max(0.0, float(-v.min(initial=0.0)))
        if self.kind == ConeKind.NONPOSITIVES:
            return max(0.0, float(v.max(initial=0.0)))
        if self.kind == ConeKind.ZEROS:
            return float(np.abs(v).max(initial=0.0))
        if self.kind == ConeKind.SECOND_ORDER_CONE:
            return max(0.0, float(np.linalg.norm(v[1:]) - v[0]))
        return 0.0  # REALS


class AffineFunction:
    """Sparse affine function ``sum_i coef_i * var_i + constant``.

    Canonical: no stored zero coefficients, iteration sorted by variable id.
    """

    __slots__ = ("terms", "constant")

    def __init__(self, terms: Optional[dict[int, float]] = None, constant: float = 0.0):
        self.terms: dict[int, float] = {}
        self.constant = float(constant)
        if terms:
            for v, c in terms.items():
                self.add_term(v, c)

    def add_term(self, var: int, coef: float) -> "AffineFunction":
        c = self.terms.get(var, 0.0) + float(coef)
        if c == 0.0:
            self.terms.pop(var, None)
        else:
            self.terms[var] = c
        return self

    def items(self):
        return [(v, self.terms[v]) for v in sorted(self.terms)]

    def variables(self) -> set[int]:
        return set(self.terms)

    def evaluate(self, values: dict[int, float]) -> float:
        return self.constant + sum(c * values[v] for v, c in self.terms.items())

    def scaled(self, s: float) -> "AffineFunction":
        if s == 0.0:
            return AffineFunction()
        return AffineFunction({v: s * c for v, c in self.terms.items()}, s * self.constant)

    def plus(self, other: "AffineFunction") -> "AffineFunction":
        out = self.copy()
        for v, c in other.terms.items():
            out.add_term(v, c)
        out.constant += other.constant
        return out

    def remapped(self, mapping: dict[int, tuple[int, float]]) -> "AffineFunction":
        """Substitute each variable by ``coef * new_var`` per the mapping."""
        out = AffineFunction(constant=self.constant)
        for v, c in self.terms.items():
            nv, s = mapping.get(v, (v, 1.0))
            out.add_term(nv, c * s)
        return out

    def copy(self) -> "AffineFunction":
        return AffineFunction(dict(self.terms), self.constant)

    def __eq__(self, other):
        return (
            isinstance(other, AffineFunction)
            and self.terms == other.terms
            and self.constant == other.constant
        )

    def __repr__(self):
        parts = [f"{c:+g}*v{v}" for v, c in self.items()]
        if self.constant or not parts:
            parts.append(f"{self.constant:+g}")
        return " ".join(parts)


class QuadraticFunction:
    """``sum_{i<=j} q_ij * var_i * var_j + affine part``.

    Quadratic coefficients are stored once per unordered pair; a diagonal entry
    ``(i, i) -> c`` means the term ``c * var_i**2``.
    """

    __slots__ = ("quad", "affine")

    def __init__(self, quad: Optional[dict[tuple[int, int], float]] = None,
                 affine: Optional[AffineFunction] = None):
        self.quad: dict[tuple[int, int], float] = {}
        self.affine = affine.copy() if affine is not None else AffineFunction()
        if quad:
            for (i, j), c in quad.items():
                self.add_quad_term(i, j, c)

    def add_quad_term(self, i: int, j: int, coef: float) -> "QuadraticFunction":
        key = (i, j) if i <= j else (j, i)
        c = self.quad.get(key, 0.0) + float(coef)
        if c == 0.0:
            self.quad.pop(key, None)
        else:
            self.quad[key] = c
        return self

    def add_term(self, var: int, coef: float) -> "QuadraticFunction":
        self.affine.add_term(var, coef)
        return self

    def quad_items(self):
        return [(k, self.quad[k]) for k in sorted(self.quad)]

    def is_affine(self) -> bool:
        return not self.quad

    def variables(self) -> set[int]:
        vs = self.affine.variables()
        for i, j in self.quad:
            vs.add(i)
            vs.add(j)
        return vs

    def evaluate(self, values: dict[int, float]) -> float:
        tot = self.affine.evaluate(values)
        for (i, j), c in self.quad.items():
            tot += c * values[i] * values[j]
        return tot

    def scaled(self, s: float) -> "QuadraticFunction":
        out = QuadraticFunction(affine=self.affine.scaled(s))
        if s != 0.0:
            for (i, j), c in self.quad.items():
                out.quad[(i, j)] = s * c
        return out

    def copy(self) -> "QuadraticFunction":
        out = QuadraticFunction(affine=self.affine)
        out.quad = dict(self.quad)
        return out

    def __eq__(self, other):
        return (
            isinstance(other, QuadraticFunction)
            and self.quad == other.quad
            and self.affine == other.affine
        )

    def __repr__(self):
        parts = [f"{c:+g}*v{i}*v{j}" for (i, j), c in self.quad_items()]
        return " ".join(parts) + f" | {self.affine!r}"


@dataclass
class VariableRef:
    id: int
    level: Level
    name: str
    lb: float = -math.inf
    ub: float = math.inf
    start: Optional[float] = None
    dual_of: Optional[int] = None  # constraint id, DUAL_OF_LOWER only

    def has_bounds(self) -> bool:
        return self.lb != -math.inf or self.ub != math.inf


@dataclass
class Constraint:
    id: int
    level: Level
    name: str
    rows: list[AffineFunction]
    set: ConeSet
    dual_start: Optional[list[float]] = None

    def __post_init__(self):
        if len(self.rows) != self.set.dim:
            raise ValueError("row count must match cone dimension")
        if self.level not in (Level.UPPER, Level.LOWER):
            raise ValueError("constraints belong to the upper or lower level")


@dataclass
class Diagnostic:
    code: str
    message: str

    def __str__(self):
        return f"[{self.code}] {self.message}"


class ModelError(ValueError):
    pass


class InvalidProblemError(ModelError):
    def __init__(self, diagnostics: list[Diagnostic]):
        super().__init__("; ".join(map(str, diagnostics)))
        self.diagnostics = diagnostics


class BilevelProblem:
    """Two-level problem: tagged variables, function-in-set constraints, one
    quadratic objective per level."""

    def __init__(self, name: str = "problem"):
        self.name = name
        self.variables: list[VariableRef] = []
        self.constraints: list[Constraint] = []
        self.upper_objective = QuadraticFunction()
        self.upper_sense = Sense.MIN
        self.lower_objective = QuadraticFunction()
        self.lower_sense = Sense.MIN
        self._names: dict[str, int] = {}
        self._con_names: dict[str, int] = {}

    # -- building -----------------------------------------------------------

    def add_variable(self, level: Level, name: str,
                     lb: float = -math.inf, ub: float = math.inf,
                     start: Optional[float] = None) -> VariableRef:
        if name in self._names:
            raise ModelError(f"duplicate variable name {name!r}")
        if not lb <= ub:
            raise ModelError(f"invalid bounds for {name!r}: [{lb}, {ub}]")
        if level == Level.DUAL_OF_LOWER:
            raise ModelError("use add_dual_variable for duals of lower constraints")
        ref = VariableRef(len(self.variables), level, name, float(lb), float(ub), start)
        self.variables.append(ref)
        self._names[name] = ref.id
        return ref

    def add_dual_variable(self, constraint: "Constraint | int", name: str,
                          lb: float = -math.inf, ub: float = math.inf,
                          start: Optional[float] = None) -> VariableRef:
        """Upper-level variable identified with the dual of a lower constraint."""
        cid = constraint.id if isinstance(constraint, Constraint) else int(constraint)
        target = next((c for c in self.constraints if c.id == cid), None)
        if target is None:
            raise ModelError(f"constraint id {cid} not found")
        if target.level != Level.LOWER:
            raise ModelError(f"constraint {target.name!r} is not a lower-level constraint")
        if target.set.kind == ConeKind.SECOND_ORDER_CONE:
            raise ModelError("duals of second-order-cone constraints are not scalar")
        if name in self._names:
            raise ModelError(f"duplicate variable name {name!r}")
        if not lb <= ub:
            raise ModelError(f"invalid bounds for {name!r}: [{lb}, {ub}]")
        ref = VariableRef(len(self.variables), Level.DUAL_OF_LOWER, name,
                          float(lb), float(ub), start, dual_of=cid)
        self.variables.append(ref)
        self._names[name] = ref.id
        return ref

    def add_constraint(self, level: Level, name: str,
                       rows: "list[AffineFunction] | AffineFunction",
                       cone: ConeSet,
                       dual_start: Optional[list[float]] = None) -> Constraint:
        if name in self._con_names:
            raise ModelError(f"duplicate constraint name {name!r}")
        if isinstance(rows, AffineFunction):
            rows = [rows]
        con = Constraint(len(self.constraints), level, name,
                         [r.copy() for r in rows], cone, dual_start)
        self.constraints.append(con)
        self._con_names[name] = con.id
        return con

    def set_objective(self, level: Level, sense: Sense, fn: QuadraticFunction) -> None:
        if level == Level.UPPER:
            self.upper_objective, self.upper_sense = fn.copy(), sense
        elif level == Level.LOWER:
            self.lower_objective, self.lower_sense = fn.copy(), sense
        else:
            raise ModelError("objectives belong to the upper or lower level")

    # -- lookups ------------------------------------------------------------

    def variable(self, key: "int | str") -> VariableRef:
        if isinstance(key, str):
            if key not in self._names:
                raise ModelError(f"unknown variable {key!r}")
            key = self._names[key]
        return self.variables[key]

    def constraint(self, key: "int | str") -> Constraint:
        if isinstance(key, str):
            if key not in self._con_names:
                raise ModelError(f"unknown constraint {key!r}")
            key = self._con_names[key]
        return self.constraints[key]

    def vars_of(self, *levels: Level) -> list[VariableRef]:
        return [v for v in self.variables if v.level in levels]

    def data_norm(self) -> float:
        """Max magnitude across all coefficients, bounds and constants."""
        vals = [0.0]
        for obj in (self.upper_objective, self.lower_objective):
            vals.extend(abs(c) for c in obj.affine.terms.values())
            vals.append(abs(obj.affine.constant))
            vals.extend(abs(c) for c in obj.quad.values())
        for con in self.constraints:
            for row in con.rows:
                vals.extend(abs(c) for c in row.terms.values())
                vals.append(abs(row.constant))
        for v in self.variables:
            if v.lb != -math.inf:
                vals.append(abs(v.lb))
            if v.ub != math.inf:
                vals.append(abs(v.ub))
        return max(vals)


# ---------------------------------------------------------------------------
# validation


def validate(problem: BilevelProblem) -> list[Diagnostic]:
    """Collect every rule violation; an empty list means the problem is valid."""
    diags: list[Diagnostic] = []
    known = {v.id for v in problem.variables}
    con_ids = {c.id for c in problem.constraints}
    dual_ids = {v.id for v in problem.variables if v.level == Level.DUAL_OF_LOWER}

    for v in problem.variables:
        if not v.lb <= v.ub:
            diags.append(Diagnostic("bad-bounds", f"variable {v.name!r} has lb > ub"))
        if v.level == Level.DUAL_OF_LOWER:
            if v.dual_of is None or v.dual_of not in con_ids:
                diags.append(Diagnostic("dangling-dual", f"{v.name!r} references a missing constraint"))
                continue
            target = problem.constraint(v.dual_of)
            if target.level != Level.LOWER:
                diags.append(Diagnostic("dual-of-upper", f"{v.name!r} is a dual of an upper constraint"))
            else:
                lo, hi = _dual_sign_range(target.set.kind)
                if max(lo, v.lb) > min(hi, v.ub):
                    diags.append(Diagnostic(
                        "dual-bound-conflict",
                        f"{v.name!r} bounds [{v.lb}, {v.ub}] do not intersect the dual cone "
                        f"of {target.name!r}"))

    for con in problem.constraints:
        refs = set().union(*(r.variables() for r in con.rows)) if con.rows else set()
        if not refs <= known:
            diags.append(Diagnostic("dangling-id", f"constraint {con.name!r} references unknown variables"))
        if con.level == Level.LOWER:
            if refs & dual_ids:
                diags.append(Diagnostic(
                    "dual-in-lower", f"lower constraint {con.name!r} uses a dual-of-lower variable"))
            if con.set.kind not in LOWER_LEVEL_CONES:
                diags.append(Diagnostic(
                    "unsupported-cone", f"lower constraint {con.name!r} uses cone {con.set.kind.value}"))

    obj_refs = problem.lower_objective.variables()
    if not obj_refs <= known:
        diags.append(Diagnostic("dangling-id", "lower objective references unknown variables"))
    if obj_refs & dual_ids:
        diags.append(Diagnostic("dual-in-lower", "lower objective uses a dual-of-lower variable"))
    if not problem.upper_objective.variables() <= known:
        diags.append(Diagnostic("dangling-id", "upper objective references unknown variables"))

    q1 = _lower_q1(problem)
    if q1.size:
        scale = max(1.0, float(np.abs(q1).max()))
        evmin = float(np.linalg.eigvalsh(q1).min())
        if evmin < -PSD_REL_TOL * scale:
            diags.append(Diagnostic(
                "q1-not-psd",
                f"lower objective curvature block is not positive semidefinite "
                f"(min eigenvalue {evmin:.3e})"))
    return diags


def _dual_sign_range(kind: ConeKind) -> tuple[float, float]:
    if kind == ConeKind.NONNEGATIVES:
        return 0.0, math.inf
    if kind == ConeKind.NONPOSITIVES:
        return -math.inf, 0.0
    return -math.inf, math.inf  # ZEROS: free dual


def _lower_q1(problem: BilevelProblem) -> np.ndarray:
    xs = [v.id for v in problem.variables if v.level == Level.LOWER]
    idx = {vid: k for k, vid in enumerate(xs)}
    sign = 1.0 if problem.lower_sense == Sense.MIN else -1.0
    q1 = np.zeros((len(xs), len(xs)))
    for (i, j), c in problem.lower_objective.quad.items():
        if i in idx and j in idx:
            if i == j:
                q1[idx[i], idx[i]] += 2.0 * sign * c
            else:
                q1[idx[i], idx[j]] += sign * c
                q1[idx[j], idx[i]] += sign * c
    return q1


# ---------------------------------------------------------------------------
# matrix view of the lower level


@dataclass
class RowBlock:
    """One lower-level constraint block: A x + D z + b in cone."""
    A: np.ndarray          # dim x n_x
    D: np.ndarray          # dim x n_z
    b: np.ndarray          # dim
    cone: ConeSet
    origin: tuple          # ("con", constraint_id) | ("lb"|"ub", var_id)


@dataclass
class LowerBlocks:
    """Lower level as ``min 1/2 x'Q1 x + x'Q2 z + 1/2 z'Q3 z + a0'x + d0'z + b0``
    subject to the row blocks, with the objective normalized to minimization.

    ``x`` stacks the lower-level variables in id order; ``z`` stacks upper and
    dual variables in id order and is treated as a parameter vector.  Bound
    metadata of lower variables is materialized as explicit scalar row blocks
    (origin ``lb``/``ub``) so their multipliers exist after dualization.
    """
    x_ids: list[int]
    z_ids: list[int]
    Q1: np.ndarray
    Q2: np.ndarray
    Q3: np.ndarray
    a0: np.ndarray
    d0: np.ndarray
    b0: float
    blocks: list[RowBlock]
    sense_sign: float      # +1 if the user sense was Min, -1 if Max

    @property
    def n_x(self) -> int:
        return len(self.x_ids)

    @property
    def n_z(self) -> int:
        return len(self.z_ids)

    def x_index(self) -> dict[int, int]:
        return {vid: k for k, vid in enumerate(self.x_ids)}

    def z_index(self) -> dict[int, int]:
        return {vid: k for k, vid in enumerate(self.z_ids)}

    def objective_value(self, x: np.ndarray, z: np.ndarray) -> float:
        """Normalized (minimization) objective at the given point."""
        return float(
            0.5 * x @ self.Q1 @ x + x @ self.Q2 @ z + 0.5 * z @ self.Q3 @ z
            + self.a0 @ x + self.d0 @ z + self.b0
        )


def lower_blocks(problem: BilevelProblem, check: bool = True) -> LowerBlocks:
    """Matrix/vector view of the lower level; raises on an invalid problem."""
    if check:
        diags = validate(problem)
        if diags:
            raise InvalidProblemError(diags)

    x_ids = [v.id for v in problem.variables if v.level == Level.LOWER]
    z_ids = [v.id for v in problem.variables if v.level != Level.LOWER]
    xi = {vid: k for k, vid in enumerate(x_ids)}
    zi = {vid: k for k, vid in enumerate(z_ids)}
    n_x, n_z = len(x_ids), len(z_ids)
    sign = 1.0 if problem.lower_sense == Sense.MIN else -1.0

    Q1 = np.zeros((n_x, n_x))
    Q2 = np.zeros((n_x, n_z))
    Q3 = np.zeros((n_z, n_z))
    for (i, j), c in problem.lower_objective.quad.items():
        c = sign * c
        if i in xi and j in xi:
            if i == j:
                Q1[xi[i], xi[i]] += 2.0 * c
            else:
                Q1[xi[i], xi[j]] += c
                Q1[xi[j], xi[i]] += c
        elif i in zi and j in zi:
            if i == j:
                Q3[zi[i], zi[i]] += 2.0 * c
            else:
                Q3[zi[i], zi[j]] += c
                Q3[zi[j], zi[i]] += c
        else:
            x_id, z_id = (i, j) if i in xi else (j, i)
            Q2[xi[x_id], zi[z_id]] += c

    a0 = np.zeros(n_x)
    d0 = np.zeros(n_z)
    for v, c in problem.lower_objective.affine.terms.items():
        if v in xi:
            a0[xi[v]] = sign * c
        else:
            d0[zi[v]] = sign * c
    b0 = sign * problem.lower_objective.affine.constant

    blocks: list[RowBlock] = []
    for con in problem.constraints:
        if con.level != Level.LOWER:
            continue
        dim = con.set.dim
        A = np.zeros((dim, n_x))
        D = np.zeros((dim, n_z))
        b = np.zeros(dim)
        for r, row in enumerate(con.rows):
            b[r] = row.constant
            for v, c in row.terms.items():
                if v in xi:
                    A[r, xi[v]] = c
                else:
                    D[r, zi[v]] = c
        blocks.append(RowBlock(A, D, b, con.set, ("con", con.id)))

    for vid in x_ids:
        v = problem.variables[vid]
        if v.lb != -math.inf:
            A = np.zeros((1, n_x)); A[0, xi[vid]] = 1.0
            blocks.append(RowBlock(A, np.zeros((1, n_z)), np.array([-v.lb]),
                                   ConeSet(ConeKind.NONNEGATIVES), ("lb", vid)))
        if v.ub != math.inf:
            A = np.zeros((1, n_x)); A[0, xi[vid]] = 1.0
            blocks.append(RowBlock(A, np.zeros((1, n_z)), np.array([-v.ub]),
                                   ConeSet(ConeKind.NONPOSITIVES), ("ub", vid)))

    return LowerBlocks(x_ids, z_ids, Q1, Q2, Q3, a0, d0, b0, blocks, sign)


def problem_from_blocks(blocks: LowerBlocks) -> BilevelProblem:
    """Rebuild a problem whose lower level is exactly the given block view.

    Upper and dual variables come back as plain upper-level variables; lower
    variables come back free of bound metadata since bounds were already
    materialized into rows.  Useful for round-trip checks.
    """
    p = BilevelProblem("from_blocks")
    new_of: dict[int, int] = {}
    for k, zid in enumerate(blocks.z_ids):
        new_of[zid] = p.add_variable(Level.UPPER, f"z{k}").id
    for k, xid in enumerate(blocks.x_ids):
        new_of[xid] = p.add_variable(Level.LOWER, f"x{k}").id

    obj = QuadraticFunction()
    for i in range(blocks.n_x):
        for j in range(i, blocks.n_x):
            q = blocks.Q1[i, j] if i != j else 0.5 * blocks.Q1[i, i]
            if q:
                obj.add_quad_term(new_of[blocks.x_ids[i]], new_of[blocks.x_ids[j]], q)
        for j in range(blocks.n_z):
            if blocks.Q2[i, j]:
                obj.add_quad_term(new_of[blocks.x_ids[i]], new_of[blocks.z_ids[j]], blocks.Q2[i, j])
        if blocks.a0[i]:
            obj.add_term(new_of[blocks.x_ids[i]], blocks.a0[i])
    for i in range(blocks.n_z):
        for j in range(i, blocks.n_z):
            q = blocks.Q3[i, j] if i != j else 0.5 * blocks.Q3[i, i]
            if q:
                obj.add_quad_term(new_of[blocks.z_ids[i]], new_of[blocks.z_ids[j]], q)
        if blocks.d0[i]:
            obj.add_term(new_of[blocks.z_ids[i]], blocks.d0[i])
    obj.affine.constant = blocks.b0
    p.set_objective(Level.LOWER, Sense.MIN, obj)

    for k, blk in enumerate(blocks.blocks):
        rows = []
        for r in range(blk.cone.dim):
            fn = AffineFunction(constant=float(blk.b[r]))
            for j in range(blocks.n_x):
                if blk.A[r, j]:
                    fn.add_term(new_of[blocks.x_ids[j]], float(blk.A[r, j]))
            for j in range(blocks.n_z):
                if blk.D[r, j]:
                    fn.add_term(new_of[blocks.z_ids[j]], float(blk.D[r, j]))
            rows.append(fn)
        p.add_constraint(Level.LOWER, f"c{k}", rows, blk.cone)
    return p
