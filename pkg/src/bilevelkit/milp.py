"""Desk-scale branch-and-bound over the internal simplex.

Handles binaries, SOS1 sets, indicator records (enforced by branching, never
by big-M conversion) and, for the baseline reformulation-free path, direct
branching on complementarity pairs (y = 0 child vs expr = 0 child).

Node selection is best-bound with plunging: after branching, the search dives
into the more promising child first while the sibling waits on the heap keyed
by (bound, insertion sequence), so results are deterministic.  Every node's
relaxation is a fresh LP over the shared base matrix with node-local bound
arrays; at desk scale rebuilding is cheaper than bookkeeping.
"""

from __future__ import annotations

import enum
import heapq
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .flat import SingleLevelProblem
from .kkt import ComplementarityPair, MpecProblem
from .model import ConeKind, ModelError, Sense
from .simplex import LpData, LpResult, LpStatus, column_template, solve_lp

INT_TOL = 1e-7
FEAS_TOL = 1e-7
GAP_ABS = 1e-6
GAP_REL = 1e-6
BOUND_SLACK = 1e-9


class Status(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    GAP_LIMIT = "gap_limit"
    NODE_LIMIT = "node_limit"


@dataclass
class Limits:
    max_nodes: int = 200000
    gap_abs: float = GAP_ABS
    gap_rel: float = GAP_REL
    time_limit: Optional[float] = None


@dataclass
class SolveResult:
    """Solver outcome in the user's objective sense."""
    status: Status
    objective: float = math.nan
    point: dict[str, float] = field(default_factory=dict)
    bound: float = math.nan
    gap: float = math.inf
    nodes: int = 0
    provenance: dict = field(default_factory=dict)
    x: Optional[np.ndarray] = None

    def value(self, name: str) -> float:
        return self.point[name]


class UnsupportedProblemError(ModelError):
    pass


@dataclass
class _Node:
    lb: np.ndarray
    ub: np.ndarray
    row_lo: np.ndarray
    row_hi: np.ndarray
    depth: int
    bound: float = -math.inf
    start: Optional[np.ndarray] = None  # parent relaxation point, warm start


class _Engine:
    def __init__(self, flat: SingleLevelProblem,
                 pairs: Optional[list[ComplementarityPair]] = None,
                 limits: Optional[Limits] = None):
        if flat.quad_rows:
            raise UnsupportedProblemError(
                "quadratic rows cannot be solved directly; expand them first")
        if flat.complements:
            raise UnsupportedProblemError(
                "complement records are export-only; the internal solver cannot use them")
        self.flat = flat
        self.pairs = pairs or []
        for p in self.pairs:
            if not p.scalar:
                raise UnsupportedProblemError("complementarity branching needs scalar pairs")
        self.limits = limits or Limits()
        self.base = flat.lp_data()
        self.template = column_template(self.base.A)
        # Node row bounds live in constant-free space (bounds on A x).
        self.row_const = np.array([r.fn.constant for r in flat.rows]) \
            if flat.rows else np.zeros(0)
        self.binaries = flat.binaries()
        self.priority = flat.metadata.get("branch_priority", {})
        self.nodes = 0
        self.incumbent: Optional[np.ndarray] = None
        self.incumbent_obj = math.inf
        self.heap: list[tuple[float, int, _Node]] = []
        self.seq = 0
        self.t0 = time.monotonic()

    # -- node helpers ---------------------------------------------------------

    def _root(self) -> _Node:
        return _Node(self.base.lb.copy(), self.base.ub.copy(),
                     self.base.row_lo.copy(), self.base.row_hi.copy(), 0)

    def _child(self, node: _Node) -> _Node:
        return _Node(node.lb.copy(), node.ub.copy(),
                     node.row_lo.copy(), node.row_hi.copy(), node.depth + 1,
                     start=node.start)

    def _fix_binary(self, node: _Node, var: int, value: int) -> None:
        node.lb[var] = node.ub[var] = float(value)
        for ind in self.flat.indicators:
            if ind.binary == var and ind.active_value == value:
                if ind.row_index is not None:
                    c = self.row_const[ind.row_index]
                    node.row_lo[ind.row_index] = max(node.row_lo[ind.row_index], ind.lo - c)
                    node.row_hi[ind.row_index] = min(node.row_hi[ind.row_index], ind.hi - c)
                else:
                    node.lb[ind.var] = max(node.lb[ind.var], ind.lo)
                    node.ub[ind.var] = min(node.ub[ind.var], ind.hi)

    def _solve_node(self, node: _Node) -> LpResult:
        lp = LpData(self.base.c, self.base.A, node.row_lo, node.row_hi,
                    node.lb, node.ub, self.base.obj_const)
        return solve_lp(lp, template=self.template, start=node.start)

    # -- violation scans ------------------------------------------------------

    def _fractional_binary(self, node: _Node, x: np.ndarray) -> Optional[int]:
        best, best_key = None, None
        for j in self.binaries:
            if node.lb[j] == node.ub[j]:
                continue
            frac = abs(x[j] - round(x[j]))
            if frac <= INT_TOL:
                continue
            tier = self.priority.get(j, 0)
            key = (-tier, -min(frac, 1 - frac), j)
            if best is None or key < best_key:
                best, best_key = j, key
        return best

    def _violated_indicator(self, node: _Node, x: np.ndarray) -> Optional[int]:
        for k, ind in enumerate(self.flat.indicators):
            j = ind.binary
            if node.lb[j] == node.ub[j]:
                continue  # enforcement already applied on this path
            if abs(x[j] - ind.active_value) <= INT_TOL:
                if ind.row_index is not None:
                    row = self.flat.rows[ind.row_index]
                    v = sum(c * x[i] for i, c in row.fn.terms.items()) + row.fn.constant
                else:
                    v = x[ind.var]
                scale = 1.0 + abs(v)
                if v < ind.lo - FEAS_TOL * scale or v > ind.hi + FEAS_TOL * scale:
                    return k
        return None

    def _violated_sos1(self, node: _Node, x: np.ndarray) -> Optional[int]:
        for k, s in enumerate(self.flat.sos1):
            nz = [v for v, _ in s.members
                  if abs(x[v]) > FEAS_TOL * (1.0 + abs(x[v]))
                  and not (node.lb[v] == node.ub[v] == 0.0)]
            live = [v for v, _ in s.members if not (node.lb[v] == node.ub[v] == 0.0)]
            if len(nz) > 1 and len(live) > 1:
                return k
        return None

    def _violated_pair(self, node: _Node, x: np.ndarray) -> Optional[int]:
        for k, p in enumerate(self.pairs):
            y = x[p.y_ids[0]]
            e = sum(c * x[i] for i, c in p.exprs[0].terms.items()) + p.exprs[0].constant
            if abs(y * e) > FEAS_TOL * (1.0 + abs(y)) * (1.0 + abs(e)):
                return k
        return None

    # -- main loop ------------------------------------------------------------

    def run(self) -> tuple[Status, Optional[np.ndarray], float, float]:
        limits = self.limits
        root = self._root()
        self._push(root, -math.inf)
        status = None
        while self.heap:
            if self.nodes >= limits.max_nodes:
                status = Status.NODE_LIMIT
                break
            if limits.time_limit is not None and time.monotonic() - self.t0 > limits.time_limit:
                status = Status.NODE_LIMIT
                break
            bound, _, node = heapq.heappop(self.heap)
            if self._gap_closed(bound):
                status = Status.OPTIMAL
                break
            unbounded = self._dive(node)
            if unbounded:
                return Status.UNBOUNDED, None, -math.inf, math.inf

        best_bound = self.heap[0][0] if self.heap else self.incumbent_obj
        if self.incumbent is None:
            if status in (Status.NODE_LIMIT,):
                return status, None, best_bound, math.inf
            return Status.INFEASIBLE, None, math.inf, math.inf
        gap = self._gap(best_bound)
        if status is None or status == Status.OPTIMAL:
            status = Status.OPTIMAL if gap <= self._gap_tol() else Status.GAP_LIMIT
        return status, self.incumbent, best_bound, gap

    def _gap(self, bound: float) -> float:
        if self.incumbent is None:
            return math.inf
        return max(0.0, self.incumbent_obj - bound)

    def _gap_tol(self) -> float:
        ref = abs(self.incumbent_obj) if self.incumbent is not None else 1.0
        return max(self.limits.gap_abs, self.limits.gap_rel * ref)

    def _gap_closed(self, bound: float) -> bool:
        return self.incumbent is not None and self._gap(bound) <= self._gap_tol()

    def _push(self, node: _Node, bound: float) -> None:
        node.bound = bound
        heapq.heappush(self.heap, (bound, self.seq, node))
        self.seq += 1

    def _dive(self, node: _Node) -> bool:
        """Depth-first plunge from a node; returns True on proven unboundedness."""
        current: Optional[_Node] = node
        while current is not None:
            if self.nodes >= self.limits.max_nodes:
                self._push(current, current.bound)
                return False
            self.nodes += 1
            res = self._solve_node(current)
            if res.status == LpStatus.INFEASIBLE:
                return False
            if res.status == LpStatus.ITERATION_LIMIT:
                return False  # treated as a pruned node; never claims optimality
            if res.status == LpStatus.UNBOUNDED:
                j = next((b for b in self.binaries
                          if current.lb[b] != current.ub[b]), None)
                if j is None:
                    return True
                right = self._child(current)
                self._fix_binary(right, j, 1)
                self._push(right, current.bound)
                left = self._child(current)
                self._fix_binary(left, j, 0)
                current = left
                continue

            bound = res.obj
            current.bound = bound
            if self.incumbent is not None and bound >= self.incumbent_obj - BOUND_SLACK:
                return False
            x = res.x
            current.start = x
            children = self._branch_children(current, x)
            if children is None:
                if bound < self.incumbent_obj:
                    self.incumbent = x.copy()
                    self.incumbent_obj = bound
                return False
            first, second = children
            self._push(second, bound)
            current = first
        return False

    def _branch_children(self, node: _Node, x: np.ndarray):
        j = self._fractional_binary(node, x)
        if j is not None:
            up = self._child(node)
            self._fix_binary(up, j, 1)
            down = self._child(node)
            self._fix_binary(down, j, 0)
            return (down, up) if x[j] < 0.5 else (up, down)

        k = self._violated_indicator(node, x)
        if k is not None:
            ind = self.flat.indicators[k]
            on = self._child(node)
            self._fix_binary(on, ind.binary, 1)
            off = self._child(node)
            self._fix_binary(off, ind.binary, 0)
            return (off, on) if x[ind.binary] < 0.5 else (on, off)

        k = self._violated_sos1(node, x)
        if k is not None:
            s = self.flat.sos1[k]
            live = [v for v, _ in s.members if not (node.lb[v] == node.ub[v] == 0.0)]
            half = max(1, len(live) // 2)
            left = self._child(node)
            for v in live[:half]:
                left.lb[v] = left.ub[v] = 0.0
            right = self._child(node)
            for v in live[half:]:
                right.lb[v] = right.ub[v] = 0.0
            lmass = sum(abs(x[v]) for v in live[:half])
            rmass = sum(abs(x[v]) for v in live[half:])
            return (left, right) if lmass <= rmass else (right, left)

        k = self._violated_pair(node, x)
        if k is not None:
            p = self.pairs[k]
            ynode = self._child(node)
            ynode.lb[p.y_ids[0]] = ynode.ub[p.y_ids[0]] = 0.0
            enode = self._child(node)
            c = self.row_const[p.row_ids[0]]
            enode.row_lo[p.row_ids[0]] = enode.row_hi[p.row_ids[0]] = -c
            y = x[p.y_ids[0]]
            e = p.exprs[0].constant + sum(c * x[i] for i, c in p.exprs[0].terms.items())
            return (ynode, enode) if abs(y) <= abs(e) else (enode, ynode)
        return None


def _finish(flat: SingleLevelProblem, engine: _Engine,
            status: Status, x: Optional[np.ndarray],
            bound: float, gap: float, provenance: dict) -> SolveResult:
    sign = 1.0 if flat.user_sense == Sense.MIN else -1.0
    res = SolveResult(status, nodes=engine.nodes, provenance=provenance)
    if status == Status.UNBOUNDED:
        return res
    res.bound = sign * bound if math.isfinite(bound) else sign * bound
    if x is not None:
        internal = engine.incumbent_obj
        res.objective = sign * internal
        res.gap = gap
        res.x = x
        res.point = {v.name: float(x[v.id]) for v in flat.vars}
    return res


def solve_milp(flat: SingleLevelProblem, limits: Optional[Limits] = None,
               provenance: Optional[dict] = None) -> SolveResult:
    """Global solve of a linear single-level problem with discrete artifacts."""
    engine = _Engine(flat, pairs=None, limits=limits)
    status, x, bound, gap = engine.run()
    prov = {"solver": "branch_and_bound"}
    prov.update(provenance or {})
    return _finish(flat, engine, status, x, bound, gap, prov)


def solve_lp_only(flat: SingleLevelProblem) -> SolveResult:
    """Plain LP solve of the continuous relaxation (no discrete artifacts)."""
    lp = flat.lp_data()
    r = solve_lp(lp)
    sign = 1.0 if flat.user_sense == Sense.MIN else -1.0
    if r.status == LpStatus.OPTIMAL:
        point = {v.name: float(r.x[v.id]) for v in flat.vars}
        return SolveResult(Status.OPTIMAL, sign * r.obj, point, sign * r.obj, 0.0, 1,
                           {"solver": "simplex"}, r.x)
    if r.status == LpStatus.INFEASIBLE:
        return SolveResult(Status.INFEASIBLE, nodes=1, provenance={"solver": "simplex"})
    if r.status == LpStatus.UNBOUNDED:
        return SolveResult(Status.UNBOUNDED, nodes=1, provenance={"solver": "simplex"})
    return SolveResult(Status.NODE_LIMIT, nodes=1, provenance={"solver": "simplex"})


def solve_complementarity_bnb(mpec: MpecProblem,
                              limits: Optional[Limits] = None) -> SolveResult:
    """Reformulation-free reference solver: branch directly on the pairs."""
    for p in mpec.pairs:
        if not p.scalar:
            raise UnsupportedProblemError(
                "complementarity branching does not support second-order-cone pairs")
    flat = mpec.single_level
    if not flat.objective.is_affine():
        raise UnsupportedProblemError(
            "complementarity branching needs a linear objective; expand products first")
    engine = _Engine(flat, pairs=mpec.pairs, limits=limits)
    status, x, bound, gap = engine.run()
    return _finish(flat, engine, status, x, bound, gap,
                   {"solver": "complementarity_branch_and_bound"})
