"""End-to-end solve pathways.

``reformulation_solve`` assembles the MPEC, applies the chosen reformulation
modes, binary-expands whatever bilinear terms remain and hands the result to
the internal branch-and-bound.  When an expansion was involved and the
reformulated objective is linear, the incumbent is polished: the binding
pattern is read off the solution and one exact pattern-restricted LP recovers
a point that satisfies the KKT system to solver precision, which is what gets
reported (the expansion then only steers the combinatorial search).

``branching_solve`` is the reformulation-free baseline: complementarity pairs
are branched on directly; a bilinear objective is expanded first so node
relaxations stay linear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .flat import SingleLevelProblem
from .kkt import MpecProblem, assemble_mpec, kkt_residual
from .milp import (
    Limits,
    SolveResult,
    Status,
    UnsupportedProblemError,
    solve_complementarity_bnb,
    solve_lp_only,
    solve_milp,
)
from .model import BilevelProblem, ModelError, Sense
from .reformulate import (
    ComplementMode,
    ExpansionConfig,
    ModeAssignment,
    apply_modes,
    binary_expand,
)
from .simplex import LpStatus, solve_lp

PATTERN_TOL = 1e-7


def _as_mpec(problem: "BilevelProblem | MpecProblem") -> MpecProblem:
    if isinstance(problem, MpecProblem):
        return problem
    return assemble_mpec(problem)


def _attach_aliases(mpec: MpecProblem, result: SolveResult) -> None:
    if result.x is None:
        return
    for name, (fid, sign) in mpec.dual_aliases.items():
        result.point[name] = float(sign * result.x[fid])


def _pattern_at_fixed_uppers(mpec: MpecProblem, x: np.ndarray) -> Optional[list[bool]]:
    """Binding pattern of an exact KKT solve with upper decisions frozen.

    The expansion's job is locating the upper-level point; with it pinned the
    remaining complementarity system is small and solves exactly, and its
    binding set is the natural pattern to re-optimize the uppers within.
    """
    flat = mpec.single_level
    dual_fids = {fid for fid, _ in mpec.dual_aliases.values()}
    z_ids = [j for j in flat.metadata.get("upper_ids", []) if j not in dual_fids]
    if not z_ids:
        return None
    frozen = flat.copy()
    for j in z_ids:
        frozen.vars[j].lb = frozen.vars[j].ub = float(x[j])
    try:
        sub = solve_complementarity_bnb(replace(mpec, single_level=frozen),
                                        Limits(max_nodes=2000))
    except UnsupportedProblemError:
        return None
    if sub.x is None:
        return None
    pattern = []
    for p in mpec.pairs:
        e = p.exprs[0].constant + sum(c * sub.x[i] for i, c in p.exprs[0].terms.items())
        pattern.append(abs(e) <= PATTERN_TOL * (1.0 + abs(e)))
    return pattern


def polish_to_pattern(mpec: MpecProblem, x: np.ndarray) -> Optional[SolveResult]:
    """Exact pattern-restricted LP seeded by a (possibly approximate) point.

    The seed point may only loosely satisfy complementarity (grid restrictions
    and expansion slacks blur it), so three ways of reading a branch per pair
    are tried: trust the multiplier (y > tol means the expression binds),
    trust the expression (expr near 0 binds), and compare magnitudes.  Every
    candidate is an exact restriction of the KKT system; the best feasible one
    is returned.  Needs a linear objective and no quadratic memberships.
    """
    flat = mpec.single_level
    if flat.quad_rows or not flat.objective.is_affine():
        return None
    if any(not p.scalar for p in mpec.pairs):
        return None

    vals = []
    for p in mpec.pairs:
        y = float(x[p.y_ids[0]])
        e = p.exprs[0].constant + sum(c * x[i] for i, c in p.exprs[0].terms.items())
        vals.append((y, e))
    scale = 1.0 + max((max(abs(y), abs(e)) for y, e in vals), default=0.0)
    tol = PATTERN_TOL * scale

    candidates = [
        [y > tol for y, _ in vals],            # multipliers name the binding rows
        [e <= tol for _, e in vals],           # expressions at zero bind
        [abs(e) <= abs(y) + tol for y, e in vals],
    ]
    exact = _pattern_at_fixed_uppers(mpec, x)
    if exact is not None:
        candidates.insert(0, exact)
    seen = set()
    best: Optional[SolveResult] = None
    best_internal = math.inf
    sign = 1.0 if flat.user_sense == Sense.MIN else -1.0
    for pattern in candidates:
        key = tuple(pattern)
        if key in seen:
            continue
        seen.add(key)
        lp = flat.lp_data()
        for p, binding in zip(mpec.pairs, pattern):
            if binding:
                lp.row_lo[p.row_ids[0]] = lp.row_hi[p.row_ids[0]] = -p.exprs[0].constant
            else:
                lp.lb[p.y_ids[0]] = lp.ub[p.y_ids[0]] = 0.0
        r = solve_lp(lp)
        if r.status != LpStatus.OPTIMAL:
            continue
        if r.obj < best_internal:
            best_internal = r.obj
            point = {v.name: float(r.x[v.id]) for v in flat.vars}
            best = SolveResult(Status.OPTIMAL, sign * r.obj, point, sign * r.obj,
                               0.0, 1, {"solver": "pattern_lp"}, r.x)
    return best


def reformulation_solve(problem: "BilevelProblem | MpecProblem",
                        assignment: Optional[ModeAssignment] = None,
                        limits: Optional[Limits] = None,
                        polish: bool = True) -> SolveResult:
    """Reformulate and solve internally; reports in the user's sense."""
    mpec = _as_mpec(problem)
    assignment = assignment or ModeAssignment()
    if isinstance(assignment.default, ComplementMode) or any(
            isinstance(m, ComplementMode) for m in assignment.overrides.values()):
        raise UnsupportedProblemError(
            "the complement mode keeps explicit complementarity records and is export-only")

    flat = apply_modes(mpec, assignment, target="milp")
    expanded = "expansion" in flat.metadata

    if not flat.binaries() and not flat.sos1 and not flat.indicators:
        result = solve_lp_only(flat)
    else:
        result = solve_milp(flat, limits)
    result.provenance["modes"] = flat.metadata.get("modes", {})
    if expanded:
        result.provenance["expansion"] = flat.metadata["expansion"]

    if expanded and polish and result.x is not None and \
            result.status in (Status.OPTIMAL, Status.GAP_LIMIT, Status.NODE_LIMIT):
        polished = polish_to_pattern(mpec, result.x[:mpec.single_level.n])
        if polished is not None:
            polished.nodes = result.nodes
            polished.gap = result.gap
            polished.provenance = dict(result.provenance)
            polished.provenance["polished"] = True
            polished.provenance["milp_objective"] = result.objective
            if result.status is not Status.OPTIMAL:
                polished.status = result.status
            result = polished
        else:
            result.provenance["polished"] = False
    for w in flat.warnings:
        result.provenance.setdefault("warnings", []).append(str(w))
    _attach_aliases(mpec, result)
    return result


def branching_solve(problem: "BilevelProblem | MpecProblem",
                    expansion: Optional[ExpansionConfig] = None,
                    limits: Optional[Limits] = None) -> SolveResult:
    """Complementarity branch-and-bound baseline (no reformulation)."""
    mpec = _as_mpec(problem)
    flat = mpec.single_level
    if not flat.objective.is_affine():
        cfg = expansion or ExpansionConfig()
        expanded = binary_expand(flat, cfg.bits, cfg.fallback_lb, cfg.fallback_ub)
        mpec = replace(mpec, single_level=expanded)
    result = solve_complementarity_bnb(mpec, limits)
    if "expansion" in mpec.single_level.metadata:
        result.provenance["expansion"] = mpec.single_level.metadata["expansion"]
    _attach_aliases(mpec, result)
    return result


def certify_point(mpec: MpecProblem, result: SolveResult,
                  data_norm: Optional[float] = None):
    """KKT residuals of a solve result against the assembled system."""
    if result.x is None:
        raise ModelError("no point to certify")
    point = {v.id: float(result.x[v.id]) for v in mpec.single_level.vars}
    res = kkt_residual(mpec, point)
    norm = mpec.single_level.data_norm() if data_norm is None else data_norm
    return res, res.certified(norm)
