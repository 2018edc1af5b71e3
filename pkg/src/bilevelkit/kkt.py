"""Single-level MPEC assembly.

The transformation copies the upper level into a flat problem and appends the
lower level's KKT system: primal feasibility, dual-cone memberships, the
stationarity equations, and an explicit list of complementarity pairs left for
the reformulation step.  Dual-of-lower variables are substituted by the
multiplier of the constraint they were bound to.

Sign normalization: every nonpositive-orthant row block is negated into
nonnegative form during assembly, so scalar pairs always satisfy y >= 0 and
expr >= 0 and equality (zeros) blocks carry free multipliers and no pair.
Second-order-cone memberships (primal and dual) are emitted as one linear row
for the head coordinate plus one quadratic row for the norm inequality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .flat import SingleLevelProblem
from .model import (
    AffineFunction,
    BilevelProblem,
    ConeKind,
    ConeSet,
    Diagnostic,
    InvalidProblemError,
    Level,
    LowerBlocks,
    ModelError,
    QuadraticFunction,
    lower_blocks,
    validate,
)

KKT_CERT_REL_TOL = 1e-6


def affine_product(f: AffineFunction, g: AffineFunction):
    """Expand f*g into (quadratic term dict, affine function)."""
    quad: dict[tuple[int, int], float] = {}
    lin = AffineFunction(constant=f.constant * g.constant)
    for v, c in f.terms.items():
        lin.add_term(v, c * g.constant)
    for v, c in g.terms.items():
        lin.add_term(v, c * f.constant)
    for v1, c1 in f.terms.items():
        for v2, c2 in g.terms.items():
            key = (v1, v2) if v1 <= v2 else (v2, v1)
            quad[key] = quad.get(key, 0.0) + c1 * c2
    return {k: c for k, c in quad.items() if c != 0.0}, lin


@dataclass
class BlockInfo:
    """One lower constraint block after sign normalization."""
    index: int
    origin: tuple                    # ("con", id) | ("lb"|"ub", var id)
    cone: ConeSet                    # NONNEGATIVES, ZEROS or SOC after flipping
    flip: float                      # +1 or -1 vs the user's orientation
    y_ids: list[int]                 # flat multiplier variables
    exprs: list[AffineFunction]      # flat primal expressions (flipped)
    row_ids: list[int]               # linear feasibility rows (scalar/zeros/SOC head)


@dataclass
class ComplementarityPair:
    id: int
    block_index: int
    y_ids: list[int]
    exprs: list[AffineFunction]
    row_ids: list[int]
    cone: ConeSet

    @property
    def scalar(self) -> bool:
        return self.cone.kind != ConeKind.SECOND_ORDER_CONE


@dataclass
class MpecProblem:
    single_level: SingleLevelProblem
    pairs: list[ComplementarityPair]
    blocks: list[BlockInfo]
    stationarity_rows: list[int]
    var_map: dict[int, tuple[int, float]]        # original id -> (flat id, sign)
    dual_of_constraint: dict[int, tuple[list[int], float]]  # con id -> (y ids, flip)
    lower: LowerBlocks
    provenance: str
    dual_aliases: dict[str, tuple[int, float]] = field(default_factory=dict)

    def flat_id(self, original_id: int) -> int:
        return self.var_map[original_id][0]

    def pair_for_origin(self, origin: tuple) -> Optional[ComplementarityPair]:
        for p in self.pairs:
            if self.blocks[p.block_index].origin == origin:
                return p
        return None


@dataclass
class KktResidual:
    primal_infeas: float
    dual_infeas: float
    stationarity_norm: float
    complementarity_gap: float

    def max(self) -> float:
        return max(self.primal_infeas, self.dual_infeas,
                   self.stationarity_norm, self.complementarity_gap)

    def certified(self, data_norm: float) -> bool:
        return self.max() <= KKT_CERT_REL_TOL * (1.0 + data_norm)


def _cone_range(kind: ConeKind) -> tuple[float, float]:
    if kind == ConeKind.NONNEGATIVES:
        return 0.0, math.inf
    if kind == ConeKind.NONPOSITIVES:
        return -math.inf, 0.0
    if kind == ConeKind.ZEROS:
        return 0.0, 0.0
    return -math.inf, math.inf


class _Namer:
    def __init__(self):
        self.seen: set[str] = set()

    def __call__(self, base: str) -> str:
        name = base
        k = 1
        while name in self.seen:
            name = f"{base}~{k}"
            k += 1
        self.seen.add(name)
        return name


def assemble_mpec(problem: BilevelProblem) -> MpecProblem:
    """Build the single-level problem plus its complementarity pair list."""
    diags = validate(problem)
    if diags:
        raise InvalidProblemError(diags)
    blocks = lower_blocks(problem, check=False)

    flat = SingleLevelProblem(problem.name)
    namer = _Namer()
    var_map: dict[int, tuple[int, float]] = {}
    starts: dict[int, float] = {}

    for v in problem.variables:
        if v.level == Level.DUAL_OF_LOWER:
            continue  # mapped onto its multiplier below
        fid = flat.add_var(namer(v.name), v.lb, v.ub)
        var_map[v.id] = (fid, 1.0)
        if v.start is not None:
            starts[fid] = v.start

    # Multipliers, normalized blocks and primal feasibility.
    infos: list[BlockInfo] = []
    dual_of_constraint: dict[int, tuple[list[int], float]] = {}
    x_pos = {vid: k for k, vid in enumerate(blocks.x_ids)}
    z_src = list(blocks.z_ids)

    def translate_from_block_row(A_row, D_row, const) -> AffineFunction:
        fn = AffineFunction(constant=float(const))
        for k, coef in enumerate(A_row):
            if coef:
                fn.add_term(var_map[blocks.x_ids[k]][0], float(coef))
        for k, coef in enumerate(D_row):
            zid = z_src[k]
            if coef:
                if zid not in var_map:
                    raise ModelError("lower row references an unmapped dual variable")
                fid, s = var_map[zid]
                fn.add_term(fid, float(coef) * s)
        return fn

    for bi, blk in enumerate(blocks.blocks):
        flip = -1.0 if blk.cone.kind == ConeKind.NONPOSITIVES else 1.0
        kind = ConeKind.NONNEGATIVES if blk.cone.kind == ConeKind.NONPOSITIVES else blk.cone.kind
        cone = ConeSet(kind, blk.cone.dim)

        if blk.origin[0] == "con":
            base = f"y_{problem.constraint(blk.origin[1]).name}"
        else:
            base = f"y_{blk.origin[0]}_{problem.variables[blk.origin[1]].name}"

        y_ids: list[int] = []
        if cone.kind == ConeKind.NONNEGATIVES:
            y_ids.append(flat.add_var(namer(base), 0.0, math.inf))
        elif cone.kind == ConeKind.ZEROS:
            y_ids.append(flat.add_var(namer(base)))
        else:  # SOC multiplier lives in the self-dual cone
            y_ids = [flat.add_var(namer(f"{base}_{r}")) for r in range(cone.dim)]
            flat.vars[y_ids[0]].lb = 0.0
            if cone.dim > 1:
                quad = {}
                for r in range(1, cone.dim):
                    quad[(y_ids[r], y_ids[r])] = 1.0
                quad[(y_ids[0], y_ids[0])] = -1.0
                flat.add_quad_row(namer(f"{base}_cone"), quad, AffineFunction(), -math.inf, 0.0)

        exprs = []
        row_ids = []
        for r in range(cone.dim):
            fn = translate_from_block_row(flip * blk.A[r], flip * blk.D[r], flip * blk.b[r])
            exprs.append(fn)
        if cone.kind == ConeKind.SECOND_ORDER_CONE:
            row_ids.append(flat.add_row(namer(f"pf{bi}_head"), exprs[0], 0.0, math.inf))
            quad = {}
            lin = AffineFunction()
            for r in range(1, cone.dim):
                q, l = affine_product(exprs[r], exprs[r])
                for k, c in q.items():
                    quad[k] = quad.get(k, 0.0) + c
                lin = lin.plus(l)
            qh, lh = affine_product(exprs[0], exprs[0])
            for k, c in qh.items():
                quad[k] = quad.get(k, 0.0) - c
            lin = lin.plus(lh.scaled(-1.0))
            flat.add_quad_row(namer(f"pf{bi}_cone"), quad, lin, -math.inf, 0.0)
        else:
            lo, hi = _cone_range(cone.kind)
            row_ids.append(flat.add_row(namer(f"pf{bi}"), exprs[0], lo, hi))

        infos.append(BlockInfo(bi, blk.origin, cone, flip, y_ids, exprs, row_ids))
        if blk.origin[0] == "con":
            dual_of_constraint[blk.origin[1]] = (y_ids, flip)

    # Map dual-of-lower variables onto their multipliers, intersecting bounds.
    dual_aliases: dict[str, tuple[int, float]] = {}
    for v in problem.variables:
        if v.level != Level.DUAL_OF_LOWER:
            continue
        y_ids, flip = dual_of_constraint[v.dual_of]
        fid = y_ids[0]
        var_map[v.id] = (fid, flip)
        dual_aliases[v.name] = (fid, flip)
        lo, hi = (v.lb, v.ub) if flip > 0 else (-v.ub, -v.lb)
        fv = flat.vars[fid]
        fv.lb, fv.ub = max(fv.lb, lo), min(fv.ub, hi)
        if fv.lb > fv.ub:
            raise InvalidProblemError([Diagnostic(
                "dual-bound-conflict",
                f"bounds of {v.name!r} conflict with the dual cone of its constraint")])
        if v.start is not None:
            starts[fid] = flip * v.start

    def translate_affine(fn: AffineFunction) -> AffineFunction:
        return fn.remapped(var_map)

    def translate_quadratic(fn: QuadraticFunction) -> QuadraticFunction:
        out = QuadraticFunction(affine=translate_affine(fn.affine))
        for (i, j), c in fn.quad.items():
            fi, si = var_map[i]
            fj, sj = var_map[j]
            out.add_quad_term(fi, fj, c * si * sj)
        return out

    # Upper-level constraints.
    for con in problem.constraints:
        if con.level != Level.UPPER:
            continue
        rows = [translate_affine(r) for r in con.rows]
        if con.set.kind == ConeKind.SECOND_ORDER_CONE:
            flat.add_row(namer(f"u_{con.name}_head"), rows[0], 0.0, math.inf)
            quad = {}
            lin = AffineFunction()
            for r in range(1, con.set.dim):
                q, l = affine_product(rows[r], rows[r])
                for k, c in q.items():
                    quad[k] = quad.get(k, 0.0) + c
                lin = lin.plus(l)
            qh, lh = affine_product(rows[0], rows[0])
            for k, c in qh.items():
                quad[k] = quad.get(k, 0.0) - c
            lin = lin.plus(lh.scaled(-1.0))
            flat.add_quad_row(namer(f"u_{con.name}_cone"), quad, lin, -math.inf, 0.0)
        else:
            lo, hi = _cone_range(con.set.kind)
            flat.add_row(namer(f"u_{con.name}"), rows[0], lo, hi)

    # Stationarity: Q1 x + Q2 z + a0 - sum_i A_i' y_i = 0 (one row per x_j).
    stationarity_rows: list[int] = []
    for j, xid in enumerate(blocks.x_ids):
        fn = AffineFunction(constant=float(blocks.a0[j]))
        for k, coef in enumerate(blocks.Q1[j]):
            if coef:
                fn.add_term(var_map[blocks.x_ids[k]][0], float(coef))
        for k, coef in enumerate(blocks.Q2[j]):
            if coef:
                fid, s = var_map[z_src[k]]
                fn.add_term(fid, float(coef) * s)
        for info, blk in zip(infos, blocks.blocks):
            for r in range(info.cone.dim):
                coef = info.flip * blk.A[r, j]
                if coef:
                    fn.add_term(info.y_ids[r], -float(coef))
        name = namer(f"stat_{problem.variables[xid].name}")
        stationarity_rows.append(flat.add_row(name, fn, 0.0, 0.0))

    # Pairs: one per inequality/conic block; equality blocks are vacuous.
    pairs: list[ComplementarityPair] = []
    for info in infos:
        if info.cone.kind == ConeKind.ZEROS:
            continue
        pairs.append(ComplementarityPair(len(pairs), info.index, list(info.y_ids),
                                         [e.copy() for e in info.exprs],
                                         list(info.row_ids), info.cone))

    flat.set_objective(translate_quadratic(problem.upper_objective), problem.upper_sense)
    flat.metadata["starts"] = starts
    flat.metadata["source"] = problem.name
    flat.metadata["upper_ids"] = sorted(
        var_map[v.id][0] for v in problem.variables
        if v.level in (Level.UPPER, Level.DUAL_OF_LOWER))

    return MpecProblem(flat, pairs, infos, stationarity_rows, var_map,
                       dual_of_constraint, blocks, problem.name, dual_aliases)


def kkt_residual(mpec: MpecProblem, point: dict[int, float]) -> KktResidual:
    """Max-norm residuals of the four KKT layers at a flat-variable point."""
    flat = mpec.single_level
    missing = [v.name for v in flat.vars if v.id not in point]
    if missing:
        raise ModelError(f"point misses assignments for: {', '.join(missing[:5])}")

    primal = 0.0
    dual = 0.0
    comp = 0.0
    for info in mpec.blocks:
        vals = np.array([e.evaluate(point) for e in info.exprs])
        primal = max(primal, info.cone.violation(vals))
        y = np.array([point[i] for i in info.y_ids])
        if info.cone.kind == ConeKind.ZEROS:
            dual_cone = ConeSet(ConeKind.REALS, info.cone.dim)
        else:
            dual_cone = info.cone  # nonneg and SOC are self-dual
        dual = max(dual, dual_cone.violation(y))
        if info.cone.kind != ConeKind.ZEROS:
            comp = max(comp, abs(float(y @ vals)))

    stat = 0.0
    for rid in mpec.stationarity_rows:
        stat = max(stat, abs(flat.rows[rid].fn.evaluate(point)))
    return KktResidual(primal, dual, stat, comp)
