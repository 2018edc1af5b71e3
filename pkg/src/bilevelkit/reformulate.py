"""Complementarity reformulations and binary-expansion linearization.

Each complementarity pair (y >= 0 perpendicular to expr >= 0 after the sign
normalization done at assembly) can be replaced by one of:

* SOS1        - slack f = expr plus the set {y, f} of which at most one is nonzero;
* Indicator   - one binary driving "expr = 0" (off) / "y = 0" (on) rows;
* Big-M       - expr <= M_p f and y <= M_d (1 - f), caller-supplied constants;
* Product     - the quadratic row y'expr <= t (t >= 0, also covers conic pairs);
* Complement  - an explicit record kept for export only;
* StrongDuality - problem-global: all pairs are replaced by a single quadratic
  equality forcing the lower primal and dual objectives to coincide.

``binary_expand`` turns remaining bilinear terms into mixed-binary linear form:
one chosen side of every product is constrained to a dyadic grid
``v = lb + delta * sum 2^k b_k`` with ``delta = (ub - lb)/(2^bits - 1)`` and
each binary-times-continuous product gets its exact McCormick envelope.
Rewritten rows receive a slack equal to a sound bound on the residual of
snapping any feasible point to the grid, so the expansion never cuts off the
exact solutions it is meant to approximate; per-variable grid error delta/2
and the row slacks are reported in the result metadata.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .flat import ComplementRec, IndicatorRec, LinRow, SingleLevelProblem, SosSet
from .kkt import ComplementarityPair, MpecProblem, _Namer, affine_product
from .model import AffineFunction, ConeKind, Diagnostic, ModelError, QuadraticFunction

DEFAULT_PRODUCT_T = 1e-5
DEFAULT_BITS = 12


class ReformulationError(ModelError):
    pass


# --------------------------------------------------------------------------
# modes


@dataclass(frozen=True)
class Sos1Mode:
    name = "sos1"


@dataclass(frozen=True)
class IndicatorMode:
    single_activation: bool = False
    name = "indicator"


@dataclass(frozen=True)
class BigMMode:
    M_p: float = 100.0
    M_d: float = 100.0
    name = "bigm"


@dataclass(frozen=True)
class ProductMode:
    t: float = DEFAULT_PRODUCT_T
    name = "product"


@dataclass(frozen=True)
class ComplementMode:
    name = "complement"


@dataclass(frozen=True)
class StrongDualityMode:
    name = "strong-duality"


Mode = Union[Sos1Mode, IndicatorMode, BigMMode, ProductMode, ComplementMode,
             StrongDualityMode]


@dataclass
class ExpansionConfig:
    bits: int = DEFAULT_BITS
    fallback_lb: Optional[float] = None
    fallback_ub: Optional[float] = None


@dataclass
class ModeAssignment:
    default: Mode = field(default_factory=Sos1Mode)
    overrides: dict[int, Mode] = field(default_factory=dict)  # pair id -> mode
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)

    def mode_for(self, pair_id: int) -> Mode:
        return self.overrides.get(pair_id, self.default)

    def check(self) -> None:
        for mode in [self.default, *self.overrides.values()]:
            if isinstance(mode, BigMMode):
                if not (mode.M_p > 0 and math.isfinite(mode.M_p)):
                    raise ReformulationError("primal big-M must be positive and finite")
                if not (mode.M_d > 0 and math.isfinite(mode.M_d)):
                    raise ReformulationError("dual big-M must be positive and finite")
            if isinstance(mode, ProductMode) and mode.t < 0:
                raise ReformulationError("product regularization t must be >= 0")
        for mode in self.overrides.values():
            if isinstance(mode, StrongDualityMode):
                raise ReformulationError(
                    "strong duality replaces the whole pair set; it cannot be a per-pair mode")
        if isinstance(self.default, StrongDualityMode) and self.overrides:
            raise ReformulationError("strong duality cannot be mixed with per-pair modes")
        e = self.expansion
        if e.bits < 1 or e.bits > 48:
            raise ReformulationError("expansion bits must be in [1, 48]")
        if e.fallback_lb is not None and e.fallback_ub is not None \
                and not e.fallback_lb < e.fallback_ub:
            raise ReformulationError("expansion fallback bounds must satisfy lb < ub")


def parse_mode_spec(name: str, params: Optional[dict] = None) -> Mode:
    params = params or {}
    name = name.lower().replace("_", "-")
    if name == "sos1":
        return Sos1Mode()
    if name == "indicator":
        return IndicatorMode(single_activation=bool(params.get("single_activation", False)))
    if name == "bigm":
        return BigMMode(M_p=float(params.get("Mp", params.get("primal", 100.0))),
                        M_d=float(params.get("Md", params.get("dual", 100.0))))
    if name == "product":
        return ProductMode(t=float(params.get("t", DEFAULT_PRODUCT_T)))
    if name == "complement":
        return ComplementMode()
    if name == "strong-duality":
        return StrongDualityMode()
    raise ReformulationError(f"unknown reformulation mode {name!r}")


# --------------------------------------------------------------------------
# per-pair templates


def _pair_suffix(mpec: MpecProblem, pair: ComplementarityPair) -> str:
    origin = mpec.blocks[pair.block_index].origin
    if origin[0] == "con":
        return f"c{origin[1]}"
    return f"{origin[0]}{origin[1]}"


def _require_scalar(pair: ComplementarityPair, what: str) -> None:
    if not pair.scalar:
        raise ReformulationError(
            f"{what} handles only scalar pairs; use the product mode for conic pairs")


def apply_sos1(flat: SingleLevelProblem, pair: ComplementarityPair,
               suffix: str, namer: _Namer) -> None:
    _require_scalar(pair, "the SOS1 reformulation")
    f = flat.add_var(namer(f"sl_{suffix}"), 0.0, math.inf)
    fn = pair.exprs[0].scaled(-1.0)
    fn.add_term(f, 1.0)
    flat.add_row(namer(f"sdef_{suffix}"), fn, 0.0, 0.0)
    flat.sos1.append(SosSet(namer(f"sos_{suffix}"), [(pair.y_ids[0], 1.0), (f, 2.0)]))


def apply_indicator(flat: SingleLevelProblem, pair: ComplementarityPair,
                    suffix: str, namer: _Namer, single_activation: bool = False) -> None:
    _require_scalar(pair, "the indicator reformulation")
    f = flat.add_var(namer(f"f_{suffix}"), 0.0, 1.0, is_binary=True)
    y = pair.y_ids[0]
    row = pair.row_ids[0]
    if single_activation:
        g = flat.add_var(namer(f"g_{suffix}"), 0.0, 1.0, is_binary=True)
        link = AffineFunction({f: 1.0, g: 1.0})
        flat.add_row(namer(f"onehot_{suffix}"), link, 1.0, 1.0)
        flat.indicators.append(IndicatorRec(namer(f"ind_{suffix}_p"), g, 1, row, None, 0.0, 0.0))
        flat.indicators.append(IndicatorRec(namer(f"ind_{suffix}_d"), f, 1, None, y, 0.0, 0.0))
    else:
        flat.indicators.append(IndicatorRec(namer(f"ind_{suffix}_p"), f, 0, row, None, 0.0, 0.0))
        flat.indicators.append(IndicatorRec(namer(f"ind_{suffix}_d"), f, 1, None, y, 0.0, 0.0))


def apply_bigm(flat: SingleLevelProblem, pair: ComplementarityPair,
               suffix: str, namer: _Namer, M_p: float, M_d: float) -> None:
    _require_scalar(pair, "the big-M reformulation")
    if not (M_p > 0 and M_d > 0):
        raise ReformulationError("big-M constants must be positive")
    f = flat.add_var(namer(f"f_{suffix}"), 0.0, 1.0, is_binary=True)
    primal = pair.exprs[0].copy()
    primal.add_term(f, -M_p)
    flat.add_row(namer(f"bmp_{suffix}"), primal, -math.inf, 0.0)
    dual = AffineFunction({pair.y_ids[0]: 1.0, f: M_d})
    flat.add_row(namer(f"bmd_{suffix}"), dual, -math.inf, M_d)
    flat.warnings.append(Diagnostic(
        "bigm-validity",
        f"pair {suffix}: solutions with slack > {M_p:g} or multiplier > {M_d:g} are cut off; "
        f"verifying big-M constants is as hard as the original problem"))


def apply_product(flat: SingleLevelProblem, pair: ComplementarityPair,
                  suffix: str, namer: _Namer, t: float = DEFAULT_PRODUCT_T) -> None:
    if t < 0:
        raise ReformulationError("product regularization t must be >= 0")
    quad: dict[tuple[int, int], float] = {}
    lin = AffineFunction()
    for y, expr in zip(pair.y_ids, pair.exprs):
        q, l = affine_product(AffineFunction({y: 1.0}), expr)
        for k, c in q.items():
            quad[k] = quad.get(k, 0.0) + c
        lin = lin.plus(l)
    flat.add_quad_row(namer(f"prod_{suffix}"), quad, lin, -math.inf, t)


def apply_complement(flat: SingleLevelProblem, pair: ComplementarityPair,
                     suffix: str, namer: _Namer) -> None:
    flat.complements.append(ComplementRec(
        namer(f"compl_{suffix}"), list(pair.y_ids),
        [e.copy() for e in pair.exprs], pair.cone))


def apply_strong_duality(mpec: MpecProblem, flat: SingleLevelProblem,
                         namer: _Namer) -> None:
    """Replace every pair with the primal-dual objective equality.

    Adds dual slack variables w (one per primal coordinate in the curvature
    block's range) together with the dual feasibility rows
    ``Q1 w + Q2 z + a0 - sum A_i' y_i = 0`` and the single quadratic row

        1/2 x'Q1 x + x'Q2 z + a0'x + 1/2 w'Q1 w + sum_i (b_i + D_i z)' y_i = 0.
    """
    blocks = mpec.lower
    quad: dict[tuple[int, int], float] = {}
    lin = AffineFunction()

    def addq(i: int, j: int, c: float) -> None:
        if c == 0.0:
            return
        key = (i, j) if i <= j else (j, i)
        quad[key] = quad.get(key, 0.0) + c

    x_flat = [mpec.var_map[v][0] for v in blocks.x_ids]
    z_map = [mpec.var_map[v] for v in blocks.z_ids]

    for j in range(blocks.n_x):
        for k in range(j, blocks.n_x):
            c = blocks.Q1[j, k] if j != k else 0.5 * blocks.Q1[j, j]
            addq(x_flat[j], x_flat[k], float(c))
        for k in range(blocks.n_z):
            fid, s = z_map[k]
            addq(x_flat[j], fid, float(blocks.Q2[j, k]) * s)
        if blocks.a0[j]:
            lin.add_term(x_flat[j], float(blocks.a0[j]))

    w_cols = [j for j in range(blocks.n_x) if np.any(blocks.Q1[j, :] != 0.0)]
    w_flat: dict[int, int] = {}
    for j in w_cols:
        name = mpec.single_level.vars[x_flat[j]].name
        w_flat[j] = flat.add_var(namer(f"w_{name}"))
    for j in w_cols:
        for k in w_cols:
            if k < j:
                continue
            c = blocks.Q1[j, k] if j != k else 0.5 * blocks.Q1[j, j]
            addq(w_flat[j], w_flat[k], float(c))

    # Dual feasibility (only where it differs from stationarity, i.e. Q1 rows).
    for j in w_cols:
        fn = AffineFunction(constant=float(blocks.a0[j]))
        for k in w_cols:
            if blocks.Q1[j, k]:
                fn.add_term(w_flat[k], float(blocks.Q1[j, k]))
        for k in range(blocks.n_z):
            if blocks.Q2[j, k]:
                fid, s = z_map[k]
                fn.add_term(fid, float(blocks.Q2[j, k]) * s)
        for info, blk in zip(mpec.blocks, blocks.blocks):
            for r in range(info.cone.dim):
                coef = info.flip * blk.A[r, j]
                if coef:
                    fn.add_term(info.y_ids[r], -float(coef))
        name = mpec.single_level.vars[x_flat[j]].name
        flat.add_row(namer(f"df_{name}"), fn, 0.0, 0.0)

    # sum_i (b_i + D_i z)' y_i, built from the normalized expressions by
    # stripping their x-part (flips cancel in the inner product).
    x_set = set(x_flat)
    for info in mpec.blocks:
        for y, expr in zip(info.y_ids, info.exprs):
            rhs = AffineFunction(constant=expr.constant)
            for v, c in expr.terms.items():
                if v not in x_set:
                    rhs.add_term(v, c)
            q, l = affine_product(AffineFunction({y: 1.0}), rhs)
            for k, c in q.items():
                addq(*k, c)
            lin = lin.plus(l)

    flat.add_quad_row(namer("strong_duality"), quad, lin, 0.0, 0.0)


# --------------------------------------------------------------------------
# binary expansion


@dataclass
class ExpansionReport:
    bits: int
    delta: dict[str, float] = field(default_factory=dict)
    grid_error: dict[str, float] = field(default_factory=dict)  # delta/2 per variable
    row_slack: dict[str, float] = field(default_factory=dict)
    pinned: dict[str, float] = field(default_factory=dict)
    objective_error_bound: float = 0.0


def _pin_singletons(flat: SingleLevelProblem) -> dict[int, float]:
    """Variables fixed by singleton equality rows or equal bounds."""
    pinned: dict[int, float] = {}
    for v in flat.vars:
        if v.lb == v.ub and math.isfinite(v.lb):
            pinned[v.id] = v.lb
    for row in flat.rows:
        if row.lo == row.hi and len(row.fn.terms) == 1:
            (var, coef), = row.fn.terms.items()
            val = (row.lo - row.fn.constant) / coef
            if var in pinned and abs(pinned[var] - val) > 1e-12:
                continue  # contradictory pins surface as infeasibility later
            pinned[var] = val
    for vid, val in pinned.items():
        flat.vars[vid].lb = max(flat.vars[vid].lb, val)
        flat.vars[vid].ub = min(flat.vars[vid].ub, val)
    return pinned


def _substitute_pins(quad: dict, lin: AffineFunction, pinned: dict[int, float]):
    """Fold pinned variables of a quadratic form into linear/constant parts."""
    out_q: dict[tuple[int, int], float] = {}
    out_l = lin.copy()
    for (i, j), c in quad.items():
        pi, pj = i in pinned, j in pinned
        if pi and pj:
            out_l.constant += c * pinned[i] * pinned[j]
        elif pi:
            out_l.add_term(j, c * pinned[i])
        elif pj:
            out_l.add_term(i, c * pinned[j])
        else:
            key = (i, j)
            out_q[key] = out_q.get(key, 0.0) + c
    return out_q, out_l


def _trivially_true(quad: dict, lin: AffineFunction, lo: float, hi: float) -> bool:
    """Rows like  sum of negative squares <= nonneg constant  always hold."""
    if lo != -math.inf or lin.terms:
        return False
    if any(i != j or c > 0 for (i, j), c in quad.items()):
        return False
    return lin.constant <= hi


def binary_expand(flat: SingleLevelProblem, bits: int = DEFAULT_BITS,
                  fallback_lb: Optional[float] = None,
                  fallback_ub: Optional[float] = None,
                  products: Optional[list[tuple[int, int]]] = None) -> SingleLevelProblem:
    """Linearize bilinear terms; returns a new problem with report metadata."""
    if not 1 <= bits <= 48:
        raise ReformulationError("expansion bits must be in [1, 48]")
    out = flat.copy()
    namer = _Namer()
    for v in out.vars:
        namer.seen.add(v.name)

    report = ExpansionReport(bits=bits)
    pinned = _pin_singletons(out)
    report.pinned = {out.vars[v].name: val for v, val in pinned.items()}

    # Fold pins, collect surviving quadratic rows and objective products.
    surviving = []
    for qrow in out.quad_rows:
        q, l = _substitute_pins(qrow.quad, qrow.lin, pinned)
        if not q:
            if l.terms or not _trivially_true(q, l, qrow.lo, qrow.hi):
                out.add_row(namer(f"{qrow.name}_lin"), l, qrow.lo, qrow.hi)
            continue
        if _trivially_true(q, l, qrow.lo, qrow.hi):
            continue
        surviving.append((qrow.name, q, l, qrow.lo, qrow.hi))
    out.quad_rows = []
    obj_q, obj_l = _substitute_pins(out.objective.quad, out.objective.affine, pinned)

    wanted = set()
    for _, q, _, _, _ in surviving:
        wanted.update(q.keys())
    wanted.update(obj_q.keys())
    if products is not None:
        keys = {(min(i, j), max(i, j)) for i, j in products}
        missing = wanted - keys
        if missing:
            raise ReformulationError(f"product list misses terms: {sorted(missing)[:4]}")

    upper_ids = set(out.metadata.get("upper_ids", []))

    def bound_of(v: int, side: str) -> float:
        var = out.vars[v]
        if side == "lo":
            if math.isfinite(var.lb):
                return var.lb
            if fallback_lb is None:
                raise ReformulationError(
                    f"variable {var.name!r} has no lower bound and no fallback was given")
            return fallback_lb
        if math.isfinite(var.ub):
            return var.ub
        if fallback_ub is None:
            raise ReformulationError(
                f"variable {var.name!r} has no upper bound and no fallback was given")
        return fallback_ub

    def pick_side(i: int, j: int) -> int:
        if i == j:
            return i
        iu, ju = i in upper_ids, j in upper_ids
        if iu != ju:
            return i if iu else j
        fi = math.isfinite(out.vars[i].lb) and math.isfinite(out.vars[i].ub)
        fj = math.isfinite(out.vars[j].lb) and math.isfinite(out.vars[j].ub)
        if fi != fj:
            return i if fi else j
        return min(i, j)

    disc: dict[int, dict] = {}
    for (i, j) in sorted(wanted):
        v = pick_side(i, j)
        if v not in disc:
            lo, hi = bound_of(v, "lo"), bound_of(v, "hi")
            if not lo < hi:
                raise ReformulationError(
                    f"cannot discretize {out.vars[v].name!r}: empty range [{lo}, {hi}]")
            delta = (hi - lo) / (2**bits - 1)
            if not (math.isfinite(delta) and delta > 0):
                raise ReformulationError("grid step overflow; reduce bits or bounds")
            disc[v] = {"lo": lo, "hi": hi, "delta": delta, "bits": [], "partners": {}}

    prior = out.metadata.get("branch_priority", {})
    for b in out.binaries():
        prior.setdefault(b, 1000)

    for v in sorted(disc):
        d = disc[v]
        name = out.vars[v].name
        expansion = AffineFunction(constant=d["lo"])
        for k in range(bits):
            b = out.add_var(namer(f"xp_{name}_{k}"), 0.0, 1.0, is_binary=True)
            d["bits"].append(b)
            expansion.add_term(b, d["delta"] * 2**k)
            prior[b] = k
        grid = expansion.scaled(-1.0)
        grid.add_term(v, 1.0)
        out.add_row(namer(f"grid_{name}"), grid, 0.0, 0.0)
        out.vars[v].lb = max(out.vars[v].lb, d["lo"])
        out.vars[v].ub = min(out.vars[v].ub, d["hi"])
        report.delta[name] = d["delta"]
        report.grid_error[name] = d["delta"] / 2.0
    out.metadata["branch_priority"] = prior

    def partner_expr(v: int, u: int) -> AffineFunction:
        """Exact linear form of v*u given v is on its grid."""
        d = disc[v]
        if u in d["partners"]:
            return d["partners"][u].copy()
        ulo, uhi = bound_of(u, "lo"), bound_of(u, "hi")
        uname, vname = out.vars[u].name, out.vars[v].name
        expr = AffineFunction()
        if d["lo"]:
            expr.add_term(u, d["lo"])
        for k, b in enumerate(d["bits"]):
            m = out.add_var(namer(f"mc_{vname}_{k}_{uname}"),
                            min(0.0, ulo), max(0.0, uhi))
            # m = b*u by exact binary McCormick over u in [ulo, uhi]
            out.add_row(namer(f"mc1_{vname}_{k}_{uname}"),
                        AffineFunction({m: 1.0, b: -uhi}), -math.inf, 0.0)
            out.add_row(namer(f"mc2_{vname}_{k}_{uname}"),
                        AffineFunction({m: 1.0, b: -ulo}), 0.0, math.inf)
            out.add_row(namer(f"mc3_{vname}_{k}_{uname}"),
                        AffineFunction({m: 1.0, u: -1.0, b: -ulo}, ulo), -math.inf, 0.0)
            out.add_row(namer(f"mc4_{vname}_{k}_{uname}"),
                        AffineFunction({m: 1.0, u: -1.0, b: -uhi}, uhi), 0.0, math.inf)
            expr.add_term(m, d["delta"] * 2**k)
        d["partners"][u] = expr
        return expr.copy()

    def box_mag(u: int) -> float:
        return max(abs(bound_of(u, "lo")), abs(bound_of(u, "hi")))

    def rewrite(q: dict, l: AffineFunction) -> tuple[AffineFunction, float]:
        """Replace products; returns (linear form, snap-residual bound)."""
        lin = l.copy()
        slack = 0.0
        grads: dict[int, float] = {}
        for (i, j), c in sorted(q.items()):
            v = pick_side(i, j)
            u = j if v == i else i
            lin = lin.plus(partner_expr(v, u).scaled(c))
            grads[v] = grads.get(v, 0.0) + abs(c) * box_mag(u)
            if i == j:
                grads[v] += abs(c) * box_mag(v)
        for v, g in grads.items():
            g += abs(l.terms.get(v, 0.0))
            slack += (disc[v]["delta"] / 2.0) * g
        return lin, slack

    for name, q, l, lo, hi in surviving:
        lin, slack = rewrite(q, l)
        nlo = lo - slack if math.isfinite(lo) else lo
        nhi = hi + slack if math.isfinite(hi) else hi
        rid = out.add_row(namer(f"{name}_xp"), lin, nlo, nhi)
        report.row_slack[out.rows[rid].name] = slack

    if obj_q:
        lin, slack = rewrite(obj_q, obj_l)
        out.objective = QuadraticFunction(affine=lin)
        report.objective_error_bound = slack
    else:
        out.objective = QuadraticFunction(affine=obj_l)

    out.metadata["expansion"] = report
    return out


# --------------------------------------------------------------------------
# dispatch


def apply_modes(mpec: MpecProblem, assignment: ModeAssignment,
                target: str = "export") -> SingleLevelProblem:
    """Reformulate every pair per the assignment; optionally expand for MILP.

    ``target``: "export" keeps quadratic rows; "milp" runs ``binary_expand``
    on whatever bilinear terms remain so the result is directly solvable.
    """
    assignment.check()
    flat = mpec.single_level.copy()
    namer = _Namer()
    for v in flat.vars:
        namer.seen.add(v.name)
    for coll in (flat.rows, flat.quad_rows, flat.sos1, flat.indicators, flat.complements):
        for item in coll:
            namer.seen.add(item.name)

    if isinstance(assignment.default, StrongDualityMode):
        apply_strong_duality(mpec, flat, namer)
        flat.metadata["modes"] = {"default": "strong-duality"}
    else:
        modes_used = {}
        for pair in mpec.pairs:
            mode = assignment.mode_for(pair.id)
            suffix = _pair_suffix(mpec, pair)
            if not pair.scalar and not isinstance(mode, (ProductMode, ComplementMode)):
                raise ReformulationError(
                    f"conic pair {suffix} requires the product (or complement) mode, "
                    f"not {mode.name}")
            if isinstance(mode, Sos1Mode):
                apply_sos1(flat, pair, suffix, namer)
            elif isinstance(mode, IndicatorMode):
                apply_indicator(flat, pair, suffix, namer, mode.single_activation)
            elif isinstance(mode, BigMMode):
                apply_bigm(flat, pair, suffix, namer, mode.M_p, mode.M_d)
            elif isinstance(mode, ProductMode):
                apply_product(flat, pair, suffix, namer, mode.t)
            elif isinstance(mode, ComplementMode):
                apply_complement(flat, pair, suffix, namer)
            else:
                raise ReformulationError(f"cannot apply mode {mode!r} per pair")
            modes_used[pair.id] = mode.name
        flat.metadata["modes"] = {"default": assignment.default.name,
                                  "per_pair": modes_used}

    if target == "milp" and (flat.quad_rows or not flat.objective.is_affine()):
        flat = binary_expand(flat, assignment.expansion.bits,
                             assignment.expansion.fallback_lb,
                             assignment.expansion.fallback_ub)
    return flat
