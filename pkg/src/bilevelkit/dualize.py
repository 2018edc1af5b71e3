"""Dual of the parametric lower level.

For the normalized lower level

    min_x  1/2 x'Q1 x + x'Q2 z + 1/2 z'Q3 z + a0'x + d0'z + b0
    s.t.   A_i x + b_i + D_i z in C_i,   i = 1..m

with the upper-level vector z held as a symbolic parameter, the dual is

    max_{y, w}  -1/2 w'Q1 w + 1/2 z'Q3 z - sum_i (b_i + D_i z)' y_i + d0'z + b0
    s.t.        a0 + Q2 z - sum_i A_i' y_i + Q1 w = 0
                y_i in C_i*

One multiplier block y_i exists per constraint block; slack variables w exist
only for primal coordinates with a nonzero row in Q1 (when Q1 = 0 the dual is
the familiar LP dual and the objective is affine in y for fixed z).  Sign
conventions are fixed by the displayed equations; maximization lower levels
must be normalized before dualizing (``lower_blocks`` does this).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    BilevelProblem,
    ConeKind,
    ConeSet,
    LowerBlocks,
    lower_blocks,
)


class UnsupportedConeError(ValueError):
    pass


def dual_cone(cone: ConeSet) -> ConeSet:
    """Dual cone under the inner product pairing; errors on unsupported kinds."""
    if cone.kind == ConeKind.NONNEGATIVES:
        return ConeSet(ConeKind.NONNEGATIVES, cone.dim)
    if cone.kind == ConeKind.NONPOSITIVES:
        return ConeSet(ConeKind.NONPOSITIVES, cone.dim)
    if cone.kind == ConeKind.ZEROS:
        return ConeSet(ConeKind.REALS, cone.dim)
    if cone.kind == ConeKind.SECOND_ORDER_CONE:
        return ConeSet(ConeKind.SECOND_ORDER_CONE, cone.dim)
    raise UnsupportedConeError(f"no dual rule for cone kind {cone.kind.value}")


@dataclass
class DualProblem:
    """Dual data in stacked form.

    The y vector stacks one scalar per constraint row, block by block in
    constraint order; ``y_slices[i]`` selects block i.  ``w_cols`` lists the
    primal coordinates that received a w variable.  Stationarity rows (one per
    primal coordinate j) read

        a0[j] + (Q2 z)[j] - (A_all' y)[j] + (Q1[:, w] w)[j] = 0.
    """
    blocks: LowerBlocks
    y_slices: list[slice]
    y_cones: list[ConeSet]
    w_cols: list[int]              # primal coordinate index of each w variable
    A_all: np.ndarray              # total_rows x n_x
    D_all: np.ndarray              # total_rows x n_z
    b_all: np.ndarray              # total_rows

    @property
    def n_y(self) -> int:
        return self.A_all.shape[0]

    @property
    def n_w(self) -> int:
        return len(self.w_cols)

    def stationarity_residual(self, y: np.ndarray, w: np.ndarray, z: np.ndarray) -> np.ndarray:
        r = self.blocks.a0 + self.blocks.Q2 @ z - self.A_all.T @ y
        if self.n_w:
            r = r + self.blocks.Q1[:, self.w_cols] @ w
        return r

    def objective_value(self, y: np.ndarray, w: np.ndarray, z: np.ndarray) -> float:
        """Dual (maximization) objective at a point, for numeric z."""
        val = (
            0.5 * z @ self.blocks.Q3 @ z
            - (self.b_all + self.D_all @ z) @ y
            + self.blocks.d0 @ z
            + self.blocks.b0
        )
        if self.n_w:
            Qw = self.blocks.Q1[np.ix_(self.w_cols, self.w_cols)]
            val -= 0.5 * w @ Qw @ w
        return float(val)

    def membership_violation(self, y: np.ndarray) -> float:
        worst = 0.0
        for sl, cone in zip(self.y_slices, self.y_cones):
            worst = max(worst, cone.violation(y[sl]))
        return worst

    def fixed_z(self, z: np.ndarray):
        """Concrete dual data at numeric z.

        Returns ``(c_y, c_w, Q_w, const, E_y, E_w, rhs)`` describing

            max  c_y'y + c_w'w - 1/2 w'Q_w w + const
            s.t. E_y y + E_w w = rhs,   y_i in C_i*
        """
        z = np.asarray(z, dtype=float)
        c_y = -(self.b_all + self.D_all @ z)
        c_w = np.zeros(self.n_w)
        Q_w = self.blocks.Q1[np.ix_(self.w_cols, self.w_cols)] if self.n_w else np.zeros((0, 0))
        const = float(0.5 * z @ self.blocks.Q3 @ z + self.blocks.d0 @ z + self.blocks.b0)
        E_y = -self.A_all.T
        E_w = self.blocks.Q1[:, self.w_cols] if self.n_w else np.zeros((self.blocks.n_x, 0))
        rhs = -(self.blocks.a0 + self.blocks.Q2 @ z)
        return c_y, c_w, Q_w, const, E_y, E_w, rhs


def dualize_lower(problem: "BilevelProblem | LowerBlocks") -> DualProblem:
    """Build the dual of the lower level with full primal/dual maps."""
    blocks = problem if isinstance(problem, LowerBlocks) else lower_blocks(problem)

    y_slices: list[slice] = []
    y_cones: list[ConeSet] = []
    offset = 0
    for blk in blocks.blocks:
        y_slices.append(slice(offset, offset + blk.cone.dim))
        y_cones.append(dual_cone(blk.cone))
        offset += blk.cone.dim

    if blocks.blocks:
        A_all = np.vstack([blk.A for blk in blocks.blocks])
        D_all = np.vstack([blk.D for blk in blocks.blocks])
        b_all = np.concatenate([blk.b for blk in blocks.blocks])
    else:
        A_all = np.zeros((0, blocks.n_x))
        D_all = np.zeros((0, blocks.n_z))
        b_all = np.zeros(0)

    w_cols = [j for j in range(blocks.n_x) if np.any(blocks.Q1[j, :] != 0.0)]
    return DualProblem(blocks, y_slices, y_cones, w_cols, A_all, D_all, b_all)
