"""Small bounded-precision matrices over the scalar kernels.

Matrix products follow the same discipline as the scalar folds: every
multiplication is rounded into the target format, and row sums are
left-associative with rounding after each addition, so results depend on
evaluation order exactly the way the scalar semantics say they should.
Matrices may also hold exact rationals (fmt None), in which case no
rounding happens anywhere; that mode backs the lossless logit stage.
"""

from __future__ import annotations

from fractions import Fraction

from .bitnum import (
    FpFormat,
    FpNum,
    FxFormat,
    FxNum,
    fp_add,
    fp_mul,
    fp_round,
    fx_add,
    fx_mul,
    fx_round,
)


class ShapeMismatch(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class BMat:
    """A rectangular matrix whose entries are all FxNum, all FpNum, or all
    exact Fractions."""

    __slots__ = ("rows", "cols", "data", "kind")

    def __init__(self, data):
        data = [list(row) for row in data]
        if not data or not data[0]:
            raise ShapeMismatch("matrix must have at least one row and column")
        width = len(data[0])
        if any(len(row) != width for row in data):
            raise ShapeMismatch("ragged rows")
        self.rows = len(data)
        self.cols = width
        self.data = data
        sample = data[0][0]
        if isinstance(sample, FxNum):
            self.kind = "fx"
            ok = lambda v: isinstance(v, FxNum)
        elif isinstance(sample, FpNum):
            self.kind = "fp"
            ok = lambda v: isinstance(v, FpNum)
        else:
            self.kind = "exact"
            ok = lambda v: isinstance(v, (Fraction, int))
            self.data = [[Fraction(v) for v in row] for row in data]
        if not all(ok(v) for row in data for v in row):
            raise ShapeMismatch("mixed entry kinds")

    @classmethod
    def from_values(cls, values, fmt):
        """Build a matrix by rounding exact values into fmt (None = exact)."""
        if fmt is None:
            return cls(values)
        rounder = fx_round if isinstance(fmt, FxFormat) else fp_round
        return cls([[rounder(v, fmt) for v in row] for row in values])

    def at(self, i: int, j: int):
        if not (0 <= i < self.rows and 0 <= j < self.cols):
            raise IndexOutOfRange(f"({i}, {j}) outside {self.rows}x{self.cols}")
        return self.data[i][j]

    def row(self, i: int):
        if not 0 <= i < self.rows:
            raise IndexOutOfRange(f"row {i} outside {self.rows}x{self.cols}")
        return list(self.data[i])

    def __eq__(self, other):
        if not isinstance(other, BMat):
            return NotImplemented
        return self.data == other.data

    def __repr__(self):
        return f"BMat({self.rows}x{self.cols}, {self.kind})"


def _arith(kind, fmt):
    if kind == "fx":
        if not isinstance(fmt, FxFormat):
            raise ShapeMismatch("fx matrix needs an FxFormat")
        return (lambda a, b: fx_add(a, b, fmt),
                lambda a, b: fx_mul(a, b, fmt),
                lambda: FxNum.zero(fmt))
    if kind == "fp":
        if not isinstance(fmt, FpFormat):
            raise ShapeMismatch("fp matrix needs an FpFormat")
        return (lambda a, b: fp_add(a, b, fmt),
                lambda a, b: fp_mul(a, b, fmt),
                lambda: FpNum.zero(fmt))
    if fmt is not None:
        raise ShapeMismatch("exact matrices take fmt None")
    return (lambda a, b: a + b, lambda a, b: a * b, lambda: Fraction(0))


def matmul_left(a: BMat, b: BMat, fmt=None) -> BMat:
    """a @ b with rounded products and left-associative rounded row sums."""
    if a.cols != b.rows:
        raise ShapeMismatch(f"{a.rows}x{a.cols} @ {b.rows}x{b.cols}")
    if a.kind != b.kind:
        raise ShapeMismatch(f"cannot multiply {a.kind} by {b.kind}")
    add, mul, zero = _arith(a.kind, fmt)
    out = []
    for i in range(a.rows):
        row = []
        for j in range(b.cols):
            acc = None
            for k in range(a.cols):
                term = mul(a.data[i][k], b.data[k][j])
                acc = term if acc is None else add(acc, term)
            row.append(acc if acc is not None else zero())
        out.append(row)
    return BMat(out)


def row_sum_left(a: BMat, i: int, fmt=None):
    """Left fold of row i with rounding after every addition."""
    if not 0 <= i < a.rows:
        raise IndexOutOfRange(f"row {i} outside {a.rows}x{a.cols}")
    add, _, _ = _arith(a.kind, fmt)
    acc = None
    for v in a.data[i]:
        acc = v if acc is None else add(acc, v)
    return acc
