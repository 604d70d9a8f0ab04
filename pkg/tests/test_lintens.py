"""Bounded-precision matrix helpers built on the scalar kernels."""

import random
from fractions import Fraction

import pytest

import gridref
from eqattn.bitnum import (
    FpFormat,
    FxFormat,
    IndeterminateForm,
    fx_add,
    fx_mul,
    fx_round,
)
from eqattn.lintens import (
    BMat,
    IndexOutOfRange,
    ShapeMismatch,
    matmul_left,
    row_sum_left,
)


def random_matrix(rng, rows, cols, span=4):
    return [[Fraction(rng.randrange(-(1 << span), 1 << span),
                      1 << rng.randrange(3)) for _ in range(cols)]
            for _ in range(rows)]


class TestConstruction:
    def test_kinds_are_inferred(self):
        fmt = FxFormat(5)
        exact = BMat([[Fraction(1, 2), 2]])
        rounded = BMat.from_values([[Fraction(1, 2), 2]], fmt)
        assert exact.kind == "exact"
        assert rounded.kind == "fx"
        assert BMat.from_values([[1]], FpFormat(3, 3)).kind == "fp"

    def test_from_values_rounds_each_entry(self):
        fmt = FxFormat(3, rounding="trunc")
        mat = BMat.from_values([[Fraction(7, 3)]], fmt)
        assert mat.at(0, 0).as_fraction() == 2

    def test_shape_errors(self):
        with pytest.raises(ShapeMismatch):
            BMat([])
        with pytest.raises(ShapeMismatch):
            BMat([[1, 2], [3]])
        fmt = FxFormat(4)
        with pytest.raises(ShapeMismatch):
            BMat([[fx_round(1, fmt), Fraction(1)]])

    def test_indexing_bounds(self):
        mat = BMat([[1, 2], [3, 4]])
        assert mat.at(1, 0) == 3
        assert mat.row(1) == [3, 4]
        with pytest.raises(IndexOutOfRange):
            mat.at(2, 0)
        with pytest.raises(IndexOutOfRange):
            mat.row(-1)
        with pytest.raises(IndexOutOfRange):
            row_sum_left(mat, 5)


class TestExactMode:
    def test_matmul_matches_fraction_arithmetic(self):
        """With fmt None the product is plain rational linear algebra."""
        rng = random.Random(11)
        a_rows = random_matrix(rng, 3, 4)
        b_rows = random_matrix(rng, 4, 2)
        got = matmul_left(BMat(a_rows), BMat(b_rows))
        for i in range(3):
            for j in range(2):
                want = sum(a_rows[i][k] * b_rows[k][j] for k in range(4))
                assert got.at(i, j) == want

    def test_exact_mode_rejects_formats(self):
        with pytest.raises(ShapeMismatch):
            matmul_left(BMat([[1]]), BMat([[1]]), FxFormat(4))


class TestRoundedMode:
    def test_matmul_matches_scalar_loop(self):
        """Each output cell equals the hand-rolled fold: round every
        product, then add left to right with rounding after each step."""
        rng = random.Random(12)
        fmt = FxFormat(6)
        a_rows = random_matrix(rng, 2, 5, span=1)
        b_rows = random_matrix(rng, 5, 3, span=1)
        a = BMat.from_values(a_rows, fmt)
        b = BMat.from_values(b_rows, fmt)
        got = matmul_left(a, b, fmt)
        for i in range(2):
            for j in range(3):
                acc = None
                for k in range(5):
                    term = fx_mul(a.at(i, k), b.at(k, j), fmt)
                    acc = term if acc is None else fx_add(acc, term, fmt)
                assert got.at(i, j) == acc

    def test_matmul_shape_and_kind_errors(self):
        fmt = FxFormat(4)
        a = BMat.from_values([[1, 2]], fmt)
        with pytest.raises(ShapeMismatch):
            matmul_left(a, BMat.from_values([[1, 2]], fmt), fmt)
        with pytest.raises(ShapeMismatch):
            matmul_left(a, BMat([[1], [2]]), fmt)
        with pytest.raises(ShapeMismatch):
            matmul_left(a, BMat.from_values([[1], [2]], fmt), FpFormat(3, 3))

    def test_row_sum_matches_reference_fold(self):
        rng = random.Random(13)
        fmt = FxFormat(4)
        for _ in range(300):
            vals = [Fraction(rng.randrange(-40, 40), 4) for _ in range(6)]
            mat = BMat.from_values([vals], fmt)
            try:
                got = gridref.unwrap(row_sum_left(mat, 0, fmt))
            except IndeterminateForm:
                got = "indeterminate"
            want = gridref.fold_ref(
                vals, lambda v: gridref.fx_round_ref(v, fmt))
            assert got == want

    def test_order_dependence_is_visible(self):
        """Rounded row sums are order-sensitive: permuting a row can change
        the fold result, which exact arithmetic would never allow."""
        fmt = FxFormat(3, rounding="trunc", significand_override=3)
        fwd = BMat.from_values([[2, Fraction(5, 4), Fraction(7, 4)]], fmt)
        rev = BMat.from_values([[Fraction(7, 4), Fraction(5, 4), 2]], fmt)
        assert row_sum_left(fwd, 0, fmt).as_fraction() == 4
        assert row_sum_left(rev, 0, fmt).as_fraction() == 5
