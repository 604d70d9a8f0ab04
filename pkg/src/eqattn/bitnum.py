"""Exact saturating fixed-point and floating-point scalars.

Values are stored as sign * sig * 2**exp2 with an odd significand, so every
operation is computed exactly over the integers (or rationals, for division)
and rounded once into the requested format.  Out-of-range magnitudes saturate
to +/-Inf; magnitudes that round to no nonzero representable value become
exact zero.  There are no NaNs: indeterminate forms raise.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

NEAREST = "nearest"
TRUNC = "trunc"

_FINITE = "finite"
_POS_INF = "pinf"
_NEG_INF = "ninf"
_ZERO = "zero"


class IndeterminateForm(ArithmeticError):
    """Raised for Inf - Inf, 0 * Inf, 0 / 0 and Inf / Inf."""


class NonDyadicLogit(ValueError):
    """Raised when exponentiating a logit whose coefficient is not an integer."""


class InvalidFormat(ValueError):
    pass


@dataclass(frozen=True)
class FxFormat:
    """Fixed-point format: p bits total, one of them sign.

    The remaining budget B = p - 1 is split freely between integer and
    fraction bits, so the representable magnitudes are exactly the
    u * scale with u a dyadic needing at most B positional bits.
    significand_override replaces B for reproducing textbook walkthroughs
    whose budgets count p bits instead of p - 1.
    """

    p: int
    scale_log2: int = 0
    rounding: str = NEAREST
    significand_override: int | None = None

    def __post_init__(self):
        if self.p < 2:
            raise InvalidFormat(f"p must be at least 2, got {self.p}")
        if self.rounding not in (NEAREST, TRUNC):
            raise InvalidFormat(f"unknown rounding policy {self.rounding!r}")
        if self.significand_override is not None and self.significand_override < 1:
            raise InvalidFormat("significand_override must be positive")

    @property
    def budget(self) -> int:
        if self.significand_override is not None:
            return self.significand_override
        return self.p - 1

    @property
    def scale(self) -> Fraction:
        return _pow2(self.scale_log2)

    def max_magnitude(self) -> Fraction:
        return ((1 << self.budget) - 1) * self.scale

    def descriptor(self) -> str:
        return f"fx:p={self.p},scale=2^{self.scale_log2},round={self.rounding}"


@dataclass(frozen=True)
class FpFormat:
    """Floating-point format: t significand bits (1.a with |a| = t - 1) and
    e exponent bits giving |exponent| <= q = 2**(e-1) - 1.  No subnormals;
    zero is its own class."""

    t: int
    e: int
    rounding: str = NEAREST

    def __post_init__(self):
        if self.t < 1:
            raise InvalidFormat(f"t must be at least 1, got {self.t}")
        if self.e < 2:
            raise InvalidFormat(f"e must be at least 2, got {self.e}")
        if self.rounding not in (NEAREST, TRUNC):
            raise InvalidFormat(f"unknown rounding policy {self.rounding!r}")

    @property
    def q(self) -> int:
        return (1 << (self.e - 1)) - 1

    def max_magnitude(self) -> Fraction:
        return (2 - _pow2(1 - self.t)) * _pow2(self.q)

    def min_positive(self) -> Fraction:
        return _pow2(-self.q)

    def descriptor(self) -> str:
        return f"fp:t={self.t},e={self.e},round={self.rounding}"


def parse_format(text: str) -> FxFormat | FpFormat:
    """Inverse of FxFormat.descriptor / FpFormat.descriptor."""
    try:
        kind, _, body = text.partition(":")
        fields = dict(item.split("=", 1) for item in body.split(","))
        if kind == "fx":
            scale = fields["scale"]
            if not scale.startswith("2^"):
                raise ValueError(scale)
            return FxFormat(int(fields["p"]), int(scale[2:]), fields["round"])
        if kind == "fp":
            return FpFormat(int(fields["t"]), int(fields["e"]), fields["round"])
    except InvalidFormat:
        raise
    except Exception as exc:
        raise InvalidFormat(f"bad format descriptor {text!r}") from exc
    raise InvalidFormat(f"bad format descriptor {text!r}")


def _pow2(k: int) -> Fraction:
    return Fraction(1 << k) if k >= 0 else Fraction(1, 1 << -k)


def _canon(sig: int, exp2: int) -> tuple[int, int]:
    if sig == 0:
        return 0, 0
    shift = (sig & -sig).bit_length() - 1
    return sig >> shift, exp2 + shift


def _nbits(sig: int, e: int) -> int:
    """Positional bits needed for the dyadic sig * 2**e with sig odd."""
    return max(sig.bit_length() + e, 0) - min(e, 0)


def _quantize(sig: int, exp2: int, lsb: int, rounding: str) -> tuple[int, bool]:
    """Round sig * 2**exp2 (sig > 0) to a multiple of 2**lsb.

    Returns (multiple, exact).  Nearest resolves ties toward zero.
    """
    shift = exp2 - lsb
    if shift >= 0:
        return sig << shift, True
    q = sig >> -shift
    rem = sig & ((1 << -shift) - 1)
    if rem == 0:
        return q, True
    if rounding == NEAREST and rem > (1 << (-shift - 1)):
        q += 1
    return q, False


def _ratio_floor_log2(n: int, d: int) -> int:
    """floor(log2(n / d)) for positive integers."""
    x = n.bit_length() - d.bit_length()
    if (n << max(0, -x)) < (d << max(0, x)):
        x -= 1
    return x


class FxNum:
    """A value held in (or saturated out of) a fixed-point format."""

    __slots__ = ("fmt", "kind", "sign", "sig", "exp2", "inexact")

    def __init__(self, fmt, kind, sign, sig, exp2, inexact=False):
        self.fmt = fmt
        self.kind = kind
        self.sign = sign
        self.sig = sig
        self.exp2 = exp2
        self.inexact = inexact

    @classmethod
    def zero(cls, fmt: FxFormat, inexact: bool = False) -> "FxNum":
        return cls(fmt, _FINITE, 1, 0, 0, inexact)

    @classmethod
    def inf(cls, sign: int, fmt: FxFormat) -> "FxNum":
        return cls(fmt, _POS_INF if sign > 0 else _NEG_INF, sign, 0, 0, True)

    @property
    def is_finite(self) -> bool:
        return self.kind == _FINITE

    @property
    def is_inf(self) -> bool:
        return self.kind in (_POS_INF, _NEG_INF)

    @property
    def is_zero(self) -> bool:
        return self.kind == _FINITE and self.sig == 0

    def as_fraction(self) -> Fraction:
        if not self.is_finite:
            raise ValueError("infinity has no rational value")
        return self.sign * self.sig * _pow2(self.exp2)

    def __eq__(self, other):
        if not isinstance(other, FxNum):
            return NotImplemented
        return (self.kind, self.sign * bool(self.sig or self.is_inf),
                self.sig, self.exp2) == \
               (other.kind, other.sign * bool(other.sig or other.is_inf),
                other.sig, other.exp2)

    def __hash__(self):
        return hash((self.kind, self.sign * bool(self.sig or self.is_inf),
                     self.sig, self.exp2))

    def __repr__(self):
        return f"FxNum({encode_scalar(self)})"


class FpNum:
    """A value held in (or saturated out of) a floating-point format."""

    __slots__ = ("fmt", "kind", "sign", "sig", "exp2", "inexact")

    def __init__(self, fmt, kind, sign, sig, exp2, inexact=False):
        self.fmt = fmt
        self.kind = kind
        self.sign = sign
        self.sig = sig
        self.exp2 = exp2
        self.inexact = inexact

    @classmethod
    def zero(cls, fmt: FpFormat, inexact: bool = False) -> "FpNum":
        return cls(fmt, _ZERO, 1, 0, 0, inexact)

    @classmethod
    def inf(cls, sign: int, fmt: FpFormat) -> "FpNum":
        return cls(fmt, _POS_INF if sign > 0 else _NEG_INF, sign, 0, 0, True)

    @property
    def is_finite(self) -> bool:
        return self.kind in (_FINITE, _ZERO)

    @property
    def is_inf(self) -> bool:
        return self.kind in (_POS_INF, _NEG_INF)

    @property
    def is_zero(self) -> bool:
        return self.kind == _ZERO

    def as_fraction(self) -> Fraction:
        if not self.is_finite:
            raise ValueError("infinity has no rational value")
        if self.kind == _ZERO:
            return Fraction(0)
        return self.sign * self.sig * _pow2(self.exp2)

    def __eq__(self, other):
        if not isinstance(other, FpNum):
            return NotImplemented
        return (self.kind, self.sign if self.kind != _ZERO else 1,
                self.sig, self.exp2) == \
               (other.kind, other.sign if other.kind != _ZERO else 1,
                other.sig, other.exp2)

    def __hash__(self):
        return hash((self.kind, self.sign if self.kind != _ZERO else 1,
                     self.sig, self.exp2))

    def __repr__(self):
        return f"FpNum({encode_scalar(self)})"


def _fx_round_dyadic(sign: int, sig: int, exp2: int, fmt: FxFormat) -> FxNum:
    if sig == 0:
        return FxNum.zero(fmt)
    rel = exp2 - fmt.scale_log2
    budget = fmt.budget
    octave = sig.bit_length() + rel
    if octave > budget:
        return FxNum.inf(sign, fmt)
    lsb = max(octave, 0) - budget
    q, exact = _quantize(sig, rel, lsb, fmt.rounding)
    if q == 0:
        return FxNum.zero(fmt, inexact=True)
    if _nbits(*_canon(q, lsb)) > budget:
        return FxNum.inf(sign, fmt)
    q, lsb = _canon(q, lsb)
    return FxNum(fmt, _FINITE, sign, q, lsb + fmt.scale_log2, not exact)


def _fx_round_rational(sign: int, n: int, d: int, fmt: FxFormat) -> FxNum:
    """Round the positive rational n/d (already in scale units) into fmt."""
    budget = fmt.budget
    octave = _ratio_floor_log2(n, d) + 1
    if octave > budget:
        return FxNum.inf(sign, fmt)
    lsb = max(octave, 0) - budget
    q, r = divmod(n << max(0, -lsb), d << max(0, lsb))
    if r and fmt.rounding == NEAREST and 2 * r > (d << max(0, lsb)):
        q += 1
    if q == 0:
        return FxNum.zero(fmt, inexact=True)
    if _nbits(*_canon(q, lsb)) > budget:
        return FxNum.inf(sign, fmt)
    q, lsb = _canon(q, lsb)
    return FxNum(fmt, _FINITE, sign, q, lsb + fmt.scale_log2, r != 0)


def _fp_round_dyadic(sign: int, sig: int, exp2: int, fmt: FpFormat) -> FpNum:
    if sig == 0:
        return FpNum.zero(fmt)
    msb = sig.bit_length() - 1 + exp2
    lsb = msb - (fmt.t - 1)
    q, exact = _quantize(sig, exp2, lsb, fmt.rounding)
    msb = q.bit_length() - 1 + lsb
    if msb > fmt.q:
        return FpNum.inf(sign, fmt)
    if msb < -fmt.q:
        return FpNum.zero(fmt, inexact=True)
    q, lsb = _canon(q, lsb)
    return FpNum(fmt, _FINITE, sign, q, lsb, not exact)


def _fp_round_rational(sign: int, n: int, d: int, fmt: FpFormat) -> FpNum:
    msb = _ratio_floor_log2(n, d)
    lsb = msb - (fmt.t - 1)
    q, r = divmod(n << max(0, -lsb), d << max(0, lsb))
    if r and fmt.rounding == NEAREST and 2 * r > (d << max(0, lsb)):
        q += 1
    msb = q.bit_length() - 1 + lsb
    if msb > fmt.q:
        return FpNum.inf(sign, fmt)
    if msb < -fmt.q:
        return FpNum.zero(fmt, inexact=True)
    q, lsb = _canon(q, lsb)
    return FpNum(fmt, _FINITE, sign, q, lsb, r != 0)


def _to_sig_exp(value) -> tuple[int, int, int]:
    """Decompose an exact dyadic value into (sign, odd sig, exp2)."""
    if isinstance(value, (FxNum, FpNum)):
        if not value.is_finite:
            raise ValueError("cannot decompose an infinity")
        return value.sign, value.sig, value.exp2
    fr = Fraction(value)
    d = fr.denominator
    if d & (d - 1):
        raise ValueError(f"{value} is not dyadic")
    sign = 1 if fr >= 0 else -1
    sig, exp2 = _canon(abs(fr.numerator), -(d.bit_length() - 1))
    return sign, sig, exp2


def fx_round(value, fmt: FxFormat) -> FxNum:
    """Round an exact value (Fraction, int, FxNum or FpNum) into fmt."""
    if isinstance(value, (FxNum, FpNum)) and value.is_inf:
        return FxNum.inf(value.sign, fmt)
    if isinstance(value, Fraction) and (value.denominator & (value.denominator - 1)):
        sign = 1 if value >= 0 else -1
        n, d = abs(value.numerator), value.denominator
        if n == 0:
            return FxNum.zero(fmt)
        k = fmt.scale_log2
        n, d = n << max(0, -k), d << max(0, k)
        return _fx_round_rational(sign, n, d, fmt)
    sign, sig, exp2 = _to_sig_exp(value)
    return _fx_round_dyadic(sign, sig, exp2, fmt)


def fp_round(value, fmt: FpFormat) -> FpNum:
    """Round an exact value (Fraction, int, FxNum or FpNum) into fmt."""
    if isinstance(value, (FxNum, FpNum)) and value.is_inf:
        return FpNum.inf(value.sign, fmt)
    if isinstance(value, Fraction) and (value.denominator & (value.denominator - 1)):
        sign = 1 if value >= 0 else -1
        n, d = abs(value.numerator), value.denominator
        if n == 0:
            return FpNum.zero(fmt)
        return _fp_round_rational(sign, n, d, fmt)
    sign, sig, exp2 = _to_sig_exp(value)
    return _fp_round_dyadic(sign, sig, exp2, fmt)


def fx_representable(value, fmt: FxFormat) -> bool:
    sign, sig, exp2 = _to_sig_exp(value)
    if sig == 0:
        return True
    return _nbits(sig, exp2 - fmt.scale_log2) <= fmt.budget


def fp_representable(value, fmt: FpFormat) -> bool:
    sign, sig, exp2 = _to_sig_exp(value)
    if sig == 0:
        return True
    if sig.bit_length() > fmt.t:
        return False
    return abs(sig.bit_length() - 1 + exp2) <= fmt.q


def _add_exact(a, b) -> tuple[int, int, int]:
    """Exact sum of two finite numbers as (sign, sig, exp2)."""
    if a.sig == 0 or a.kind == _ZERO:
        return b.sign, b.sig, b.exp2
    if b.sig == 0 or b.kind == _ZERO:
        return a.sign, a.sig, a.exp2
    e = min(a.exp2, b.exp2)
    total = a.sign * (a.sig << (a.exp2 - e)) + b.sign * (b.sig << (b.exp2 - e))
    sign = 1 if total >= 0 else -1
    sig, e = _canon(abs(total), e)
    return sign, sig, e


def _neg(x):
    if x.is_inf:
        return type(x).inf(-x.sign, x.fmt)
    return type(x)(x.fmt, x.kind, -x.sign, x.sig, x.exp2, x.inexact)


def _add(a, b, fmt, rounder, make_inf):
    if a.is_inf or b.is_inf:
        if a.is_inf and b.is_inf:
            if a.sign != b.sign:
                raise IndeterminateForm("Inf - Inf")
            return make_inf(a.sign, fmt)
        src = a if a.is_inf else b
        return make_inf(src.sign, fmt)
    sign, sig, exp2 = _add_exact(a, b)
    return rounder(sign, sig, exp2, fmt)


def _mul(a, b, fmt, rounder, make_inf):
    if a.is_inf or b.is_inf:
        other = b if a.is_inf else a
        if other.is_finite and (other.sig == 0 or other.kind == _ZERO):
            raise IndeterminateForm("0 * Inf")
        return make_inf(a.sign * b.sign, fmt)
    return rounder(a.sign * b.sign, a.sig * b.sig, a.exp2 + b.exp2, fmt)


def fx_add(a: FxNum, b: FxNum, fmt: FxFormat) -> FxNum:
    return _add(a, b, fmt, _fx_round_dyadic, FxNum.inf)


def fx_sub(a: FxNum, b: FxNum, fmt: FxFormat) -> FxNum:
    return fx_add(a, _neg(b), fmt)


def fx_mul(a: FxNum, b: FxNum, fmt: FxFormat) -> FxNum:
    return _mul(a, b, fmt, _fx_round_dyadic, FxNum.inf)


def fx_div(a: FxNum, b: FxNum, fmt: FxFormat) -> FxNum:
    if a.is_inf and b.is_inf:
        raise IndeterminateForm("Inf / Inf")
    if b.is_finite and b.sig == 0:
        if a.is_finite and a.sig == 0:
            raise IndeterminateForm("0 / 0")
        return FxNum.inf(a.sign, fmt)
    if a.is_inf:
        return FxNum.inf(a.sign * b.sign, fmt)
    if b.is_inf or a.sig == 0:
        return FxNum.zero(fmt)
    e = a.exp2 - b.exp2 - fmt.scale_log2
    n = a.sig << max(0, e)
    d = b.sig << max(0, -e)
    return _fx_round_rational(a.sign * b.sign, n, d, fmt)


def fx_sum_left(values, fmt: FxFormat) -> FxNum:
    """Left-associative fold with rounding after every addition."""
    acc = None
    for v in values:
        num = v if isinstance(v, FxNum) else fx_round(v, fmt)
        acc = num if acc is None else fx_add(acc, num, fmt)
    return acc if acc is not None else FxNum.zero(fmt)


def fp_add(a: FpNum, b: FpNum, fmt: FpFormat) -> FpNum:
    return _add(a, b, fmt, _fp_round_dyadic, FpNum.inf)


def fp_sub(a: FpNum, b: FpNum, fmt: FpFormat) -> FpNum:
    return fp_add(a, _neg(b), fmt)


def fp_mul(a: FpNum, b: FpNum, fmt: FpFormat) -> FpNum:
    return _mul(a, b, fmt, _fp_round_dyadic, FpNum.inf)


def fp_div(a: FpNum, b: FpNum, fmt: FpFormat) -> FpNum:
    if a.is_inf and b.is_inf:
        raise IndeterminateForm("Inf / Inf")
    if b.is_finite and (b.kind == _ZERO or b.sig == 0):
        if a.is_finite and (a.kind == _ZERO or a.sig == 0):
            raise IndeterminateForm("0 / 0")
        return FpNum.inf(a.sign, fmt)
    if a.is_inf:
        return FpNum.inf(a.sign * b.sign, fmt)
    if b.is_inf or a.kind == _ZERO or a.sig == 0:
        return FpNum.zero(fmt)
    e = a.exp2 - b.exp2
    n = a.sig << max(0, e)
    d = b.sig << max(0, -e)
    return _fp_round_rational(a.sign * b.sign, n, d, fmt)


def fp_sum_left(values, fmt: FpFormat) -> FpNum:
    it = iter(values)
    acc = None
    for v in it:
        num = v if isinstance(v, FpNum) else fp_round(v, fmt)
        acc = num if acc is None else fp_add(acc, num, fmt)
    return acc if acc is not None else FpNum.zero(fmt)


NEG_LARGE = object()


@dataclass(frozen=True)
class Logit:
    """An attention logit, held as the exact coefficient of ln 2.

    coeff is a Fraction, or None for the "minus large constant" sentinel
    whose exponential is exactly zero.
    """

    coeff: Fraction | None

    @classmethod
    def of(cls, value) -> "Logit":
        return cls(Fraction(value))

    @classmethod
    def neg_large(cls) -> "Logit":
        return cls(None)

    @property
    def is_neg_large(self) -> bool:
        return self.coeff is None


def exp_logit(logit: Logit, fmt: FxFormat | FpFormat):
    """2 ** coeff rounded into fmt; the neg-large sentinel gives exact zero."""
    zero = FxNum.zero if isinstance(fmt, FxFormat) else FpNum.zero
    if logit.is_neg_large:
        return zero(fmt)
    if logit.coeff.denominator != 1:
        raise NonDyadicLogit(f"logit coefficient {logit.coeff} is not an integer")
    k = int(logit.coeff)
    if isinstance(fmt, FxFormat):
        return _fx_round_dyadic(1, 1, k, fmt)
    return _fp_round_dyadic(1, 1, k, fmt)


def exp_logit_exact(logit: Logit) -> Fraction:
    """2 ** coeff as an exact rational (zero for the sentinel)."""
    if logit.is_neg_large:
        return Fraction(0)
    if logit.coeff.denominator != 1:
        raise NonDyadicLogit(f"logit coefficient {logit.coeff} is not an integer")
    return _pow2(int(logit.coeff))


def encode_scalar(value) -> str:
    """Render a value as +<int>/2^<k>, -<int>/2^<k>, 0, +inf or -inf."""
    if isinstance(value, (FxNum, FpNum)):
        if value.kind == _POS_INF:
            return "+inf"
        if value.kind == _NEG_INF:
            return "-inf"
        value = value.as_fraction()
    fr = Fraction(value)
    if fr == 0:
        return "0"
    d = fr.denominator
    if d & (d - 1):
        raise ValueError(f"{value} is not dyadic")
    sign = "+" if fr > 0 else "-"
    return f"{sign}{abs(fr.numerator)}/2^{d.bit_length() - 1}"


def decode_scalar(text: str) -> Fraction | float:
    """Inverse of encode_scalar; infinities come back as float inf."""
    if text == "0":
        return Fraction(0)
    if text == "+inf":
        return float("inf")
    if text == "-inf":
        return float("-inf")
    try:
        sign = {"+": 1, "-": -1}[text[0]]
        n, _, k = text[1:].partition("/2^")
        return Fraction(sign * int(n), 1 << int(k))
    except Exception as exc:
        raise ValueError(f"bad scalar encoding {text!r}") from exc
