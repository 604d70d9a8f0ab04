"""One-way communication protocols compiled from attention, plus the
counting arguments that lower-bound them.

The reduction: the bounded left fold decomposes at any prefix boundary, so
Alice (holding y) evaluates the fold over the construction's y-prefix and
sends the partial numerator and denominator as two p-bit scalars; Bob resumes
the folds over his tokens in ascending order and finishes the pipeline.  The
answer bit is identical to the single-machine forward pass by construction,
which the tests check pair-exhaustively at small m.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .attn import (
    LINEAR,
    SOFTMAX,
    TransformerSpec,
    _accept_bit,
    _ops,
    _wrap_exact,
    exp_logit_exact,
    finish_softmax,
    mlp_eval,
    token_logits,
)
from .bitnum import FpFormat, IndeterminateForm
from .constructs import EqInstance
from .oracle import BudgetExceeded


class SplitNotPrefix(ValueError):
    """Alice's token set must be a contiguous prefix of the fold order."""


@dataclass(frozen=True)
class ProtocolRun:
    """Transcript of one simulated protocol execution."""

    split: tuple
    l1: object
    l2: object
    bit_cost: int
    bob_bit: int


@dataclass(frozen=True)
class FoolingReport:
    m: int
    e: int
    enumerated: int
    formula: Fraction
    bound: int

    @property
    def formula_exact(self) -> bool:
        return self.enumerated == self.formula

    @property
    def formula_bound(self) -> int:
        """Bits implied by the closed form: the exact ceiling of its log2,
        computed on the rational value so fractional counts still give the
        least k with 2^k >= formula."""
        v = self.formula
        if v.denominator == 1:
            return max(int(v) - 1, 0).bit_length()
        k = v.numerator.bit_length() - v.denominator.bit_length() - 1
        while Fraction(2) ** k < v:
            k += 1
        return max(k, 0)


@dataclass(frozen=True)
class PigeonholeWitness:
    y1: str
    y2: str
    z: str


def _native_p(spec: TransformerSpec) -> int:
    fmt = spec.num_fmt
    return fmt.t + fmt.e if isinstance(fmt, FpFormat) else fmt.p


def default_split(spec: TransformerSpec) -> tuple:
    """The proofs' prefix: every token whose row depends only on y."""
    if spec.attention_kind == LINEAR:
        t = spec.num_fmt.t
        k = 2 * t
    elif spec.index_base == -1:
        k = spec.m + 2
    elif spec.index_base == 1:
        k = spec.m
    else:
        k = spec.m
    return tuple(range(spec.index_base, spec.index_base + k))


def _prefix_len(spec: TransformerSpec, s) -> int:
    idx = sorted(s)
    if not idx:
        raise SplitNotPrefix("Alice's token set is empty")
    want = list(range(spec.index_base, spec.index_base + len(idx)))
    if idx != want:
        raise SplitNotPrefix(
            f"{tuple(idx)} is not a contiguous prefix starting at token "
            f"{spec.index_base}; left-associative folds only decompose "
            "across a prefix boundary")
    if len(idx) > spec.n + 1:
        raise SplitNotPrefix("Alice's token set exceeds the sequence")
    return len(idx)


def run_protocol(spec: TransformerSpec, inst: EqInstance,
                 kind: str | None = None, s=None) -> ProtocolRun:
    """Simulate the one-way protocol and return its transcript.

    Alice evaluates the bounded folds over the prefix s (default: the
    construction's y-tokens), sends the partials; Bob resumes and answers.
    """
    if kind is None:
        kind = spec.attention_kind
    if kind != spec.attention_kind:
        raise ValueError(
            f"protocol kind {kind!r} does not match the spec's "
            f"{spec.attention_kind!r} attention")
    split = default_split(spec) if s is None else tuple(sorted(s))
    k = _prefix_len(spec, split)
    p = _native_p(spec)

    x = spec.encode(inst.y, inst.z)
    weights = [exp_logit_exact(lg) for lg in token_logits(spec, x)]
    add, mul, _, round_, num_cls = _ops(spec.fold_fmt)
    col, scale = spec.value_column()

    def num_fold(start, rows_weights):
        acc = start
        for w, row in rows_weights:
            term = round_(w * Fraction(row[col] or 0), spec.fold_fmt)
            acc = term if acc is None else add(acc, term, spec.fold_fmt)
        return acc

    def den_fold(start, ws):
        acc = start
        for w in ws:
            acc = round_(w, spec.den_fmt) if acc is None else \
                add(acc, _wrap_exact(w, spec.den_fmt), spec.den_fmt)
        return acc

    alice = list(zip(weights[:k], x[:k]))
    bob = list(zip(weights[k:], x[k:]))

    if kind == LINEAR:
        try:
            l2 = num_fold(None, alice)
            num = num_fold(l2, bob)
            num = mul(num, _wrap_exact(scale, spec.num_fmt), spec.num_fmt)
            sa = round_(num, spec.out_fmt) if num.is_finite else \
                num_cls.inf(num.sign, spec.out_fmt)
            out, _ = mlp_eval(spec.mlp, sa, spec.out_fmt)
            bit = _accept_bit(out)
        except IndeterminateForm:
            l2, bit = None, 0
        return ProtocolRun(split=split, l1=None, l2=l2, bit_cost=p,
                           bob_bit=bit)

    try:
        l2 = num_fold(None, alice)
        l1 = den_fold(None, [w for w, _ in alice])
    except IndeterminateForm:
        return ProtocolRun(split=split, l1=None, l2=None, bit_cost=2 * p,
                           bob_bit=0)
    try:
        num = num_fold(l2, bob)
        num = mul(num, _wrap_exact(scale, spec.num_fmt), spec.num_fmt)
        den = den_fold(l1, [w for w, _ in bob])
        bit = finish_softmax(spec, num, den)[0]
    except IndeterminateForm:
        bit = 0
    return ProtocolRun(split=split, l1=l1, l2=l2, bit_cost=2 * p,
                       bob_bit=bit)


def enumerate_fooling(m: int, e: int) -> FoolingReport:
    """Count the promise-valid fooling strings and compare to the closed
    formula 3*2^(m-2)*(1-2^-e).

    The set is every x whose exponent field x_{2:e+1} is nonzero and whose
    tail x_{m-1}x_m is not 10; each (x, x) is then a legal YES instance and
    any two of them are separated by the cross pair.  The closed formula
    counts the same set whenever the three bit windows (exponent field,
    free middle, tail) are disjoint, i.e. e <= m-3; at e = m-2 and e = m-1
    the windows overlap and the true count is smaller.
    """
    if not 1 < e < m:
        raise ValueError(f"need 1 < e < m, got e={e}, m={m}")
    if m > 24:
        raise BudgetExceeded(f"2^{m} strings is past the m <= 24 budget")
    count = 0
    for v in range(1 << m):
        x = format(v, f"0{m}b")
        if x[1:e + 1] == "0" * e:
            continue
        if x[m - 2] + x[m - 1] == "10":
            continue
        count += 1
    formula = 3 * Fraction(1 << (m - 2)) * (1 - Fraction(1, 1 << e))
    bound = (count - 1).bit_length()
    return FoolingReport(m=m, e=e, enumerated=count, formula=formula,
                         bound=bound)


def verify_pigeonhole(m: int, message=None) -> PigeonholeWitness | None:
    """Find two y-strings with the same sub-m-bit message and a z telling
    them apart, demonstrating the counting core of the lower bound.

    The default message truncates y to its first m-1 bits.  Returns None
    when the message function is injective (pigeonhole vacuous).
    """
    if m > 20:
        raise BudgetExceeded(f"2^{m} strings is past the m <= 20 budget")
    if message is None:
        def message(y):
            return y[:m - 1]
    seen = {}
    for v in range(1 << m):
        y = format(v, f"0{m}b")
        msg = message(y)
        if msg in seen:
            return PigeonholeWitness(y1=seen[msg], y2=y, z=y)
        seen[msg] = y
    return None
