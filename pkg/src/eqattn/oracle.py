"""Exact-rational reference evaluation and construction verification.

Verification enumerates (or samples) promise-satisfying pairs, runs the
bounded-precision forward pass, and compares the answer bit against string
equality.  For the fixed-point constructions the numerator provably depends
only on first-half bits and the denominator only on second-half bits, so the
exhaustive verifier builds one table per half-space and combines them by
bucketing distinct fold values; this cuts the m=13 run from 3.4e7 forward
passes to a few thousand plus a cheap cross product.  Every reported failure
is re-evaluated with a direct forward pass before it is believed.
"""

from __future__ import annotations

import bisect
import random
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction

from .attn import (
    LINEAR,
    TransformerSpec,
    _ops,
    _wrap_exact,
    exp_logit_exact,
    finish_softmax,
    forward,
    token_logits,
)
from .bitnum import FpFormat, FxFormat, IndeterminateForm
from .constructs import (
    CONSTRUCTIONS,
    EqInstance,
    PromiseSet,
    T0,
    T1,
    _assert_half_split,
    half_len,
    make,
    native_precision,
)

PAIR_CAP_DEFAULT = 10 ** 8


class BudgetExceeded(RuntimeError):
    """The instance space is too large for exhaustive enumeration."""


def eq_truth(inst: EqInstance) -> int:
    """Ground truth: 1 iff the two strings are identical."""
    return int(inst.y == inst.z)


@dataclass
class ExactTrace:
    """Unbounded-precision evaluation of a spec on one token sequence."""

    weights: list
    numerator: Fraction
    denominator: Fraction | None
    sa: Fraction | None
    output: Fraction | None
    bit: int
    zero_division: bool = False


def exact_forward(spec: TransformerSpec, x) -> ExactTrace:
    """The attention pipeline over exact rationals with no rounding.

    Sentinel logits contribute exactly zero weight.  Division by an exactly
    zero denominator is reported on the trace rather than raised.
    """
    logits = token_logits(spec, x)
    weights = [exp_logit_exact(lg) for lg in logits]
    col, scale = spec.value_column()
    num = sum((w * Fraction(row[col] or 0) for w, row in zip(weights, x)),
              Fraction(0)) * scale
    if spec.attention_kind == LINEAR:
        den = None
        sa = num
    else:
        den = sum(weights, Fraction(0))
        if den == 0:
            return ExactTrace(weights, num, den, None, None, 0,
                              zero_division=True)
        sa = num / den
    hidden = [max(Fraction(0), sa * Fraction(w) + Fraction(b))
              for w, b in zip(spec.mlp.w1, spec.mlp.b1)]
    out = sum((h * Fraction(w) for h, w in zip(hidden, spec.mlp.w2)),
              Fraction(spec.mlp.b2))
    out = max(Fraction(0), out)
    return ExactTrace(weights, num, den, sa, out, int(out == 1))


def precision_delta_spec(spec: TransformerSpec, delta: int) -> TransformerSpec:
    """The same spec with every stage format's bit budget moved by delta.

    Fixed-point stages change p, floating-point stages change the mantissa
    budget t; scales and exponent budgets stay put.  Weights are untouched.
    """
    if delta == 0:
        return spec

    def shift(fmt):
        if isinstance(fmt, FxFormat):
            return FxFormat(fmt.p + delta, fmt.scale_log2, fmt.rounding)
        return FpFormat(fmt.t + delta, fmt.e, fmt.rounding)

    return replace(
        spec,
        fold_fmt=shift(spec.fold_fmt), num_fmt=shift(spec.num_fmt),
        den_fmt=shift(spec.den_fmt), out_fmt=shift(spec.out_fmt),
    )


def _fmt_scalar(v) -> str:
    if v is None:
        return "?"
    if getattr(v, "is_inf", False):
        return "inf" if v.sign > 0 else "-inf"
    if hasattr(v, "as_fraction"):
        v = v.as_fraction()
    return str(v)


def _digest(trace) -> str:
    parts = [f"num={_fmt_scalar(trace.numerator)}"]
    if trace.denominator is not None:
        parts.append(f"den={_fmt_scalar(trace.denominator)}")
    if getattr(trace, "indeterminate", False):
        parts.append("sa=indeterminate")
    else:
        parts.append(f"sa={_fmt_scalar(trace.sa)}")
    parts.append(f"out={_fmt_scalar(trace.output)}")
    return ";".join(parts)


@dataclass(frozen=True)
class Failure:
    y: str
    z: str
    expected: int
    got: int
    digest: str


@dataclass(frozen=True)
class VerifyReport:
    """Outcome of one verification run."""

    construction: str
    m: int
    t: int | None
    e: int | None
    p: int
    mode: str
    total: int
    failure_count: int
    failures: tuple
    seconds: float
    inf_count: int = 0

    @property
    def passed(self) -> bool:
        return self.failure_count == 0

    def render_lines(self, limit: int = 10) -> list[str]:
        head = (f"{self.construction} m={self.m}"
                + (f" t={self.t} e={self.e}" if self.t is not None else "")
                + f" p={self.p} [{self.mode}]")
        lines = [f"{head}: {self.total} pairs, "
                 f"{self.failure_count} failures, {self.seconds:.3f}s"]
        for f in self.failures[:limit]:
            lines.append(f"  y={f.y} z={f.z} expected={f.expected} "
                         f"got={f.got} {f.digest}")
        if self.failure_count > len(self.failures):
            lines.append(f"  ... ({self.failure_count} total, "
                         f"{len(self.failures)} listed)")
        return lines


CSV_HEADER = "construction,m,t,e,p,total,failures,seconds"


def to_csv(reports, timing: bool = False) -> str:
    """CSV report; wall time is zeroed unless timing is requested so that
    repeated runs with one seed stay byte-identical."""
    rows = [CSV_HEADER]
    for r in reports:
        rows.append(",".join([
            r.construction, str(r.m),
            "" if r.t is None else str(r.t),
            "" if r.e is None else str(r.e),
            str(r.p), str(r.total), str(r.failure_count),
            f"{r.seconds:.3f}" if timing else "0.000",
        ]))
    return "\n".join(rows) + "\n"


FAILURE_LIST_CAP = 32


class _Collector:
    """Accumulates failures with an exact count and a capped listing."""

    def __init__(self, spec):
        self.spec = spec
        self.count = 0
        self.listed = []

    def add(self, y, z, expected, got, trace=None):
        self.count += 1
        if len(self.listed) < FAILURE_LIST_CAP:
            if trace is None:
                trace = forward(self.spec, self.spec.encode(y, z))
            self.listed.append(
                Failure(y, z, expected, got, _digest(trace)))

    def merged(self):
        return tuple(sorted(self.listed, key=lambda f: (f.y, f.z)))


def _bits(v: int, width: int) -> str:
    return format(v, f"0{width}b")


def _value_inf(v) -> bool:
    return v is not None and v.is_inf


def trace_saturated(trace) -> bool:
    """Whether the run saturated anywhere or hit an indeterminate form."""
    if getattr(trace, "indeterminate", False):
        return True
    return any(_value_inf(v) for v in (trace.numerator, trace.denominator,
                                       trace.sa, trace.output))


def _eval_pairs(spec, pairs):
    """Worker: evaluate (y, z) pairs; returns (count, failures, inf count)."""
    out = []
    n = 0
    inf_n = 0
    for y, z in pairs:
        n += 1
        trace = forward(spec, spec.encode(y, z))
        inf_n += trace_saturated(trace)
        expected = int(y == z)
        if trace.bit != expected:
            out.append((y, z, expected, trace.bit, _digest(trace)))
    return n, out, inf_n


def _chunks(seq, k):
    k = max(1, k)
    step = max(1, (len(seq) + k - 1) // k)
    return [seq[i:i + step] for i in range(0, len(seq), step)]


def _direct_exhaustive(spec, promises, cap, jobs):
    m = spec.m
    ys = [_bits(v, m) for v in range(1 << m)]
    y_side = [y for y in ys if promises.y_ok(y)]
    z_sorted = sorted(z for z in ys if promises.z_ok(z))
    starts = [bisect.bisect_left(z_sorted, y) for y in y_side]
    expected = sum(len(z_sorted) - s for s in starts)
    if expected > cap:
        raise BudgetExceeded(
            f"{expected} promise pairs exceed the cap of {cap}")
    pairs = [(y, z) for y, s in zip(y_side, starts)
             for z in z_sorted[s:]]
    coll = _Collector(spec)
    total = 0
    inf_total = 0
    if jobs > 1 and len(pairs) > 1024:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(
                _eval_pairs, [spec] * jobs, _chunks(pairs, jobs)))
    else:
        results = [_eval_pairs(spec, pairs)]
    for n, fails, inf_n in results:
        total += n
        inf_total += inf_n
        for y, z, expected, got, digest in fails:
            coll.count += 1
            if len(coll.listed) < FAILURE_LIST_CAP:
                coll.listed.append(Failure(y, z, expected, got, digest))
    return total, coll, inf_total


_NAN = "nan"


def _num_fold(spec, x):
    """The rounded numerator fold alone; _NAN when it hits Inf - Inf."""
    add, mul, _, round_, _ = _ops(spec.fold_fmt)
    col, scale = spec.value_column()
    weights = [exp_logit_exact(lg) for lg in token_logits(spec, x)]
    num = None
    try:
        for w, row in zip(weights, x):
            term = round_(w * Fraction(row[col] or 0), spec.fold_fmt)
            num = term if num is None else add(num, term, spec.fold_fmt)
        return mul(num, _wrap_exact(scale, spec.num_fmt), spec.num_fmt)
    except IndeterminateForm:
        return _NAN


def _den_fold(spec, x):
    """The rounded denominator fold alone; _NAN on an indeterminate step."""
    add, _, _, round_, _ = _ops(spec.den_fmt)
    weights = [exp_logit_exact(lg) for lg in token_logits(spec, x)]
    den = None
    try:
        for w in weights:
            den = round_(w, spec.den_fmt) if den is None else \
                add(den, _wrap_exact(w, spec.den_fmt), spec.den_fmt)
        return den
    except IndeterminateForm:
        return _NAN


def _half_tables(spec, first, second):
    """Numerator values over first-half pairs and denominator values over
    second-half pairs, bucketed by distinct fold value and order relation."""
    num_buckets = {}
    pad = "0" * second
    for a in range(1 << first):
        ya = _bits(a, first)
        for b in range(a, 1 << first):
            num = _num_fold(spec, spec.encode(ya + pad, _bits(b, first) + pad))
            key = (num, "eq" if a == b else "lt")
            cnt, examples = num_buckets.setdefault(key, [0, []])
            num_buckets[key][0] = cnt + 1
            if len(examples) < FAILURE_LIST_CAP:
                examples.append((a, b))
    den_buckets = {}
    lead = "0" * first
    for c in range(1 << second):
        zc = _bits(c, second)
        for d in range(1 << second):
            den = _den_fold(spec, spec.encode(lead + zc, lead + _bits(d, second)))
            rel = "eq" if c == d else ("lt" if c < d else "gt")
            key = (den, rel)
            cnt, examples = den_buckets.setdefault(key, [0, []])
            den_buckets[key][0] = cnt + 1
            if len(examples) < FAILURE_LIST_CAP:
                examples.append((c, d))
    return num_buckets, den_buckets


def _factored_exhaustive(spec, cap, rng):
    """Exhaustive verification using the half-split structure.

    Returns (total, collector).  A random sample of combined verdicts is
    re-checked against direct forward passes, as is every failure.
    """
    m = spec.m
    first = half_len(m)
    second = m - first
    _assert_half_split(spec, first)
    expected_total = (1 << (m - 1)) * ((1 << m) + 1)
    if expected_total > cap:
        raise BudgetExceeded(
            f"{expected_total} promise pairs exceed the cap of {cap}")
    num_buckets, den_buckets = _half_tables(spec, first, second)

    coll = _Collector(spec)
    total = 0
    inf_total = 0
    for (num, rel1), (cnt1, ex1) in num_buckets.items():
        for (den, rel2), (cnt2, ex2) in den_buckets.items():
            if rel1 == "eq" and rel2 == "gt":
                continue  # would violate y <= z
            expected = 1 if (rel1, rel2) == ("eq", "eq") else 0
            if num is _NAN or den is _NAN:
                bit = 0
                combo_inf = True
            else:
                bit, sa, out = finish_softmax(spec, num, den)
                combo_inf = (sa is None or _value_inf(num)
                             or _value_inf(den) or _value_inf(sa)
                             or _value_inf(out))
            total += cnt1 * cnt2
            if combo_inf:
                inf_total += cnt1 * cnt2
            if bit == expected:
                continue
            coll.count += cnt1 * cnt2
            for a, b in ex1:
                for c, d in ex2:
                    if len(coll.listed) >= FAILURE_LIST_CAP:
                        break
                    y = _bits(a, first) + _bits(c, second)
                    z = _bits(b, first) + _bits(d, second)
                    trace = forward(spec, spec.encode(y, z))
                    if trace.bit != bit:
                        raise RuntimeError(
                            "factored and direct evaluation disagree at "
                            f"y={y} z={z}")
                    coll.listed.append(
                        Failure(y, z, expected, bit, _digest(trace)))
                else:
                    continue
                break
    if total != expected_total:
        raise RuntimeError(
            f"factored enumeration covered {total} pairs, expected "
            f"{expected_total}")
    if coll.count == 0:
        # The factored pass claims a clean sweep; spot-check random pairs
        # with direct forward evaluation.
        for _ in range(64):
            y = _bits(rng.getrandbits(m), m)
            z = _bits(rng.getrandbits(m), m)
            if y > z:
                y, z = z, y
            trace = forward(spec, spec.encode(y, z))
            if trace.bit != int(y == z):
                raise RuntimeError(
                    "spot check found a failure the factored pass missed: "
                    f"y={y} z={z}")
    return total, coll, inf_total


def _family_fields(construction, spec):
    fmt = spec.num_fmt
    if isinstance(fmt, FxFormat):
        return spec.m, None, None
    return spec.m, fmt.t, fmt.e


def verify_exhaustive_spec(spec: TransformerSpec, promises: PromiseSet,
                           construction: str, jobs: int = 1,
                           cap: int = PAIR_CAP_DEFAULT) -> VerifyReport:
    """Exhaustively verify an already-built (possibly modified) spec."""
    start = time.monotonic()
    factorable = promises.variant in (T0, T1)
    if factorable:
        rng = random.Random(f"{construction}:{spec.m}:exhaustive")
        total, coll, inf_total = _factored_exhaustive(spec, cap, rng)
    else:
        total, coll, inf_total = _direct_exhaustive(spec, promises, cap, jobs)
    m, t, e = _family_fields(construction, spec)
    return VerifyReport(
        construction=construction, m=m, t=t, e=e,
        p=native_precision(spec), mode="exhaustive", total=total,
        failure_count=coll.count, failures=coll.merged(),
        seconds=time.monotonic() - start, inf_count=inf_total)


def verify_exhaustive(construction: str, m: int | None = None,
                      t: int | None = None, e: int | None = None,
                      n: int | None = None, precision_delta: int = 0,
                      jobs: int = 1,
                      cap: int = PAIR_CAP_DEFAULT) -> VerifyReport:
    """Check every promise pair of a named construction, optionally with
    every stage format thinned by precision_delta bits."""
    spec, promises = make(construction, m=m, t=t, e=e, n=n)
    spec = precision_delta_spec(spec, precision_delta)
    return verify_exhaustive_spec(spec, promises, construction, jobs, cap)


def _sample_pairs(promises, m, count, rng):
    pairs = []
    guard = 0
    while len(pairs) < count:
        guard += 1
        if guard > 200 * count + 1000:
            raise RuntimeError(
                "rejection sampling is not finding promise pairs; the "
                "promise set looks too sparse")
        y = _bits(rng.getrandbits(m), m)
        z = _bits(rng.getrandbits(m), m)
        if y > z:
            y, z = z, y
        if promises.check(EqInstance(y, z)):
            continue
        pairs.append((y, z))
    return pairs


def _adversarial_pairs(promises, m, rng, bases: int = 64):
    """Deterministic hard cases: equal pairs plus all single-bit flips of a
    few random base strings, kept only when they satisfy the promise."""
    pairs = []
    for _ in range(bases):
        y = _bits(rng.getrandbits(m), m)
        cands = [(y, y)]
        for i in range(m):
            fl = y[:i] + ("1" if y[i] == "0" else "0") + y[i + 1:]
            cands.append((y, fl) if y <= fl else (fl, y))
        for y2, z2 in cands:
            if not promises.check(EqInstance(y2, z2)):
                pairs.append((y2, z2))
    return pairs


def verify_sampled(construction: str, m: int | None = None,
                   t: int | None = None, e: int | None = None,
                   n: int | None = None, samples: int = 10 ** 5,
                   seed: int = 0, precision_delta: int = 0,
                   jobs: int = 1) -> VerifyReport:
    """Check uniform promise pairs plus a deterministic adversarial set."""
    spec, promises = make(construction, m=m, t=t, e=e, n=n)
    spec = precision_delta_spec(spec, precision_delta)
    start = time.monotonic()
    rng = random.Random(seed)
    pairs = _sample_pairs(promises, spec.m, samples, rng) if samples else []
    pairs += _adversarial_pairs(promises, spec.m, rng)
    coll = _Collector(spec)
    total = 0
    inf_total = 0
    if jobs > 1 and len(pairs) > 1024:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = pool.map(_eval_pairs, [spec] * jobs, _chunks(pairs, jobs))
            results = list(parts)
    else:
        results = [_eval_pairs(spec, pairs)]
    for nn, fails, inf_n in results:
        total += nn
        inf_total += inf_n
        for y, z, expected, got, digest in fails:
            coll.count += 1
            if len(coll.listed) < FAILURE_LIST_CAP:
                coll.listed.append(Failure(y, z, expected, got, digest))
    mm, tt, ee = _family_fields(construction, spec)
    return VerifyReport(
        construction=construction, m=mm, t=tt, e=ee,
        p=native_precision(spec), mode="sampled", total=total,
        failure_count=coll.count, failures=coll.merged(),
        seconds=time.monotonic() - start, inf_count=inf_total)
