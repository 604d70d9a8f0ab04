"""Post-training quantization of equality heads and accuracy sweeps.

quantize_spec re-rounds every weight of a TransformerSpec onto an INTk or
floating-point grid and swaps the stage formats to match, so activations
are quantized implicitly the next time the head runs.  gen_dataset draws
the randomized equality benchmark (half equal pairs, half pairs differing
in exactly floor(0.75 m) positions) from a counter-based generator, and
eval_accuracy / sweep measure how the accept bit degrades format by
format, tallying saturated and indeterminate traces separately.

Weights that overflow the target grid become the infinity code, stored as
the exact dyadic +-2**INF_CODE_LOG2.  That magnitude is beyond the top of
every practical stage format, so each use of such a weight rounds to the
format's +-Inf, which is exactly how a dedicated infinity code would
behave without the evaluation pipeline needing a special case.
"""

from __future__ import annotations

import json
import math
import re
import time
import warnings
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import ClassVar

from .attn import (LINEAR, SOFTMAX, MlpSpec, TokenRule, TransformerSpec,
                   forward, spec_from_payload, spec_to_payload)
from .bitnum import (FpFormat, FxFormat, InvalidFormat, decode_scalar,
                     encode_scalar, fp_round, fx_round, parse_format)
from .constructs import EqInstance, make, native_precision
from .oracle import trace_saturated, verify_exhaustive_spec

INT = "int"
FLOAT = "float"

# Exponent of the infinity code.  Any weight stored as +-2**INF_CODE_LOG2
# rounds to +-Inf in every stage format whose top octave sits below it.
INF_CODE_LOG2 = 1 << 14


class DegenerateTensor(UserWarning):
    """An all-zero tensor was calibrated; its scale defaults to 1."""


class SchemaError(ValueError):
    """A weights document that does not match the expected layout."""


def _pow2(k: int) -> Fraction:
    return Fraction(1 << k) if k >= 0 else Fraction(1, 1 << -k)


_INF_CODE = _pow2(INF_CODE_LOG2)


@dataclass(frozen=True)
class QuantFormat:
    """A storage format: INTk (bits total) or float with (exp, mant) bits."""

    kind: str
    bits: int = 0
    exp: int = 0
    mant: int = 0

    def __post_init__(self):
        if self.kind == INT:
            if self.bits < 2:
                raise InvalidFormat(
                    f"integer formats need at least 2 bits, got {self.bits}")
        elif self.kind == FLOAT:
            if self.exp < 2:
                raise InvalidFormat(
                    f"float formats need at least 2 exponent bits, got "
                    f"{self.exp}")
            if self.mant < 1:
                raise InvalidFormat(
                    f"float formats need at least 1 mantissa bit, got "
                    f"{self.mant}")
        else:
            raise InvalidFormat(f"unknown format kind {self.kind!r}")

    @property
    def p_bits(self) -> int:
        """Bits per stored number: k, or sign + exponent + mantissa."""
        if self.kind == INT:
            return self.bits
        return self.exp + self.mant + 1

    @property
    def name(self) -> str:
        preset = _PRESET_NAMES.get(self)
        if preset is not None:
            return preset
        if self.kind == INT:
            return f"int{self.bits}"
        return f"fp_e{self.exp}m{self.mant}"

    def capacity(self, heads: int = 1, d_v: int = 1) -> int:
        """The storage budget H * (d_v + 1) * p carried by the head."""
        return heads * (d_v + 1) * self.p_bits


def int_format(bits: int) -> QuantFormat:
    return QuantFormat(INT, bits=bits)


def float_format(exp: int, mant: int) -> QuantFormat:
    return QuantFormat(FLOAT, exp=exp, mant=mant)


INT12 = int_format(12)
INT8 = int_format(8)
INT6 = int_format(6)
INT4 = int_format(4)
FP16 = float_format(5, 10)
FP8_E5M2 = float_format(5, 2)
FP8_E4M3 = float_format(4, 3)

PRESETS = {
    "int12": INT12,
    "int8": INT8,
    "int6": INT6,
    "int4": INT4,
    "fp16": FP16,
    "fp8_e5m2": FP8_E5M2,
    "fp8_e4m3": FP8_E4M3,
}
_PRESET_NAMES = {fmt: name for name, fmt in PRESETS.items()}


def parse_quant_format(text: str) -> QuantFormat:
    """Resolve a format name: a preset, int<k>, or fp_e<exp>m<mant>."""
    key = text.strip().lower()
    if key in PRESETS:
        return PRESETS[key]
    hit = re.fullmatch(r"int(\d+)", key)
    if hit:
        return int_format(int(hit.group(1)))
    hit = re.fullmatch(r"fp_e(\d+)m(\d+)", key)
    if hit:
        return float_format(int(hit.group(1)), int(hit.group(2)))
    hit = re.fullmatch(r"fp(\d+)_e(\d+)m(\d+)", key)
    if hit:
        total, exp, mant = map(int, hit.groups())
        if exp + mant + 1 != total:
            raise InvalidFormat(
                f"{text!r}: sign + {exp} exponent + {mant} mantissa bits "
                f"is {exp + mant + 1}, not {total}")
        return float_format(exp, mant)
    raise InvalidFormat(
        f"unknown quantization format {text!r}; try int<k>, fp16, "
        f"fp8_e5m2, fp8_e4m3 or fp_e<exp>m<mant>")


def is_inf_code(value) -> bool:
    """Whether a stored weight is the infinity code (either sign)."""
    return value is not None and abs(Fraction(value)) >= _INF_CODE


def _inf_code(sign: int) -> Fraction:
    return _INF_CODE if sign > 0 else -_INF_CODE


def _ceil_log2(fr: Fraction) -> int:
    """Smallest s with 2**s >= fr, computed exactly (fr > 0)."""
    s = fr.numerator.bit_length() - fr.denominator.bit_length() + 1
    while _pow2(s - 1) >= fr:
        s -= 1
    return s


def _spec_tensors(spec: TransformerSpec):
    """(label, flat values) per weight tensor; key sentinels are skipped."""
    emb = [v for rule in spec.embedding for row in rule.rows for v in row
           if v is not None]
    return [
        ("embedding", emb),
        ("wq", list(spec.wq)),
        ("wk", list(spec.wk)),
        ("wv", list(spec.wv)),
        ("mlp.w1", list(spec.mlp.w1)),
        ("mlp.b1", list(spec.mlp.b1)),
        ("mlp.w2", list(spec.mlp.w2)),
        ("mlp.b2", [spec.mlp.b2]),
    ]


def _int_rounder(label: str, values, bits: int):
    """Per-tensor INTk rounding: max-abs calibration onto a power-of-two
    scale that covers the largest magnitude, then rounding into the
    (bits, scale) fixed-point grid.  The covering choice (rather than the
    closest power of two) keeps the largest weight finite and makes
    requantization at the same width the identity."""
    finite = [abs(Fraction(v)) for v in values if not is_inf_code(v)]
    maxabs = max(finite, default=Fraction(0))
    if maxabs == 0:
        warnings.warn(DegenerateTensor(
            f"tensor {label} has no nonzero weight; scale defaults to 1"))
        scale_log2 = 0
    else:
        scale_log2 = _ceil_log2(maxabs / ((1 << (bits - 1)) - 1))
    grid = FxFormat(bits, scale_log2)

    def rnd(v: Fraction) -> Fraction:
        if is_inf_code(v):
            return _inf_code(1 if v > 0 else -1)
        x = fx_round(v, grid)
        if x.is_inf:
            return _inf_code(x.sign)
        return x.as_fraction()

    return rnd


def _float_rounder(fmt: QuantFormat):
    """Absolute-grid float rounding; exponent overflow is the Inf code."""
    grid = FpFormat(fmt.mant + 1, fmt.exp)

    def rnd(v: Fraction) -> Fraction:
        if is_inf_code(v):
            return _inf_code(1 if v > 0 else -1)
        x = fp_round(v, grid)
        if x.is_inf:
            return _inf_code(x.sign)
        return x.as_fraction()

    return rnd


def _stage_format(old, fmt: QuantFormat):
    """The stage format after quantization: same role (scale, rounding),
    new per-number width."""
    if fmt.kind == INT:
        scale = old.scale_log2 if isinstance(old, FxFormat) else 0
        return FxFormat(fmt.bits, scale, old.rounding)
    return FpFormat(fmt.mant + 1, fmt.exp, old.rounding)


def quantize_spec(spec: TransformerSpec, fmt: QuantFormat) -> TransformerSpec:
    """Round every weight onto the target grid and swap stage formats.

    Integer formats calibrate a power-of-two scale per tensor from its
    largest magnitude; float formats round each value on the absolute
    (exp, mant) grid.  Values past the top of the grid become the infinity
    code (see module docstring); existing infinity codes pass through, and
    they are excluded from calibration.  Stage formats keep their scale
    and rounding policy but adopt the new bit width, so the quantized head
    also accumulates and divides at the target precision.
    """
    rounders = {}
    for label, values in _spec_tensors(spec):
        if fmt.kind == INT:
            rounders[label] = _int_rounder(label, values, fmt.bits)
        else:
            rounders[label] = _float_rounder(fmt)

    def q(label, v):
        if v is None:
            return None
        return rounders[label](Fraction(v))

    def q_row(label, row):
        return tuple(q(label, v) for v in row)

    embedding = [
        TokenRule(source=rule.source,
                  rows=tuple(q_row("embedding", row) for row in rule.rows))
        for rule in spec.embedding
    ]
    mlp = MlpSpec(w1=q_row("mlp.w1", spec.mlp.w1),
                  b1=q_row("mlp.b1", spec.mlp.b1),
                  w2=q_row("mlp.w2", spec.mlp.w2),
                  b2=q("mlp.b2", spec.mlp.b2))
    out = replace(
        spec,
        fold_fmt=_stage_format(spec.fold_fmt, fmt),
        num_fmt=_stage_format(spec.num_fmt, fmt),
        den_fmt=_stage_format(spec.den_fmt, fmt),
        out_fmt=_stage_format(spec.out_fmt, fmt),
        embedding=embedding,
        wq=q_row("wq", spec.wq),
        wk=q_row("wk", spec.wk),
        wv=q_row("wv", spec.wv),
        mlp=mlp,
    )
    return out.validate()


_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


class _SplitMix64:
    """splitmix64 stream; fixed here so datasets are bit-identical across
    platforms and Python versions."""

    def __init__(self, state: int):
        self.state = state & _MASK64

    def next_word(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)


@dataclass(frozen=True)
class Dataset:
    """Labeled equality pairs.

    Each pair is equal with probability 1/2; unequal pairs differ in
    exactly flip_count = floor(0.75 m) positions, chosen uniformly.
    """

    m: int
    pairs: tuple
    seed: int
    flip_count: int

    equal_target: ClassVar[Fraction] = Fraction(1, 2)

    @property
    def equal_fraction(self) -> Fraction:
        return Fraction(sum(lab for _, _, lab in self.pairs), len(self.pairs))


def gen_dataset(m: int, count: int, seed: int = 0) -> Dataset:
    """Draw count labeled pairs; deterministic for a fixed (m, count, seed).

    Pair i uses its own splitmix64 stream keyed by seed ^ (GOLDEN * i), so
    any prefix of a larger dataset equals the smaller dataset.  The first
    word's top bit decides equal vs unequal; the next ceil(m/64) words
    spell y; unequal pairs then flip the first floor(0.75 m) entries of a
    partial Fisher-Yates shuffle of the positions.
    """
    if m < 1:
        raise ValueError(f"m must be at least 1, got {m}")
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    flips = (3 * m) // 4
    words = (m + 63) // 64
    pairs = []
    for i in range(count):
        stream = _SplitMix64(seed ^ ((_GOLDEN * i) & _MASK64))
        head = stream.next_word()
        y = "".join(format(stream.next_word(), "064b")
                    for _ in range(words))[:m]
        if head >> 63:
            z = y
        else:
            order = list(range(m))
            for j in range(flips):
                r = j + stream.next_word() % (m - j)
                order[j], order[r] = order[r], order[j]
            zb = list(y)
            for pos in order[:flips]:
                zb[pos] = "1" if zb[pos] == "0" else "0"
            z = "".join(zb)
        pairs.append((y, z, int(y == z)))
    return Dataset(m=m, pairs=tuple(pairs), seed=seed, flip_count=flips)


@dataclass(frozen=True)
class QuantRow:
    """One accuracy measurement: a subject at one storage format."""

    construction: str
    m: int
    t: int | None
    e: int | None
    fmt: str
    capacity: int
    total: int
    correct: int
    inf_count: int
    seconds: float

    @property
    def accuracy(self) -> Fraction:
        if self.total == 0:
            return Fraction(0)
        return Fraction(self.correct, self.total)


QUANT_CSV_HEADER = ("construction,m,t,e,format,capacity,total,correct,"
                    "accuracy,inf_count,seconds")


@dataclass(frozen=True)
class QuantReport:
    rows: tuple

    def to_csv(self, timing: bool = False) -> str:
        """CSV rows; wall time is zeroed unless timing is requested so
        repeated runs with one seed stay byte-identical."""
        out = [QUANT_CSV_HEADER]
        for r in self.rows:
            out.append(",".join([
                r.construction, str(r.m),
                "" if r.t is None else str(r.t),
                "" if r.e is None else str(r.e),
                r.fmt, str(r.capacity), str(r.total), str(r.correct),
                f"{float(r.accuracy):.6f}", str(r.inf_count),
                f"{r.seconds:.3f}" if timing else "0.000",
            ]))
        return "\n".join(out) + "\n"

    def render_lines(self) -> list[str]:
        lines = []
        for r in self.rows:
            label = r.construction + (f" t={r.t} e={r.e}" if r.t else "")
            lines.append(
                f"{label} m={r.m} {r.fmt} (capacity {r.capacity}): "
                f"{r.correct}/{r.total} = {float(r.accuracy):.6f}, "
                f"{r.inf_count} saturated")
        return lines


def _family(spec: TransformerSpec):
    fmt = spec.num_fmt
    if isinstance(fmt, FpFormat):
        return fmt.t, fmt.e
    return None, None


def eval_accuracy(spec: TransformerSpec, ds: Dataset, promises=None,
                  label: str = "spec", fmt: QuantFormat | None = None,
                  t: int | None = None, e: int | None = None) -> QuantRow:
    """Score the accept bit against the labels of a dataset.

    With a promise set, pairs are reordered so y <= z and pairs that still
    violate a promise are skipped, mirroring how the head is specified.
    Saturated or indeterminate traces are tallied in inf_count; they score
    like any other trace (the accept bit they produce is compared to the
    label), they are only reported separately.
    """
    start = time.monotonic()
    if t is None and e is None:
        t, e = _family(spec)
    total = correct = inf_n = 0
    for y, z, lab in ds.pairs:
        if promises is not None:
            if y > z:
                y, z = z, y
            if promises.check(EqInstance(y, z)):
                continue
        trace = forward(spec, spec.encode(y, z))
        total += 1
        correct += trace.bit == lab
        inf_n += trace_saturated(trace)
    if fmt is None:
        fmt_name = "native"
        capacity = 2 * native_precision(spec)
    else:
        fmt_name = fmt.name
        capacity = fmt.capacity()
    return QuantRow(construction=label, m=ds.m, t=t, e=e, fmt=fmt_name,
                    capacity=capacity, total=total, correct=correct,
                    inf_count=inf_n, seconds=time.monotonic() - start)


def sweep(source, formats, ms=None, count: int = 5120, seed: int = 0, *,
          promises=None, exhaustive: bool = False, jobs: int = 1,
          timing: bool = False) -> QuantReport:
    """Quantize a subject to each format and measure accuracy.

    source is a construction name (swept over ms, whose entries are m for
    fixed-point families or (t, e) for floating-point ones) or an already
    built TransformerSpec (then promises, if any, must be passed in).
    exhaustive runs every promise pair through the verifier instead of a
    sampled dataset; jobs spreads that work over processes.  Rows appear
    in subject-major, format-minor order.
    """
    fmts = [parse_quant_format(f) if isinstance(f, str) else f
            for f in formats]
    subjects = []
    if isinstance(source, TransformerSpec):
        subjects.append((source, promises, "imported"))
    else:
        for key in (ms if ms is not None else []):
            kwargs = {"m": key} if isinstance(key, int) else \
                {"t": key[0], "e": key[1]}
            spec0, pr = make(source, **kwargs)
            subjects.append((spec0, pr, source))
    rows = []
    for spec0, pr, label in subjects:
        t, e = _family(spec0)
        ds = None if exhaustive else gen_dataset(spec0.m, count, seed)
        for f in fmts:
            qspec = quantize_spec(spec0, f)
            if exhaustive:
                if pr is None:
                    raise ValueError("an exhaustive sweep needs the "
                                     "subject's promise set")
                rep = verify_exhaustive_spec(qspec, pr, label, jobs=jobs)
                row = QuantRow(
                    construction=label, m=spec0.m, t=t, e=e, fmt=f.name,
                    capacity=f.capacity(), total=rep.total,
                    correct=rep.total - rep.failure_count,
                    inf_count=rep.inf_count, seconds=rep.seconds)
            else:
                row = eval_accuracy(qspec, ds, pr, label=label, fmt=f,
                                    t=t, e=e)
            rows.append(row)
    return QuantReport(rows=tuple(rows))


_STAGES = ("fold", "num", "den", "out")


def _schema(cond: bool, where: str, msg: str):
    if not cond:
        raise SchemaError(f"{where}: {msg}")


def _norm_scalar(v, where: str) -> str:
    """A scalar cell as its textual encoding; numbers convert exactly
    through their binary representation."""
    if v is None:
        return "neglarge"
    if isinstance(v, bool):
        raise SchemaError(f"{where}: booleans are not scalars")
    if isinstance(v, str):
        if v == "neglarge":
            return v
        try:
            decode_scalar(v)
        except ValueError as exc:
            raise SchemaError(f"{where}: {exc}") from exc
        return v
    if isinstance(v, int):
        return encode_scalar(Fraction(v))
    if isinstance(v, float):
        if not math.isfinite(v):
            raise SchemaError(f"{where}: {v!r} is not finite")
        return encode_scalar(Fraction(v))
    raise SchemaError(f"{where}: expected a number or scalar string, got "
                      f"{type(v).__name__}")


def _norm_row(row, where: str, width: int | None = None) -> list:
    _schema(isinstance(row, list), where, "expected an array")
    if width is not None:
        _schema(len(row) == width, where,
                f"expected {width} entries, got {len(row)}")
    return [_norm_scalar(v, f"{where}[{i}]") for i, v in enumerate(row)]


def _normalize_document(payload: dict) -> dict:
    """Check the weights document shape and put scalars in textual form."""
    _schema(isinstance(payload, dict), "document", "expected an object")
    for field in ("version", "m", "n", "attention_kind", "formats",
                  "embedding", "wq", "wk", "wv", "mlp"):
        _schema(field in payload, field, "missing")
    _schema(payload["version"] == 1, "version",
            f"expected 1, got {payload['version']!r}")
    for field in ("m", "n"):
        v = payload[field]
        _schema(isinstance(v, int) and not isinstance(v, bool) and v >= 1,
                field, f"expected a positive integer, got {v!r}")
    _schema(payload["attention_kind"] in (SOFTMAX, LINEAR),
            "attention_kind",
            f"expected {SOFTMAX!r} or {LINEAR!r}, "
            f"got {payload['attention_kind']!r}")
    fmts = payload["formats"]
    _schema(isinstance(fmts, dict), "formats", "expected an object")
    for stage in _STAGES:
        _schema(stage in fmts, f"formats.{stage}", "missing")
        _schema(isinstance(fmts[stage], str), f"formats.{stage}",
                "expected a format descriptor string")
        try:
            parse_format(fmts[stage])
        except ValueError as exc:
            raise SchemaError(f"formats.{stage}: {exc}") from exc
    doc = dict(payload)
    emb = payload["embedding"]
    _schema(isinstance(emb, list) and emb, "embedding",
            "expected a non-empty array of position rules")
    rules = []
    for i, rule in enumerate(emb):
        where = f"embedding[{i}]"
        _schema(isinstance(rule, dict), where, "expected an object")
        _schema("source" in rule and "rows" in rule, where,
                "needs source and rows")
        source = rule["source"]
        _schema(isinstance(source, list), f"{where}.source",
                "expected an array of [side, index] pairs")
        for j, ref in enumerate(source):
            _schema(isinstance(ref, list) and len(ref) == 2
                    and ref[0] in ("y", "z")
                    and isinstance(ref[1], int), f"{where}.source[{j}]",
                    f"expected [\"y\"|\"z\", index], got {ref!r}")
        rows = rule["rows"]
        _schema(isinstance(rows, list) and len(rows) == (1 << len(source)),
                f"{where}.rows",
                f"{len(source)} source bits need {1 << len(source)} rows, "
                f"got {len(rows) if isinstance(rows, list) else rows!r}")
        rules.append({
            "source": source,
            "rows": [_norm_row(r, f"{where}.rows[{j}]", 3)
                     for j, r in enumerate(rows)],
        })
    doc["embedding"] = rules
    for field in ("wq", "wk", "wv"):
        doc[field] = _norm_row(payload[field], field, 3)
        _schema("neglarge" not in doc[field], field,
                "projection weights must be finite scalars")
    mlp = payload["mlp"]
    _schema(isinstance(mlp, dict), "mlp", "expected an object")
    for field in ("w1", "b1", "w2", "b2"):
        _schema(field in mlp, f"mlp.{field}", "missing")
    doc["mlp"] = {
        "w1": _norm_row(mlp["w1"], "mlp.w1", 2),
        "b1": _norm_row(mlp["b1"], "mlp.b1", 2),
        "w2": _norm_row(mlp["w2"], "mlp.w2", 2),
        "b2": _norm_scalar(mlp["b2"], "mlp.b2"),
    }
    for field in ("w1", "b1", "w2"):
        _schema("neglarge" not in doc["mlp"][field], f"mlp.{field}",
                "mlp weights must be finite scalars")
    _schema(doc["mlp"]["b2"] != "neglarge", "mlp.b2",
            "mlp weights must be finite scalars")
    if "index_base" in payload:
        _schema(isinstance(payload["index_base"], int)
                and not isinstance(payload["index_base"], bool),
                "index_base", "expected an integer")
    return doc


def export_weights(spec: TransformerSpec, path=None) -> str:
    """The spec as a weights document (JSON); also written to path if
    one is given."""
    text = json.dumps(spec_to_payload(spec), indent=2) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def import_weights(path) -> TransformerSpec:
    """Read and validate a weights document; exact round trip of
    export_weights, with decimal numbers converted exactly through their
    binary representation."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SchemaError(f"cannot read weights file: {exc}") from exc
    return import_weights_text(text)


def import_weights_text(text: str) -> TransformerSpec:
    """import_weights for an in-memory document."""
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: line {exc.lineno} column "
                          f"{exc.colno}: {exc.msg}") from exc
    doc = _normalize_document(payload)
    try:
        return spec_from_payload(doc)
    except SchemaError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise SchemaError(str(exc)) from exc
