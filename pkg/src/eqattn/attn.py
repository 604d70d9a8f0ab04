"""Single-head attention pipeline over the exact scalar kernels.

The query/key stage is lossless: logits are carried as exact dyadic
coefficients of ln 2, so exponentiation is an exact power of two.  Bounded
precision enters exactly where the stage formats say it does: the numerator
is a left fold of the rounded products A_j * value_j in the fold format
(scaled so the trailing multiplication by W^V lands in the numerator
format), the denominator is a left fold of the exact A_j with rounding after
every addition, the division rounds once into the output format, and the MLP
runs entirely in the output format.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .bitnum import (
    FpFormat,
    FpNum,
    FxFormat,
    FxNum,
    IndeterminateForm,
    Logit,
    _to_sig_exp,
    encode_scalar,
    exp_logit_exact,
    fp_add,
    fp_div,
    fp_mul,
    fp_round,
    fx_add,
    fx_div,
    fx_mul,
    fx_round,
)

SOFTMAX = "softmax"
LINEAR = "linear"


class StageError(RuntimeError):
    """An arithmetic error annotated with the pipeline stage that raised it."""

    def __init__(self, stage: str, token: int | None, original: Exception):
        where = stage if token is None else f"{stage}[token {token}]"
        super().__init__(f"{where}: {original}")
        self.stage = stage
        self.token = token
        self.original = original


def _ops(fmt):
    if isinstance(fmt, FxFormat):
        return fx_add, fx_mul, fx_div, fx_round, FxNum
    return fp_add, fp_mul, fp_div, fp_round, FpNum


def _wrap_exact(value: Fraction, fmt):
    """Hold an exact dyadic in a scalar wrapper without rounding it."""
    num_cls = FxNum if isinstance(fmt, FxFormat) else FpNum
    sign, sig, exp2 = _to_sig_exp(value)
    if sig == 0:
        return num_cls.zero(fmt)
    return num_cls(fmt, "finite", sign, sig, exp2)


@dataclass(frozen=True)
class TokenRule:
    """Embedding rule for one position.

    source is a tuple of ("y" or "z", index) references naming the 1-based
    input bits this token carries; it is empty for constant positions.  rows
    holds one row per bit pattern, indexed by the pattern read as a binary
    number with the first reference as the most significant bit.  Rows are
    (marker, key, value) with exact dyadic entries; a key of None is the
    minus-large-constant sentinel whose attention weight is exactly zero.
    """

    source: tuple
    rows: tuple

    def token_of(self, y: str, z: str) -> int:
        code = 0
        for name, idx in self.source:
            bits = y if name == "y" else z
            code = code * 2 + int(bits[idx - 1])
        return code

    def row_for(self, y: str, z: str):
        return self.rows[self.token_of(y, z)]


@dataclass(frozen=True)
class MlpSpec:
    """Two hidden relu units and one relu output, all exact dyadics."""

    w1: tuple
    b1: tuple
    w2: tuple
    b2: Fraction


@dataclass
class TransformerSpec:
    m: int
    n: int
    attention_kind: str
    fold_fmt: FxFormat | FpFormat
    num_fmt: FxFormat | FpFormat
    den_fmt: FxFormat | FpFormat
    out_fmt: FxFormat | FpFormat
    embedding: list
    wq: tuple
    wk: tuple
    wv: tuple
    mlp: MlpSpec
    index_base: int = 0

    @property
    def d(self) -> int:
        return 3

    @property
    def formats(self) -> dict:
        return {"fold": self.fold_fmt, "num": self.num_fmt,
                "den": self.den_fmt, "out": self.out_fmt}

    def validate(self):
        if len(self.embedding) != self.n + 1:
            raise ValueError(f"embedding has {len(self.embedding)} positions, "
                             f"expected n+1 = {self.n + 1}")
        for rule in self.embedding:
            if len(rule.rows) != 1 << len(rule.source):
                raise ValueError(
                    f"rule with {len(rule.source)} source bits needs "
                    f"{1 << len(rule.source)} rows, got {len(rule.rows)}")
            for name, idx in rule.source:
                if name not in ("y", "z") or not 1 <= idx <= self.m:
                    raise ValueError(f"bad bit reference ({name!r}, {idx})")
            for row in rule.rows:
                if len(row) != self.d:
                    raise ValueError("embedding rows must have 3 coordinates")
        if self.attention_kind not in (SOFTMAX, LINEAR):
            raise ValueError(f"unknown attention kind {self.attention_kind}")
        if sum(1 for c in self.wv if c) != 1:
            raise ValueError("wv must select exactly one coordinate")
        fx_like = isinstance(self.num_fmt, FxFormat)
        for f in (self.fold_fmt, self.den_fmt, self.out_fmt):
            if isinstance(f, FxFormat) != fx_like:
                raise ValueError("stage formats must agree on fx/fp kind")
        if fx_like and (self.num_fmt.p, self.num_fmt.budget) != \
                (self.den_fmt.p, self.den_fmt.budget):
            raise ValueError("num and den formats may differ only in scale")
        return self

    def encode(self, y: str, z: str):
        """Token rows (exact dyadics) for an input pair, query row last."""
        if len(y) != self.m or len(z) != self.m:
            raise ValueError(f"inputs must have m = {self.m} bits")
        return [rule.row_for(y, z) for rule in self.embedding]

    def value_column(self) -> tuple[int, Fraction]:
        k = next(i for i, c in enumerate(self.wv) if c)
        return k, self.wv[k]


@dataclass
class EvalTrace:
    """Everything the pipeline computed, token by token."""

    x: list
    logits: list
    weights: list
    num_terms: list = field(default_factory=list)
    num_partials: list = field(default_factory=list)
    den_partials: list = field(default_factory=list)
    numerator: object = None
    denominator: object = None
    sa: object = None
    hidden: list = field(default_factory=list)
    output: object = None
    bit: int | None = None
    index_base: int = 0
    indeterminate: bool = False

    def any_inexact(self) -> bool:
        steps = (self.num_partials + self.den_partials + self.num_terms
                 + self.hidden)
        steps += [v for v in (self.numerator, self.denominator, self.sa,
                              self.output) if v is not None]
        return any(getattr(v, "inexact", False) for v in steps)

    def render_lines(self):
        def enc(v):
            return "." if v is None else encode_scalar(v)

        lines = []
        for j, (lg, w) in enumerate(zip(self.logits, self.weights)):
            coeff = "-N" if lg.is_neg_large else str(lg.coeff)
            term = self.num_terms[j] if j < len(self.num_terms) else None
            np_ = self.num_partials[j] if j < len(self.num_partials) else None
            dp = self.den_partials[j] if j < len(self.den_partials) else None
            lines.append(
                f"token {self.index_base + j}: logit={coeff} weight={w} "
                f"num+={enc(term)} num={enc(np_)} den={enc(dp)}")
        lines.append(f"numerator: {enc(self.numerator)}")
        if self.denominator is not None:
            lines.append(f"denominator: {enc(self.denominator)}")
        sa = "indeterminate" if self.indeterminate else enc(self.sa)
        lines.append(f"attention output: {sa}")
        lines.append("mlp hidden: " + ", ".join(enc(h) for h in self.hidden))
        lines.append(f"mlp output: {enc(self.output)} -> bit {self.bit}")
        return lines


def _dot(row, coeffs):
    """Exact dot product; None entries are the neg-large sentinel."""
    acc = Fraction(0)
    for v, c in zip(row, coeffs):
        if c == 0:
            continue
        if v is None:
            return None
        acc += Fraction(v) * c
    return acc


def token_logits(spec: TransformerSpec, x) -> list[Logit]:
    """Exact logits <Q_query, K_j> as coefficients of ln 2."""
    qc = _dot(x[-1], spec.wq)
    if qc is None:
        raise ValueError("query row has a sentinel in a selected coordinate")
    out = []
    for row in x:
        key = _dot(row, spec.wk)
        out.append(Logit.neg_large() if key is None else Logit(qc * key))
    return out


def relu(v):
    if v.is_inf:
        return v if v.sign > 0 else type(v).zero(v.fmt)
    if v.sign < 0 and not v.is_zero:
        return type(v).zero(v.fmt)
    return v


def mlp_eval(mlp: MlpSpec, v, fmt):
    """Run the output head in fmt; returns (output, hidden pair)."""
    add, mul, _, round_, _ = _ops(fmt)
    hidden = []
    for w, b in zip(mlp.w1, mlp.b1):
        u = mul(v, _wrap_exact(w, fmt), fmt)
        u = add(u, _wrap_exact(b, fmt), fmt)
        hidden.append(relu(u))
    acc = None
    for h, w in zip(hidden, mlp.w2):
        term = mul(h, _wrap_exact(w, fmt), fmt)
        acc = term if acc is None else add(acc, term, fmt)
    acc = add(acc, _wrap_exact(mlp.b2, fmt), fmt)
    return relu(acc), hidden


def _accept_bit(out) -> int:
    return int(out.is_finite and not out.is_zero and out.as_fraction() == 1)


def finish_softmax(spec: TransformerSpec, num, den):
    """Divide prepared numerator/denominator folds and run the output head.

    Returns (bit, sa, output); sa and output are None when the division is
    indeterminate.  Lets verifiers that compute the two folds independently
    share the exact tail of the pipeline.
    """
    _, _, div, _, _ = _ops(spec.out_fmt)
    try:
        sa = div(num, den, spec.out_fmt)
    except IndeterminateForm:
        return 0, None, None
    out, _ = mlp_eval(spec.mlp, sa, spec.out_fmt)
    return _accept_bit(out), sa, out


def _forward(spec: TransformerSpec, x, normalize: bool) -> EvalTrace:
    add, mul, div, round_, num_cls = _ops(spec.fold_fmt)
    logits = token_logits(spec, x)
    weights = [exp_logit_exact(lg) for lg in logits]
    col, scale = spec.value_column()
    trace = EvalTrace(x=x, logits=logits, weights=weights,
                      index_base=spec.index_base)

    def nan_like():
        # Inf - Inf and Inf/Inf under the saturating formats behave like a
        # NaN: every later comparison is false, so the head answers 0
        # without evaluating further.
        trace.indeterminate = True
        trace.bit = 0
        return trace

    num = None
    for j, (w, row) in enumerate(zip(weights, x)):
        try:
            term = round_(w * Fraction(row[col] or 0), spec.fold_fmt)
            num = term if num is None else add(num, term, spec.fold_fmt)
        except IndeterminateForm:
            return nan_like()
        except ArithmeticError as exc:
            raise StageError("numerator", spec.index_base + j, exc) from exc
        trace.num_terms.append(term)
        trace.num_partials.append(num)
    try:
        num = mul(num, _wrap_exact(scale, spec.num_fmt), spec.num_fmt)
    except IndeterminateForm:
        return nan_like()
    except ArithmeticError as exc:
        raise StageError("numerator", None, exc) from exc
    trace.numerator = num

    if normalize:
        den = None
        for j, w in enumerate(weights):
            try:
                term = _wrap_exact(w, spec.den_fmt)
                den = round_(w, spec.den_fmt) if den is None else \
                    add(den, term, spec.den_fmt)
            except IndeterminateForm:
                return nan_like()
            except ArithmeticError as exc:
                raise StageError("denominator", spec.index_base + j, exc) from exc
            trace.den_partials.append(den)
        trace.denominator = den
        try:
            sa = div(num, den, spec.out_fmt)
        except IndeterminateForm:
            return nan_like()
        except ArithmeticError as exc:
            raise StageError("attention", None, exc) from exc
    else:
        sa = round_(num, spec.out_fmt) if num.is_finite else \
            num_cls.inf(num.sign, spec.out_fmt)
    trace.sa = sa

    try:
        out, hidden = mlp_eval(spec.mlp, sa, spec.out_fmt)
    except IndeterminateForm:
        return nan_like()
    except ArithmeticError as exc:
        raise StageError("mlp", None, exc) from exc
    trace.hidden = hidden
    trace.output = out
    trace.bit = _accept_bit(out)
    return trace


def forward_softmax(spec: TransformerSpec, x) -> EvalTrace:
    """Normalized attention: numerator fold, denominator fold, divide, MLP."""
    if spec.attention_kind != SOFTMAX:
        raise ValueError("spec is not a softmax construction")
    return _forward(spec, x, normalize=True)


def forward_linear(spec: TransformerSpec, x) -> EvalTrace:
    """Unnormalized attention: the weight fold only, then the MLP."""
    if spec.attention_kind != LINEAR:
        raise ValueError("spec is not a linear construction")
    return _forward(spec, x, normalize=False)


def forward(spec: TransformerSpec, x) -> EvalTrace:
    if spec.attention_kind == SOFTMAX:
        return forward_softmax(spec, x)
    return forward_linear(spec, x)


def spec_to_payload(spec: TransformerSpec) -> dict:
    """JSON-ready dict; exact scalars use the textual encoding."""
    def enc(v):
        return "neglarge" if v is None else encode_scalar(Fraction(v))

    def enc_row(row):
        return [enc(v) for v in row]

    return {
        "version": 1,
        "m": spec.m,
        "n": spec.n,
        "attention_kind": spec.attention_kind,
        "index_base": spec.index_base,
        "formats": {k: f.descriptor() for k, f in spec.formats.items()},
        "embedding": [
            {"source": [[name, idx] for name, idx in rule.source],
             "rows": [enc_row(r) for r in rule.rows]}
            for rule in spec.embedding
        ],
        "wq": enc_row(spec.wq),
        "wk": enc_row(spec.wk),
        "wv": enc_row(spec.wv),
        "mlp": {
            "w1": enc_row(spec.mlp.w1),
            "b1": enc_row(spec.mlp.b1),
            "w2": enc_row(spec.mlp.w2),
            "b2": enc(spec.mlp.b2),
        },
    }


def spec_from_payload(payload: dict) -> TransformerSpec:
    from .bitnum import decode_scalar, parse_format

    if payload.get("version") != 1:
        raise ValueError(f"unsupported weights version {payload.get('version')}")

    def dec(s):
        if s == "neglarge":
            return None
        v = decode_scalar(s)
        if isinstance(v, float):
            raise ValueError("weights must be finite")
        return v

    def dec_row(row):
        return tuple(dec(v) for v in row)

    fmts = {k: parse_format(v) for k, v in payload["formats"].items()}
    embedding = [
        TokenRule(source=tuple((name, idx) for name, idx in e["source"] or ()),
                  rows=tuple(dec_row(r) for r in e["rows"]))
        for e in payload["embedding"]
    ]
    mlp = MlpSpec(w1=dec_row(payload["mlp"]["w1"]),
                  b1=dec_row(payload["mlp"]["b1"]),
                  w2=dec_row(payload["mlp"]["w2"]),
                  b2=dec(payload["mlp"]["b2"]))
    return TransformerSpec(
        m=payload["m"], n=payload["n"],
        attention_kind=payload["attention_kind"],
        fold_fmt=fmts["fold"], num_fmt=fmts["num"],
        den_fmt=fmts["den"], out_fmt=fmts["out"],
        embedding=embedding, wq=dec_row(payload["wq"]),
        wk=dec_row(payload["wk"]), wv=dec_row(payload["wv"]),
        mlp=mlp, index_base=payload.get("index_base", 0),
    ).validate()
