"""Exhaustive and sampled verification against ground-truth equality."""

from fractions import Fraction

import pytest

from eqattn import oracle
from eqattn.attn import forward
from eqattn.bitnum import FpFormat, FxFormat
from eqattn.constructs import EqInstance, make, native_precision
from eqattn.oracle import (
    BudgetExceeded,
    eq_truth,
    precision_delta_spec,
    to_csv,
    trace_saturated,
    verify_exhaustive,
    verify_exhaustive_spec,
    verify_sampled,
)


class TestTruth:
    def test_eq_truth(self):
        assert eq_truth(EqInstance("0101", "0101")) == 1
        assert eq_truth(EqInstance("0101", "0100")) == 0


class TestPrecisionDelta:
    def test_delta_thins_every_stage(self):
        spec, _ = make("fx-tight", m=7)
        thin = precision_delta_spec(spec, -1)
        for key in ("fold", "num", "den", "out"):
            assert thin.formats[key].p == spec.formats[key].p - 1
            assert thin.formats[key].scale_log2 == \
                spec.formats[key].scale_log2
        assert native_precision(thin) == native_precision(spec) - 1

    def test_delta_zero_is_identity(self):
        spec, _ = make("fp-linear", t=4, e=3)
        same = precision_delta_spec(spec, 0)
        assert same.formats == spec.formats

    def test_delta_on_floats_moves_significand_bits(self):
        spec, _ = make("fp-linear", t=4, e=3)
        thin = precision_delta_spec(spec, -1)
        fmt = thin.num_fmt
        assert isinstance(fmt, FpFormat)
        assert native_precision(thin) == 6


class TestExhaustive:
    def test_native_precision_has_zero_failures(self):
        """Both fixed-point families answer all 528 canonical m = 5 pairs;
        saturated traces are tallied but are not failures."""
        simple = verify_exhaustive("fx-simple", m=5)
        tight = verify_exhaustive("fx-tight", m=5)
        for rep in (simple, tight):
            assert rep.passed
            assert rep.total == 528
            assert rep.mode == "exhaustive"
        assert simple.inf_count == 496
        assert tight.inf_count == 224

    def test_one_bit_below_native_breaks(self):
        rep = verify_exhaustive("fx-tight", m=5, precision_delta=-1)
        assert rep.failure_count == 249
        assert not rep.passed
        first = rep.failures[0]
        assert (first.y, first.z) == ("00000", "00001")
        assert "den=inf" in first.digest

    def test_factored_and_direct_pipelines_agree(self):
        """The half-space factorization must reproduce the direct pair
        enumeration exactly: totals, failures and saturation tallies."""
        for name, m in (("fx-simple", 5), ("fx-tight", 5), ("fx-tight", 7)):
            spec, promises = make(name, m=m)
            fast = verify_exhaustive_spec(spec, promises, name)
            tot, coll, inf = oracle._direct_exhaustive(
                spec, promises, 10 ** 8, 1)
            assert (fast.total, fast.failure_count, fast.inf_count) == \
                (tot, coll.count, inf)

    def test_factored_failures_match_direct_failures(self):
        """Both pipelines find the same number of failures below native
        precision, and everything either one lists really does fail."""
        spec, promises = make("fx-tight", m=5)
        thin = precision_delta_spec(spec, -1)
        fast = verify_exhaustive_spec(thin, promises, "fx-tight")
        tot, coll, inf = oracle._direct_exhaustive(thin, promises, 10 ** 8, 1)
        assert fast.failure_count == coll.count
        assert fast.inf_count == inf
        for f in list(fast.failures)[:6] + list(coll.merged())[:6]:
            trace = forward(thin, thin.encode(f.y, f.z))
            assert trace.bit == f.got != f.expected

    def test_every_reported_failure_reproduces(self):
        rep = verify_exhaustive("fx-tight", m=5, precision_delta=-1)
        spec, _ = make("fx-tight", m=5)
        thin = precision_delta_spec(spec, -1)
        for f in rep.failures[:8]:
            trace = forward(thin, thin.encode(f.y, f.z))
            assert trace.bit == f.got
            assert eq_truth(EqInstance(f.y, f.z)) == f.expected

    def test_pair_cap_guards_runaway_enumerations(self):
        with pytest.raises(BudgetExceeded):
            verify_exhaustive("fp-softmax", t=4, e=7)
        with pytest.raises(BudgetExceeded):
            verify_exhaustive("fp-linear", t=4, e=3, cap=10)


class TestSampled:
    def test_same_seed_means_same_report(self):
        a = verify_sampled("fx-tight", m=7, samples=400, seed=9)
        b = verify_sampled("fx-tight", m=7, samples=400, seed=9)
        assert (a.total, a.failure_count, a.inf_count) == \
            (b.total, b.failure_count, b.inf_count)
        assert to_csv([a]) == to_csv([b])

    def test_adversarial_single_flips_ride_along(self):
        """The sampled verifier appends near-collision pairs, so the total
        exceeds the requested sample count."""
        rep = verify_sampled("fx-tight", m=7, samples=100, seed=0)
        assert rep.total > 100
        assert rep.mode == "sampled"
        assert rep.passed

    def test_sampling_respects_the_promise(self):
        rep = verify_sampled("fp-linear", t=4, e=3, samples=300, seed=1)
        assert rep.passed


class TestReporting:
    def test_csv_is_deterministic_and_zeroes_seconds(self):
        rep = verify_exhaustive("fx-tight", m=5)
        text = to_csv([rep])
        assert text.splitlines()[0] == \
            "construction,m,t,e,p,total,failures,seconds"
        assert text.splitlines()[1] == "fx-tight,5,,,3,528,0,0.000"
        timed = to_csv([rep], timing=True)
        assert timed.splitlines()[1].rsplit(",", 1)[0] == \
            "fx-tight,5,,,3,528,0"

    def test_render_lines_caps_the_listing(self):
        rep = verify_exhaustive("fx-tight", m=5, precision_delta=-1)
        lines = rep.render_lines(limit=3)
        assert "249 failures" in lines[0]
        assert len([ln for ln in lines if ln.startswith("  y=")]) == 3

    def test_trace_saturated_matches_the_tally(self):
        spec, promises = make("fx-simple", m=5)
        strings = [format(v, "05b") for v in range(32)]
        manual = 0
        for i, y in enumerate(strings):
            for z in strings[i:]:
                if trace_saturated(forward(spec, spec.encode(y, z))):
                    manual += 1
        assert manual == 496
