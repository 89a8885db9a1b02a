import itertools
from functools import lru_cache

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docforge.metrics import (
    EvalReport,
    EvalRow,
    QAOutcome,
    anls,
    asr,
    cdmg,
    evaluate_outcomes,
    levenshtein,
    nls,
)


@lru_cache(maxsize=None)
def lev_oracle(a, b):
    """Textbook recursive definition; shares nothing with the DP."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    if a[0] == b[0]:
        return lev_oracle(a[1:], b[1:])
    return 1 + min(lev_oracle(a[1:], b), lev_oracle(a, b[1:]), lev_oracle(a[1:], b[1:]))


def all_ab_strings(max_len):
    for n in range(max_len + 1):
        for t in itertools.product("ab", repeat=n):
            yield "".join(t)


short = st.text(alphabet="abc", max_size=8)


def test_levenshtein_examples():
    assert levenshtein("", "abc") == 3
    assert levenshtein("abc", "abc") == 0
    assert levenshtein("kitten", "sitting") == lev_oracle("kitten", "sitting") == 3


def test_levenshtein_matches_oracle_small_exhaustive():
    words = list(all_ab_strings(5))
    for a in words:
        for b in words:
            assert levenshtein(a, b) == lev_oracle(a, b)


@given(short, short, short)
def test_levenshtein_triangle(a, b, c):
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


def test_nls_examples():
    assert nls("8176", "8176") == 1.0
    assert nls("abc", "abd") == pytest.approx(1 - 1 / 3)
    assert nls("", "") == 1.0
    assert nls("No Answer", "  no answer ") == 1.0
    assert nls("No Answer", "no answer", normalize=False) < 1.0


@given(st.text(max_size=10), st.text(max_size=10))
def test_nls_symmetric_and_bounded(a, b):
    s = nls(a, b)
    assert s == nls(b, a)
    assert 0.0 <= s <= 1.0
    assert nls(a, a) == 1.0


def _outcomes(preds, truths, optimized=None, targets=None, doc="d"):
    optimized = optimized or [False] * len(preds)
    targets = targets or [None] * len(preds)
    return [
        QAOutcome(doc, j, p, t, tg, o)
        for j, (p, t, o, tg) in enumerate(zip(preds, truths, optimized, targets))
    ]


def test_anls_threshold_examples():
    # NLS 0.4 falls under tau = 0.5
    assert anls(_outcomes(["abcde"], ["abxyz"])) == 0.0
    assert anls(_outcomes(["x", "yy"], ["x", "yy"])) == 1.0
    # NLS values 1.0, 0.6, 0.4
    outs = _outcomes(["abcde", "abcxy", "abxyz"], ["abcde", "abcde", "abcde"])
    assert [nls(o.prediction, o.ground_truth) for o in outs] == pytest.approx([1.0, 0.6, 0.4])
    assert anls(outs, tau=0.5) == pytest.approx((1.0 + 0.6 + 0.0) / 3)


def test_anls_empty_subset_is_undefined():
    outs = _outcomes(["a"], ["a"])
    assert anls(outs, subset="optimized") is None


@given(
    st.lists(st.tuples(short, short), min_size=1, max_size=6),
    st.floats(0, 1),
    st.floats(0, 1),
)
def test_anls_monotone_in_tau(pairs, t1, t2):
    outs = _outcomes([p for p, _ in pairs], [t for _, t in pairs])
    lo, hi = sorted((t1, t2))
    assert anls(outs, tau=lo) >= anls(outs, tau=hi)
    mean_nls = sum(nls(p, t) for p, t in pairs) / len(pairs)
    assert anls(outs, tau=0.0) == pytest.approx(mean_nls)


def test_asr_examples():
    doc1 = _outcomes(["No Answer"], ["8176"], [True], ["No Answer"], doc="1")
    doc2 = _outcomes(["8176"], ["8176"], [True], ["No Answer"], doc="2")
    assert asr(doc1 + doc2, "targeted") == 0.5
    # untargeted: one character off is already a success
    assert asr(_outcomes(["8175"], ["8176"], [True]), "untargeted") == 1.0
    assert asr(_outcomes(["8176"], ["8176"], [True]), "untargeted") == 0.0


def test_asr_targets_equal_predictions():
    preds = ["a", "b", "c"]
    outs = _outcomes(preds, ["x", "y", "z"], [True] * 3, preds)
    assert asr(outs, "targeted") == 1.0


@given(st.lists(st.lists(st.booleans(), min_size=5, max_size=5), min_size=1, max_size=8))
def test_asr_nonincreasing_in_nested_B(hits):
    rates = []
    for B in range(1, 6):
        outs = []
        for i, row in enumerate(hits):
            for j, h in enumerate(row):
                tgt = "T" if j < B else None
                outs.append(QAOutcome(str(i), j, "T" if h else "F", "G", tgt, j < B))
        rates.append(asr(outs, "targeted"))
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_cdmg_examples():
    assert cdmg(_outcomes(["a", "b"], ["a", "b"])) == 0.0
    assert cdmg(_outcomes(["x", "y"], ["a", "b"])) == 1.0
    outs = []
    for doc, wrong in (("1", {0}), ("2", {3})):
        preds = ["w" if j in wrong else "g" for j in range(4)]
        outs += _outcomes(preds, ["g"] * 4, doc=doc)
    assert cdmg(outs) == 0.25
    assert cdmg(_outcomes(["a"], ["a"], [True])) is None


def test_report_roundtrip(tmp_path):
    rep = EvalReport({"kind": "targeted_multi"})
    outs = _outcomes(["No Answer", "b"], ["a", "b"], [True, False], ["No Answer", None])
    rep.add(evaluate_outcomes(outs, "targeted", 1, anls_baseline=1.0))
    rep.add(EvalRow(5, 0.0, None, 1.0, 0.0, None, 1))
    text = rep.to_csv(tmp_path / "r.csv")
    assert "undefined" in text.splitlines()[2]
    again = EvalReport.from_json(rep.to_json())
    assert again.rows == rep.rows
    with pytest.raises(ValueError):
        rep.add(EvalRow(1, 1.5, None, None, None, None, 1))
