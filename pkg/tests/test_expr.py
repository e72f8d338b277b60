import math

import pytest
from hypothesis import given, settings, strategies as st

from divkd import expr
from divkd.expr import Defect


def test_evaluate_basic():
    assert expr.evaluate(("+", "N0", "N1"), (2, 3)).value == 5
    assert expr.evaluate(("×", "N0", "+", "N1", "N2"), (2, 3, 4)).value == 14
    assert expr.evaluate(("−", "N1", "N0"), (2, 9)).value == 7
    assert expr.evaluate(("÷", "N0", "N1"), (9, 4)).value == 2.25
    assert expr.evaluate(("^", "N0", "N1"), (2, 10)).value == 1024


def test_constants_and_literals():
    assert expr.evaluate(("×", "3.14", "N0"), (2,), {"3.14": 3.14}).value == pytest.approx(6.28)
    assert expr.evaluate(("+", "1", "N0"), (2,)).value == 3


@pytest.mark.parametrize("eq,q,defect", [
    (("÷", "N0", "N1"), (1, 0), Defect.DIVISION_BY_ZERO),
    (("÷", "N0", "N1"), (1, 1e-13), Defect.DIVISION_BY_ZERO),
    (("^", "N0", "N1"), (10, 400), Defect.OVERFLOW),
    (("^", "N0", "N1"), (-8, 0.5), Defect.OVERFLOW),
    (("+", "N0", "N5"), (1, 2), Defect.INVALID_QUANTITY_INDEX),
    (("+", "N0"), (1,), Defect.MALFORMED_PREFIX),
    (("N0", "N1"), (1, 2), Defect.MALFORMED_PREFIX),
    ((), (), Defect.MALFORMED_PREFIX),
    (("+", "N0", "apple"), (1,), Defect.MALFORMED_PREFIX),
])
def test_defects(eq, q, defect):
    out = expr.evaluate(eq, q)
    assert not out.ok and out.defect is defect and out.value is None


def test_validate_prefix():
    assert expr.validate_prefix(("N0",))
    assert expr.validate_prefix(("+", "N0", "×", "N1", "N2"))
    assert not expr.validate_prefix(("+", "N0", "N1", "N2"))
    assert not expr.validate_prefix(("+",))
    assert not expr.validate_prefix(())


def test_answers_match_tolerance():
    assert expr.answers_match(1.00009, 1.0)
    assert not expr.answers_match(1.00011, 1.0)
    assert expr.answers_match(10000.9, 10000.0)
    assert not expr.answers_match(10001.1, 10000.0)
    assert not expr.answers_match(float("nan"), 1.0)
    assert not expr.answers_match(float("inf"), float("inf"))


def test_infix_round_trip():
    eq = expr.infix_to_prefix("N0 * (N1 + N2) - N3 / 2")
    assert eq == ("−", "×", "N0", "+", "N1", "N2", "÷", "N3", "2")
    assert expr.infix_to_prefix(expr.prefix_to_infix(eq)) == eq


def test_infix_power_right_associative():
    assert expr.infix_to_prefix("2 ^ 3 ^ 2") == ("^", "2", "^", "3", "2")
    assert expr.evaluate(expr.infix_to_prefix("2 ^ 3 ^ 2")).value == 512


def test_infix_errors():
    for bad in ("(N0 + N1", "N0 +", "N0 N1", "N0 + + N1", ""):
        with pytest.raises(expr.ParseError):
            expr.infix_to_prefix(bad)


def test_parse_format_aliases():
    assert expr.parse_prefix("* N0 - N1 N2") == ("×", "N0", "−", "N1", "N2")
    assert expr.format_prefix(("+", "N0", "N1")) == "+ N0 N1"


def test_enumeration_matches_closed_form():
    for max_tokens in (1, 3, 5):
        eqs = list(expr.enumerate_equations(max_tokens, 2, ("1",), ("+", "×")))
        assert len(eqs) == len(set(eqs)) == expr.count_equations(max_tokens, 3, 2)
        assert all(expr.validate_prefix(e) for e in eqs)


def test_correct_equations():
    found = expr.correct_equations(3, (2, 3), 5.0, operators=("+", "−"))
    assert set(found) == {("+", "N0", "N1"), ("+", "N1", "N0")}


# ---------------------------------------------------------------- properties

def _tree(depth):
    leaf = st.sampled_from(["N0", "N1", "N2"]).map(lambda t: (t,))
    if depth == 0:
        return leaf
    sub = _tree(depth - 1)
    node = st.tuples(st.sampled_from(["+", "−", "×", "÷"]), sub, sub).map(lambda x: (x[0],) + x[1] + x[2])
    return st.one_of(leaf, node)


def _reference(eq, q):
    def go(i):
        t = eq[i]
        if t in ("+", "−", "×", "÷"):
            a, j = go(i + 1)
            b, k = go(j)
            if t == "÷":
                if abs(b) < 1e-12:
                    raise ZeroDivisionError
                return a / b, k
            return {"+": a + b, "−": a - b, "×": a * b}[t], k
        return q[int(t[1:])], i + 1
    return go(0)[0]


quantities = st.tuples(*[st.integers(1, 50).map(float)] * 3)


@settings(max_examples=300, deadline=None)
@given(_tree(3), quantities)
def test_evaluate_matches_recursive_reference(eq, q):
    assert expr.validate_prefix(eq)
    out = expr.evaluate(eq, q)
    try:
        ref = _reference(eq, q)
    except ZeroDivisionError:
        assert out.defect is Defect.DIVISION_BY_ZERO
        return
    if not math.isfinite(ref):
        assert not out.ok
    else:
        assert out.ok and out.value == ref


@settings(max_examples=300, deadline=None)
@given(_tree(3))
def test_infix_prefix_round_trip(eq):
    assert expr.infix_to_prefix(expr.prefix_to_infix(eq)) == eq


@settings(max_examples=300)
@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_answers_match_symmetric(a, b):
    assert expr.answers_match(a, b) == expr.answers_match(b, a)
    assert expr.answers_match(a, a)
