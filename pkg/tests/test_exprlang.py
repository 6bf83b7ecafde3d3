import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slowhomog.exprlang import EvaluationError, ExprSyntaxError, as_expr, evaluate, gradient_fd, parse, pretty


def test_radius_expression_at_quarter():
    assert evaluate(parse("0.25 + 0.05*sin(2*pi*x1)"), {"x1": 0.25}) == pytest.approx(0.3, abs=1e-15)


def test_square():
    assert evaluate(parse("x1^2"), {"x1": 2.0}) == 4.0


def test_constant_without_bindings():
    assert evaluate(parse("3.5"), {}) == 3.5


def test_unbalanced_parenthesis_position():
    with pytest.raises(ExprSyntaxError) as info:
        parse("(x1 + ")
    assert info.value.position == 6


@pytest.mark.parametrize(
    "text, pos",
    [("x1 + y", 5), ("2 * ", 4), ("sin(x1", 6), ("", 0), ("x1 $ 2", 3), ("x1)", 2)],
)
def test_syntax_error_positions(text, pos):
    with pytest.raises(ExprSyntaxError) as info:
        parse(text)
    assert info.value.position == pos


@pytest.mark.parametrize(
    "text, expected",
    [
        ("2^3^2", 512.0),
        ("-2^2", -4.0),
        ("8/4/2", 1.0),
        ("10-4-3", 3.0),
        ("2+3*4", 14.0),
        ("(2+3)*4", 20.0),
        ("2*-3", -6.0),
        ("exp(0) + sqrt(16) + cos(0)", 6.0),
    ],
)
def test_precedence_and_associativity(text, expected):
    assert evaluate(parse(text), {}) == expected


def test_unbound_variable_is_named():
    with pytest.raises(EvaluationError, match="x2"):
        evaluate(parse("x1 + x2"), {"x1": 1.0})


@pytest.mark.parametrize("text", ["sqrt(-1)", "1/(x1-1)", "exp(1000)", "(-2)^0.5", "0^-1"])
def test_domain_errors(text):
    with pytest.raises(EvaluationError):
        evaluate(parse(text), {"x1": 1.0})


def test_array_evaluation_matches_scalar():
    e = parse("sin(2*pi*X1)*x2 + X2^2")
    X1 = np.linspace(0, 1, 7)
    vals = e.evaluate({"X1": X1, "X2": 0.3, "x2": 2.0})
    ref = [evaluate(e, {"X1": v, "X2": 0.3, "x2": 2.0}) for v in X1]
    np.testing.assert_array_equal(vals, ref)


def test_variables_and_constant_flag():
    assert parse("x1*X2 + pi").variables == {"x1", "X2"}
    assert parse("2*pi").is_constant


def test_gradient_fd():
    e = parse("x1^3 + x2")
    assert gradient_fd(e, "x1", {"x1": 2.0, "x2": 0.0}) == pytest.approx(12.0, rel=1e-8)


def test_as_expr_accepts_numbers():
    assert as_expr(0.25).evaluate({}) == 0.25


def _exprs():
    leaf = st.one_of(
        st.floats(0.0, 100.0, allow_nan=False).map(repr),
        st.sampled_from(["x1", "x2", "X1", "X2", "pi"]),
    )

    def extend(children):
        return st.one_of(
            st.tuples(children, st.sampled_from(["+", "-", "*"]), children).map(lambda t: f"({t[0]}) {t[1]} ({t[2]})"),
            children.map(lambda c: f"-({c})"),
            children.map(lambda c: f"sin({c})"),
            children.map(lambda c: f"cos({c})"),
        )

    return st.recursive(leaf, extend, max_leaves=12)


ENV = {"x1": 0.3, "x2": -1.2, "X1": 0.7, "X2": 2.5}


@settings(max_examples=200, deadline=None)
@given(_exprs())
def test_pretty_round_trip(text):
    e = parse(text)
    again = parse(pretty(e))
    assert pretty(again) == pretty(e)
    assert evaluate(again, ENV) == evaluate(e, ENV)


@settings(max_examples=100, deadline=None)
@given(_exprs())
def test_evaluation_is_deterministic(text):
    e = parse(text)
    a, b = evaluate(e, ENV), evaluate(e, ENV)
    assert a == b or (math.isnan(a) and math.isnan(b))
