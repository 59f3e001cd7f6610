"""Parser, printer and exact differentiation for the landscape language."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kramers_lab import expr
from kramers_lab.expr import (
    EvalError,
    ParseError,
    differentiate,
    evaluate,
    evaluate_many,
    parse,
    pretty,
)


# ---------------------------------------------------------------------------
# Finite-difference oracle: central differences, step 1e-5.

FD_STEP = 1e-5


def fd_partial(e, point, var, step=FD_STEP):
    p_plus = list(point)
    p_minus = list(point)
    p_plus[var] += step
    p_minus[var] -= step
    return (evaluate(e, p_plus) - evaluate(e, p_minus)) / (2 * step)


@pytest.mark.parametrize(
    "text, point, expected",
    [
        ("(x^2 - 1)^2 + y^2", (0.5, 1.0), 1.5625),
        ("x*y + 2", (3.0, -1.0), -1.0),
        ("exp(-x) * sin(y)", (0.0, math.pi / 2), 1.0),
        ("x^-2", (2.0, 0.0), 0.25),
        ("2e-3 + x1*x2", (2.0, 3.0), 6.002),
        ("log(x)", (math.e, 0.0), 1.0),
        ("6/3/2", (0.0, 0.0), 1.0),
        ("1 - 2 - 3", (0.0, 0.0), -4.0),
        ("x^2^3", (2.0, 0.0), 64.0),
        ("-x^2", (3.0, 0.0), -9.0),
        ("2 - -x", (5.0, 0.0), 7.0),
    ],
)
def test_parse_and_evaluate(text, point, expected):
    e = parse(text, 2)
    assert evaluate(e, point) == pytest.approx(expected, rel=1e-12)


def test_second_derivative_of_double_well_at_origin():
    # d^2/dx^2 of (x^2-1)^2 at 0 is -4; check symbolically and against the
    # finite-difference oracle applied to the symbolic first derivative.
    e = parse("(x^2 - 1)^2", 1)
    d1 = differentiate(e, 0)
    d2 = differentiate(d1, 0)
    assert evaluate(d2, (0.0,)) == pytest.approx(-4.0, abs=1e-12)
    assert fd_partial(d1, (0.0,), 0) == pytest.approx(-4.0, abs=1e-6)


@pytest.mark.parametrize(
    "text, dim, offset",
    [
        ("x1 + (", 2, 6),
        ("x +* y", 2, 3),
        ("(x + y", 2, 6),
        ("foo(x)", 2, 0),
        ("x ^ y", 2, 4),
        ("x1 + bogus", 2, 5),
    ],
)
def test_parse_error_offsets(text, dim, offset):
    with pytest.raises(ParseError) as err:
        parse(text, dim)
    assert err.value.offset == offset


def test_variable_range_checks():
    with pytest.raises(ParseError, match="out of range"):
        parse("z^2", 2)
    with pytest.raises(ParseError, match="out of range"):
        parse("x3 + 1", 2)
    # x5 is fine in dimension 5, and aliases address the first coordinates.
    e = parse("x5 + x", 5)
    assert evaluate(e, (1.0, 0.0, 0.0, 0.0, 10.0)) == 11.0


def test_evaluation_domain_errors():
    with pytest.raises(EvalError, match="division by zero"):
        evaluate(parse("1/x", 1), (0.0,))
    with pytest.raises(EvalError, match="log"):
        evaluate(parse("log(x)", 1), (-1.0,))
    with pytest.raises(EvalError, match="log"):
        evaluate(parse("log(x)", 1), (0.0,))
    with pytest.raises(EvalError):
        evaluate(parse("x^-1", 1), (0.0,))


def test_evaluation_rejects_nonfinite_results():
    # 1/x^4 at x = 1e-80 divides by a nonzero subnormal and overflows to
    # inf silently in IEEE arithmetic; sin(inf) then raises a bare
    # ValueError inside math -- both must surface as EvalError
    with pytest.raises(EvalError, match="non-finite"):
        evaluate(parse("1 / x^4", 1), (1e-80,))
    with pytest.raises(EvalError, match="domain error"):
        evaluate(parse("sin(1 / x^4)", 1), (1e-80,))
    with pytest.raises(EvalError, match="overflow"):
        evaluate(parse("x^4", 1), (1e100,))


def test_evaluate_many_matches_scalar():
    e = parse("exp(-x^2) * cos(y) + x/(y^2 + 1)", 2)
    rng = np.random.default_rng(7)
    pts = rng.uniform(-2, 2, size=(50, 2))
    vec = evaluate_many(e, pts)
    scal = np.array([evaluate(e, p) for p in pts])
    np.testing.assert_allclose(vec, scal, rtol=1e-14)


def test_evaluate_many_domain_error():
    e = parse("1/x", 1)
    with pytest.raises(EvalError):
        evaluate_many(e, np.array([[1.0], [0.0]]))


@pytest.mark.parametrize(
    "text, dtext",
    [
        ("sin(x^2)", "cos(x^2) * (2 * x)"),
        ("exp(3*x)", "exp(3 * x) * 3"),
        ("log(x^2 + 1)", "2 * x / (x^2 + 1)"),
        ("x/y", "1 / y"),  # derivative in x
    ],
)
def test_differentiate_known_forms(text, dtext):
    e = parse(text, 2)
    d = differentiate(e, 0)
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = rng.uniform(0.1, 2.0, size=2)
        assert evaluate(d, p) == pytest.approx(
            evaluate(parse(dtext, 2), p), rel=1e-12
        )


def test_constant_folding_in_derivatives():
    x = parse("x", 1)
    assert differentiate(x, 0) == expr.constant(1.0)
    d = differentiate(parse("x^2", 1), 0)
    # 2 * x, not 2 * x^1 * 1
    assert d == expr.Expr("prod", (expr.constant(2.0), expr.variable(0)))
    assert differentiate(parse("y^3", 2), 0) == expr.constant(0.0)


# ---------------------------------------------------------------------------
# Randomized symbolic-vs-finite-difference agreement (the module-level slice
# of the acceptance check; the full 1000-pair version lives in
# test_acceptance.py).

def random_tame_expr(rng, dim, depth):
    """Random expression whose value and derivatives stay O(1) on [-2, 2]^d."""
    if depth == 0 or rng.random() < 0.25:
        if rng.random() < 0.5:
            return expr.variable(int(rng.integers(dim)))
        return expr.constant(round(float(rng.uniform(-3, 3)), 3))
    kind = rng.choice(["sum", "prod", "quot", "pow", "neg", "exp", "log", "sin", "cos"])
    a = random_tame_expr(rng, dim, depth - 1)
    if kind == "sum":
        return a + random_tame_expr(rng, dim, depth - 1)
    if kind == "prod":
        return a * random_tame_expr(rng, dim, depth - 1)
    if kind == "quot":
        # keep denominators bounded away from zero
        b = random_tame_expr(rng, dim, depth - 1)
        return a / (b * b * expr.constant(0.1) + expr.constant(1.5))
    if kind == "pow":
        return a ** int(rng.integers(2, 4))
    if kind == "neg":
        return -a
    if kind == "exp":
        return expr.func("exp", expr.constant(0.25) * a)
    if kind == "log":
        return expr.func("log", a * a * expr.constant(0.1) + expr.constant(0.5))
    return expr.func(kind, a)


def test_symbolic_gradient_matches_finite_differences():
    rng = np.random.default_rng(20240817)
    checked = 0
    while checked < 200:
        dim = int(rng.integers(1, 4))
        e = random_tame_expr(rng, dim, depth=4)
        point = rng.uniform(-2, 2, size=dim)
        var = int(rng.integers(dim))
        d = differentiate(e, var)
        try:
            sym = evaluate(d, point)
            fd = fd_partial(e, point, var)
        except EvalError:
            continue
        if abs(sym) > 1e4:  # badly scaled draws stress the FD step, skip
            continue
        assert fd == pytest.approx(sym, rel=1e-6, abs=1e-6), pretty(e)
        checked += 1


# ---------------------------------------------------------------------------
# parse / pretty round-trip

@st.composite
def ast_nodes(draw, max_depth=5):
    if max_depth == 0:
        branch = draw(st.integers(0, 1))
        if branch == 0:
            return expr.constant(draw(st.floats(0, 100, allow_nan=False)))
        return expr.variable(draw(st.integers(0, 2)))
    kind = draw(st.sampled_from(
        ["leaf", "sum", "prod", "quot", "pow", "neg", "exp", "log", "sin", "cos"]
    ))
    if kind == "leaf":
        return draw(ast_nodes(max_depth=0))
    child = draw(ast_nodes(max_depth=max_depth - 1))
    if kind in ("sum", "prod", "quot"):
        other = draw(ast_nodes(max_depth=max_depth - 1))
        return expr.Expr(kind, (child, other))
    if kind == "pow":
        return expr.Expr("pow", (child,), exponent=draw(st.integers(-4, 6)))
    if kind == "neg":
        return expr.Expr("neg", (child,))
    return expr.Expr(kind, (child,))


@settings(max_examples=300, deadline=None)
@given(ast_nodes())
def test_parse_pretty_parse_is_idempotent(tree):
    canonical = parse(pretty(tree), 3)
    assert parse(pretty(canonical), 3) == canonical


@settings(max_examples=200, deadline=None)
@given(ast_nodes())
def test_pretty_preserves_value(tree):
    reparsed = parse(pretty(tree), 3)
    point = (0.537, -1.22, 0.81)
    try:
        expected = evaluate(tree, point)
    except (EvalError, OverflowError):
        return
    got = evaluate(reparsed, point)
    if math.isfinite(expected):
        assert got == pytest.approx(expected, rel=1e-12, abs=1e-300)
