import math

import numpy as np
import pytest

from stochstab.expr import (ExpressionError, compile_expr, evaluate, matrix_field, parse, scalar_field,
                            vector_field)


def value(text, **env):
    return evaluate(parse(text), env)


@pytest.mark.parametrize("text, expected", [
    ("1 + 2 * 3", 7.0),
    ("-2^2", -4.0),
    ("2^3^2", 512.0),
    ("2 ** 3", 8.0),
    ("(1 + 2) * 3", 9.0),
    ("1e-3 * 1000", 1.0),
    ("sin(pi / 2)^2", 1.0),
    ("norm(3, 4)", 5.0),
    ("abs(-2) + sign(-3)", 1.0),
    ("sqrt(exp(log(4)))", 2.0),
])
def test_arithmetic(text, expected):
    assert value(text, pi=math.pi) == pytest.approx(expected, rel=1e-15)


def test_errors_carry_line_and_column():
    with pytest.raises(ExpressionError) as err:
        parse("x1 +", where="drift[0]")
    assert err.value.column == 5 and "drift[0]" in str(err.value)
    with pytest.raises(ExpressionError, match="unknown function"):
        parse("tan(x)")
    with pytest.raises(ExpressionError, match="arguments"):
        parse("sin(x, y)")
    with pytest.raises(ExpressionError, match="unknown symbol 'y'"):
        compile_expr("x + y", ["x"])


def test_fields_broadcast_over_leading_axes():
    e = [compile_expr(t, ["x1", "x2", "u"]) for t in ("-x1 + u", "2")]
    f = vector_field(e, ["x1", "x2"], ["u"])
    x = np.array([[1.0, 0.0], [2.0, 5.0]])
    assert f(x, np.array([[0.5], [1.0]])).tolist() == [[-0.5, 2.0], [-1.0, 2.0]]
    m = matrix_field([[compile_expr("-x2", ["x1", "x2"])], [compile_expr("x1", ["x1", "x2"])]], ["x1", "x2"])
    assert m(x).shape == (2, 2, 1) and m(x)[1, :, 0].tolist() == [-5.0, 2.0]
    s = scalar_field(compile_expr("c * (x1^2 + x2^2)", ["x1", "x2", "c"]), ["x1", "x2"], {"c": 0.5})
    assert s(x).tolist() == [0.5, 14.5]
