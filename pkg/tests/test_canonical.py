import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqd.symreg import (Const, Var, canonical_string, canonicalize, eval_expr, exp,
                        extract_linear_coeffs, monomial_basis, parse_expr)
from eqd.symreg.search import random_tree

NAMES = ["x", "y", "z"]
x, y, z = Var(0), Var(1), Var(2)


def test_normalizes_hand_built_tree():
    e = (y * x) - (z * y) + (Const(-1.0) * y)
    assert canonical_string(e, NAMES) == "-1*y + x*y - y*z"


def test_constant_folding():
    tree, text = canonicalize(Const(2.0) + Const(3.0))
    assert text == "5"
    assert tree.op == "const" and tree.value == 5.0


def test_idempotent_on_example():
    tree, text = canonicalize((y * x) - (z * y) + (Const(-1.0) * y), NAMES)
    assert canonicalize(tree, NAMES)[1] == text


def test_sign_normalized_factors():
    a = y * (Const(-1.0) + x - z)
    b = Const(-1.0) * y * (Const(1.0) - x + z)
    assert canonical_string(a, NAMES) == canonical_string(b, NAMES)


def test_commutative_sorting():
    assert canonical_string(x * y, NAMES) == canonical_string(y * x, NAMES)
    assert canonical_string(x + exp(y), NAMES) == canonical_string(exp(y) + x, NAMES)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 11))
def test_canonical_tree_is_equivalent_and_stable(seed, size):
    rng = np.random.default_rng(seed)
    e = random_tree(rng, 3, size)
    X = rng.uniform(0.5, 2.0, size=(8, 3))
    ref = eval_expr(e, X)
    tree, text = canonicalize(e, NAMES)
    assert canonicalize(tree, NAMES)[1] == text
    if np.all(np.isfinite(ref)) and np.max(np.abs(ref)) < 1e6:
        got = eval_expr(tree, X)
        np.testing.assert_allclose(got, ref, rtol=1e-8, atol=1e-8 * (1 + np.max(np.abs(ref))))


def test_table_lv_coefficients():
    e = parse_expr("-1.0003837*y + x*y - y*z", NAMES)
    lc = extract_linear_coeffs(e, NAMES)
    assert lc.representable
    assert lc.present() == {"y", "x*y", "y*z"}
    assert lc.coeffs["y"] == pytest.approx(-1.0003837, abs=1e-12)
    assert lc.coeffs["x*y"] == pytest.approx(1.0)
    assert lc.coeffs["y*z"] == pytest.approx(-1.0)
    assert all(v == 0.0 for k, v in lc.coeffs.items() if k not in lc.present())


def test_table_lorenz_coefficients():
    e = parse_expr("x*(35.004105 - z) - y", NAMES)
    lc = extract_linear_coeffs(e, NAMES)
    assert lc.present() == {"x", "x*z", "y"}
    assert lc.coeffs["x"] == pytest.approx(35.004105, abs=1e-12)
    assert lc.coeffs["x*z"] == -1.0 and lc.coeffs["y"] == -1.0


def test_zero_expression():
    lc = extract_linear_coeffs(Const(0.0), NAMES)
    assert lc.representable and not lc.present()


def test_non_polynomial_is_flagged():
    lc = extract_linear_coeffs(exp(x) + y, NAMES)
    assert not lc.representable
    assert lc.coeffs["y"] == 1.0


def test_budget_exceeded_is_flagged():
    e = x + y + z
    for _ in range(5):
        e = e * e
    lc = extract_linear_coeffs(e, NAMES, budget=50)
    assert not lc.representable


def test_basis_size():
    # 1, 3 linear, 6 quadratic
    assert len(monomial_basis(3, 2)) == 10
