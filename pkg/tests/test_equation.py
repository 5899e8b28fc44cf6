import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.services.equation import (
    EquationParseError,
    Interval,
    MissingBoundError,
    StructuralEquation,
    contains,
    format_equation,
    parse_equation,
    propagate_interval,
)


def parse_error(text, target='Y', allowed=('A', 'B')):
    with pytest.raises(EquationParseError) as excinfo:
        parse_equation(text, target, set(allowed))
    return excinfo.value


# ---------------------------------------------------------------------------
# parse_equation
# ---------------------------------------------------------------------------

def test_parse_canonical_equation():
    eq = parse_equation('GC = 0.5 + 1.2*IL6 - 0.3*TNF + N(0, 0.25)', 'GC', {'IL6', 'TNF'})
    assert eq.intercept == 0.5
    assert eq.coefficients == {'IL6': 1.2, 'TNF': -0.3}
    assert eq.noise_variance == 0.25
    assert not eq.noise_omitted
    assert eq.omitted_parents == ()


def test_parse_root_constant_defaults_noise_to_zero():
    eq = parse_equation('Y = 3.0', 'Y', set())
    assert eq.intercept == 3.0
    assert eq.coefficients == {}
    assert eq.noise_variance == 0.0
    assert eq.noise_omitted


def test_parse_variable_first_products_and_scientific_notation():
    eq = parse_equation('Y=A*2.5e-3+-1E2*B+N(0,1e-4)', 'Y', {'A', 'B'})
    assert eq.coefficients == {'A': 2.5e-3, 'B': -100.0}
    assert eq.intercept == 0.0
    assert eq.noise_variance == 1e-4


def test_parse_leading_sign_and_whitespace():
    eq = parse_equation('  Y =  - 2  +  A  ', 'Y', {'A'})
    assert eq.intercept == -2.0
    assert eq.coefficients == {'A': 1.0}


def test_parse_records_omitted_parents():
    eq = parse_equation('Y = 1 + 2*A + N(0, 1)', 'Y', {'A', 'B'})
    assert eq.omitted_parents == ('B',)
    assert eq == StructuralEquation('Y', 1.0, {'A': 2.0}, 1.0)


def test_variable_product_is_nonlinear():
    error = parse_error('Y = 2*A + A*B')
    assert error.code == 'E3'
    assert error.fragment == 'B'


@pytest.mark.parametrize('text', [
    'Y = A^2',
    'Y = 3*A**2',
    'Y = exp(A)',
    'Y = 2*A*B',
    'Y = A/2',
])
def test_nonlinear_forms_are_e3(text):
    assert parse_error(text).code == 'E3'


def test_unknown_variable_is_e1_with_span():
    text = 'Y = 1 + 0.5*CRP'
    error = parse_error(text)
    assert error.code == 'E1'
    assert error.fragment == 'CRP'
    assert text[error.span[0]:error.span[1]] == 'CRP'


def test_target_on_right_hand_side_is_e1():
    assert parse_error('Y = 1 + 0.5*Y').code == 'E1'


def test_wrong_left_hand_side_is_e1():
    assert parse_error('A = 1').code == 'E1'


def test_duplicate_coefficient_is_e2():
    error = parse_error('Y = 1*A + 2*A')
    assert error.code == 'E2'
    assert error.fragment == 'A'


@pytest.mark.parametrize('text', [
    '',
    'the equation is unknown',
    'Y = ',
    'Y = 1 +',
    'Y = 1 + N(1, 2)',
    'Y = N(0, 1) + 2*A',
    'Y = 1 - N(0, 1)',
    'Y = 1 # comment',
    'Y = 2*3',
])
def test_malformed_text_is_e4(text):
    assert parse_error(text).code == 'E4'


@pytest.mark.parametrize('text', [
    'Y = 1 + 1e400*A',
    'Y = A*1e400 + N(0, 1)',
    'Y = 1e400',
    'Y = 1 + N(0, 1e400)',
    'Y = 1e308 + 1e308 + A',
])
def test_overflowing_numbers_are_e4(text):
    error = parse_error(text)
    assert error.code == 'E4'
    assert 'out of range' in error.message


def test_overflowing_number_span_points_at_literal():
    error = parse_error('Y = 1 + 1e400*A')
    assert error.fragment == '1e400'
    assert error.span == (8, 13)


def test_non_string_input_is_e4():
    with pytest.raises(EquationParseError) as excinfo:
        parse_equation(None, 'Y', set())
    assert excinfo.value.code == 'E4'


@given(st.text(alphabet='ABCDEFGHIJKLMOPQRSTUVWXYZ', min_size=1, max_size=4))
def test_foreign_variable_rejected_anywhere(name):
    allowed = {'P1', 'P2'}
    if name in allowed or name == 'Y':
        return
    for text in (f"Y = 1 + 2*{name}", f"Y = {name}*3 + P1", f"Y = 1 + P1 - 0.5*{name} + N(0, 1)"):
        with pytest.raises(EquationParseError) as excinfo:
            parse_equation(text, 'Y', allowed)
        assert excinfo.value.code == 'E1'


# ---------------------------------------------------------------------------
# format_equation
# ---------------------------------------------------------------------------

def test_format_canonical_order_and_signs():
    eq = StructuralEquation('Y', 1.0, {'B': -2.0, 'A': 3.0}, 0.5)
    assert format_equation(eq) == 'Y = 1 + 3*A - 2*B + N(0, 0.5)'


def test_format_empty_equation():
    assert format_equation(StructuralEquation('Y', 0.0, {}, 0.0)) == 'Y = 0 + N(0, 0)'


finite = st.floats(allow_nan=False, allow_infinity=False)


@st.composite
def equations(draw):
    parents = draw(st.sets(st.sampled_from(['A', 'B', 'C', 'D', 'X_1', 'long_name']), max_size=6))
    return StructuralEquation(
        target='Y',
        intercept=draw(finite),
        coefficients={p: draw(finite) for p in sorted(parents)},
        noise_variance=draw(st.floats(min_value=0, allow_nan=False, allow_infinity=False)),
    )


@settings(max_examples=500)
@given(equations())
def test_format_parse_round_trip(eq):
    parsed = parse_equation(format_equation(eq), 'Y', set(eq.coefficients))
    assert parsed == eq
    for parent, value in eq.coefficients.items():
        assert math.copysign(1.0, parsed.coefficients[parent]) == math.copysign(1.0, value)


# ---------------------------------------------------------------------------
# intervals
# ---------------------------------------------------------------------------

def test_interval_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        Interval(2.0, 1.0)


def test_propagate_monotone_map():
    eq = StructuralEquation('Y', 2.0, {'X': 0.5})
    assert propagate_interval(eq, {'X': Interval(0, 10)}) == Interval(2, 7)


def test_propagate_mixed_signs():
    eq = StructuralEquation('Y', 1.0, {'A': -2.0, 'B': 3.0})
    c1 = propagate_interval(eq, {'A': Interval(0, 1), 'B': Interval(-1, 1)})
    assert c1 == Interval(-4, 4)


def test_propagate_constant():
    assert propagate_interval(StructuralEquation('Y', 5.0, {}), {}) == Interval(5, 5)


def test_propagate_missing_bound():
    with pytest.raises(MissingBoundError):
        propagate_interval(StructuralEquation('Y', 0.0, {'A': 1.0}), {})


def test_propagate_overflow_widens_to_unbounded():
    eq = StructuralEquation('Y', 1.0, {'A': 1e308, 'B': -1e308})
    c1 = propagate_interval(eq, {'A': Interval(5, 10), 'B': Interval(5, 10)})
    assert c1 == Interval(-math.inf, math.inf)
    assert not contains(Interval(0, 10), c1)


@pytest.mark.parametrize('outer, inner, expected', [
    (Interval(0, 100), Interval(2, 7), True),
    (Interval(0, 5), Interval(2, 7), False),
    (Interval(0, 5), Interval(0, 5), True),
    (Interval(0, 5), Interval(-1e-12, 5), False),
])
def test_contains(outer, inner, expected):
    assert contains(outer, inner) is expected


def _sample_box(rng, bounds, n):
    """Uniform points with a share of exact endpoints so corners get visited"""
    lo = np.array([b.lo for b in bounds])
    hi = np.array([b.hi for b in bounds])
    uniform = rng.uniform(lo, hi, size=(n, len(bounds)))
    at_endpoint = rng.random((n, len(bounds))) < 0.5
    endpoint = np.where(rng.random((n, len(bounds))) < 0.5, lo, hi)
    return np.where(at_endpoint, endpoint, uniform)


def test_interval_soundness_monte_carlo():
    rng = np.random.default_rng(20240501)
    for _ in range(100):
        k = int(rng.integers(0, 7))
        parents = [f"P{i}" for i in range(k)]
        coefficients = {p: float(rng.normal(0, 3)) for p in parents}
        bounds = {}
        for p in parents:
            a, b = sorted(rng.uniform(-50, 50, size=2))
            bounds[p] = Interval(float(a), float(b))
        eq = StructuralEquation('Y', float(rng.normal(0, 10)), coefficients)
        c1 = propagate_interval(eq, bounds)

        if not parents:
            assert c1 == Interval(eq.intercept, eq.intercept)
            continue
        points = _sample_box(rng, [bounds[p] for p in parents], 100_000)
        values = eq.intercept + points @ np.array([coefficients[p] for p in parents])
        tolerance = 1e-9 * (abs(c1.lo) + abs(c1.hi) + 1)
        assert values.min() >= c1.lo - tolerance
        assert values.max() <= c1.hi + tolerance
        assert values.min() - c1.lo <= 0.01 * c1.width + tolerance
        assert c1.hi - values.max() <= 0.01 * c1.width + tolerance
