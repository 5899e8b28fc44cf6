"""
Linear structural equations: grammar, parser, formatter and interval arithmetic

Canonical form:  target = b0 + b1*P1 - b2*P2 + N(0, sigma^2)
"""
import logging
import math
import re
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)


class EquationError(Exception):
    """Base class for equation module errors"""


class EquationParseError(EquationError):
    """
    Raised when model output cannot be read as a linear structural equation

    Codes:
        E1: reference to a variable outside the allowed parents (or the target
            used on the right-hand side)
        E2: duplicate coefficient for the same parent
        E3: non-linear term (variable product, power, function application)
        E4: no parseable equation (empty text, missing '=', other syntax)
    """

    def __init__(self, code, message, span=(0, 0), fragment=''):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
        self.span = tuple(span)
        self.fragment = fragment

    def to_dict(self):
        return {
            'code': self.code,
            'message': self.message,
            'span': list(self.span),
            'fragment': self.fragment,
        }


class MissingBoundError(EquationError):
    """A coefficient refers to a parent without a bound"""


@dataclass(frozen=True)
class Interval:
    """Closed interval [lo, hi] of reals"""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError(f"Invalid interval: lo={self.lo!r} > hi={self.hi!r}")

    @property
    def width(self):
        return self.hi - self.lo

    def scale(self, factor):
        """Image of the interval under x -> factor * x"""
        a, b = factor * self.lo, factor * self.hi
        return Interval(min(a, b), max(a, b))

    def to_list(self):
        return [self.lo, self.hi]

    def __str__(self):
        return f"[{format_number(self.lo)}, {format_number(self.hi)}]"


@dataclass(frozen=True)
class StructuralEquation:
    """
    One node's linear-Gaussian structural equation

    The flags record deviations seen while parsing model output; they are not
    part of equality.
    """

    target: str
    intercept: float
    coefficients: dict
    noise_variance: float = 0.0
    noise_omitted: bool = field(default=False, compare=False)
    omitted_parents: tuple = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'coefficients', dict(self.coefficients))
        values = [self.intercept, self.noise_variance, *self.coefficients.values()]
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"Non-finite value in equation for {self.target}")
        if self.noise_variance < 0:
            raise ValueError(f"Negative noise variance for {self.target}: {self.noise_variance!r}")

    def to_dict(self):
        """Serialize in the ground-truth record format of DAG-spec files"""
        return {
            'intercept': self.intercept,
            'coefficients': {k: self.coefficients[k] for k in sorted(self.coefficients)},
            'noise_variance': self.noise_variance,
        }

    @classmethod
    def from_dict(cls, target, record):
        return cls(
            target=target,
            intercept=float(record['intercept']),
            coefficients={k: float(v) for k, v in record['coefficients'].items()},
            noise_variance=float(record.get('noise_variance', 0.0)),
        )


# ============================================================================
# TOKENIZER
# ============================================================================

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>\*\*|[-+*/^=(),])
  | (?P<other>.)
""", re.VERBOSE | re.DOTALL)

IDENTIFIER_RE = re.compile(r'^[A-Za-z_][A-Za-z0-9_]*$')

NOISE_NAME = 'N'


@dataclass(frozen=True)
class _Token:
    kind: str
    value: str
    start: int
    end: int


def _tokenize(text):
    tokens = []
    for match in _TOKEN_RE.finditer(text):
        kind = match.lastgroup
        if kind == 'ws':
            continue
        if kind == 'other':
            raise EquationParseError(
                'E4', f"Unexpected character {match.group()!r}",
                match.span(), match.group()
            )
        tokens.append(_Token(kind, match.group(), match.start(), match.end()))
    return tokens


# ============================================================================
# PARSER
# ============================================================================

class _Parser:
    """Recursive-descent reader for the canonical equation grammar"""

    def __init__(self, text, target, allowed_parents):
        self.text = text
        self.target = target
        self.allowed = frozenset(allowed_parents)
        self.tokens = _tokenize(text)
        self.pos = 0
        self.constants = []
        self.coefficients = {}
        self.noise_variance = None

    # -- token helpers -------------------------------------------------------

    def peek(self, offset=0):
        index = self.pos + offset
        return self.tokens[index] if index < len(self.tokens) else None

    def advance(self):
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def at_op(self, *values, offset=0):
        token = self.peek(offset)
        return token is not None and token.kind == 'op' and token.value in values

    def error(self, code, message, token=None):
        if token is None:
            end = len(self.text)
            return EquationParseError(code, message, (end, end), '')
        return EquationParseError(code, message, (token.start, token.end), token.value)

    def number(self, token):
        value = float(token.value)
        if not math.isfinite(value):
            raise self.error('E4', f"Number {token.value} is out of range", token)
        return value

    # -- grammar -------------------------------------------------------------

    def parse(self):
        if not self.tokens:
            raise self.error('E4', 'No equation found (empty text)')

        lhs = self.peek()
        if lhs.kind != 'ident' or not self.at_op('=', offset=1):
            raise self.error('E4', "Expected '<target> = ...'", lhs)
        if lhs.value != self.target:
            raise self.error(
                'E1', f"Left-hand side must be the target {self.target!r}, got {lhs.value!r}", lhs
            )
        self.pos = 2

        if self.peek() is None:
            raise self.error('E4', "Missing right-hand side after '='")

        sign = 1.0
        if self.at_op('+', '-'):
            sign = -1.0 if self.advance().value == '-' else 1.0

        while True:
            self.term(sign)
            token = self.peek()
            if token is None:
                break
            if self.at_op('+', '-'):
                sign = -1.0 if self.advance().value == '-' else 1.0
                if self.peek() is None:
                    raise self.error('E4', 'Dangling operator at end of equation', token)
                continue
            raise self.reject_continuation(token)

        try:
            intercept = math.fsum(self.constants) if self.constants else 0.0
        except OverflowError:
            intercept = math.inf
        if len(self.constants) == 1:
            intercept = self.constants[0]
        if not math.isfinite(intercept):
            raise self.error('E4', 'Sum of constant terms is out of range')

        return StructuralEquation(
            target=self.target,
            intercept=intercept,
            coefficients=self.coefficients,
            noise_variance=0.0 if self.noise_variance is None else self.noise_variance,
            noise_omitted=self.noise_variance is None,
            omitted_parents=tuple(sorted(self.allowed - set(self.coefficients))),
        )

    def term(self, sign):
        # one extra unary sign is allowed: "+ -0.3*TNF"
        if self.at_op('+', '-'):
            if self.advance().value == '-':
                sign = -sign

        token = self.peek()
        if token is None:
            raise self.error('E4', 'Expected a term')

        if self.noise_variance is not None:
            raise self.error('E4', 'The noise term must be the last term', token)

        if token.kind == 'number':
            self.advance()
            value = sign * self.number(token)
            if self.at_op('*'):
                star = self.advance()
                operand = self.peek()
                if operand is None:
                    raise self.error('E4', "Expected a variable after '*'", star)
                if operand.kind != 'ident':
                    raise self.error('E4', 'Products of constants are not part of the grammar', operand)
                self.advance()
                self.coefficient(operand, value)
            else:
                self.constants.append(value)
            return

        if token.kind == 'ident':
            if token.value == NOISE_NAME and self.at_op('(', offset=1):
                self.noise(token, sign)
                return
            if self.at_op('(', offset=1):
                raise self.error('E3', f"Function application {token.value}(...) is not linear", token)
            self.advance()
            self.check_variable(token)
            if self.at_op('*'):
                star = self.advance()
                operand = self.peek()
                if operand is None:
                    raise self.error('E4', "Expected a number after '*'", star)
                if operand.kind == 'ident':
                    self.check_variable(operand)
                    raise self.error('E3', f"Product of variables {token.value}*{operand.value}", operand)
                if operand.kind != 'number':
                    raise self.error('E4', f"Unexpected {operand.value!r}", operand)
                self.advance()
                self.coefficient(token, sign * self.number(operand))
            else:
                # bare variable: unit coefficient
                self.coefficient(token, sign * 1.0)
            return

        raise self.error('E4', f"Unexpected {token.value!r}", token)

    def check_variable(self, token):
        if token.value == self.target:
            raise self.error('E1', f"Target {self.target!r} cannot appear on the right-hand side", token)
        if token.value not in self.allowed:
            raise self.error('E1', f"Variable {token.value!r} is not a direct parent of {self.target!r}", token)

    def coefficient(self, ident, value):
        self.check_variable(ident)
        if ident.value in self.coefficients:
            raise self.error('E2', f"Duplicate coefficient for {ident.value!r}", ident)
        self.coefficients[ident.value] = value

    def noise(self, name, sign):
        if sign < 0:
            raise self.error('E4', 'The noise term must be added, not subtracted', name)
        self.advance()  # N
        self.advance()  # (
        mean = self.peek()
        if mean is None or mean.kind != 'number':
            raise self.error('E4', 'Expected N(0, variance)', mean or name)
        if self.number(mean) != 0.0:
            raise self.error('E4', 'The noise term must have mean 0', mean)
        self.advance()
        if not self.at_op(','):
            raise self.error('E4', "Expected ',' in noise term", self.peek() or name)
        self.advance()
        variance = self.peek()
        if variance is None or variance.kind != 'number':
            raise self.error('E4', 'Expected a non-negative variance in noise term', variance or name)
        self.advance()
        if not self.at_op(')'):
            raise self.error('E4', "Expected ')' to close noise term", self.peek() or variance)
        self.advance()
        self.noise_variance = self.number(variance)

    def reject_continuation(self, token):
        """Classify a token that cannot follow a complete term"""
        if self.at_op('^', '**'):
            return self.error('E3', 'Powers are not linear', token)
        if self.at_op('*', '/'):
            operand = self.peek(1)
            previous = self.tokens[self.pos - 1]
            if (operand is not None and operand.kind == 'ident') or previous.kind == 'ident':
                return self.error('E3', f"Non-linear use of {token.value!r}", token)
            return self.error('E4', f"Unexpected {token.value!r}", token)
        if self.at_op('('):
            return self.error('E3', 'Function application is not linear', token)
        return self.error('E4', f"Unexpected {token.value!r}", token)


def parse_equation(text, target, allowed_parents):
    """
    Parse a linear structural equation returned by a backend

    Args:
        text: Equation string, e.g. "GC = 0.5 + 1.2*IL6 - 0.3*TNF + N(0, 0.25)"
        target: Node id expected on the left-hand side
        allowed_parents: Exact parent set of the target

    Returns:
        StructuralEquation with noise_omitted / omitted_parents flags set

    Raises:
        EquationParseError: E1-E4 with the offending span
    """
    if not isinstance(text, str):
        raise EquationParseError('E4', f"Expected equation text, got {type(text).__name__}")
    return _Parser(text, target, allowed_parents).parse()


def format_number(value):
    """Shortest round-tripping rendering; integral values drop the '.0'"""
    text = repr(float(value))
    if text.endswith('.0'):
        text = text[:-2]
    return text


def format_equation(eq):
    """Canonical text form, parents in lexicographic order"""
    parts = [f"{eq.target} = {format_number(eq.intercept)}"]
    for parent in sorted(eq.coefficients):
        value = eq.coefficients[parent]
        op = '-' if math.copysign(1.0, value) < 0 else '+'
        parts.append(f"{op} {format_number(abs(value))}*{parent}")
    parts.append(f"+ N(0, {format_number(abs(eq.noise_variance))})")
    return ' '.join(parts)


# ============================================================================
# INTERVAL ARITHMETIC
# ============================================================================

def propagate_interval(eq, parent_bounds):
    """
    Exact range of b0 + sum(b_i * x_i) over the box of parent bounds

    The Gaussian residual is excluded: its support is unbounded. Endpoints
    that overflow widen to infinity, so C1 is never contained in finite bounds.

    Args:
        eq: StructuralEquation
        parent_bounds: mapping parent id -> Interval

    Returns:
        Interval C1
    """
    lo = hi = eq.intercept
    for parent in sorted(eq.coefficients):
        if parent not in parent_bounds:
            raise MissingBoundError(f"No bound for parent {parent!r} of {eq.target!r}")
        contribution = parent_bounds[parent].scale(eq.coefficients[parent])
        lo += contribution.lo
        hi += contribution.hi
    if math.isnan(lo):
        lo = -math.inf
    if math.isnan(hi):
        hi = math.inf
    return Interval(lo, hi)


def contains(outer, inner):
    return outer.lo <= inner.lo and inner.hi <= outer.hi
