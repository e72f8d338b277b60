"""Prefix equations: validation, infix parsing, evaluation and enumeration.

An equation is a tuple of string tokens in prefix order.  Three token kinds
exist: binary operators (``+ − × ÷ ^``), quantity slots ``N0, N1, ...`` that
refer to the numbers of a problem, and constants written as decimal
literals (``"1"``, ``"3.14"``).
"""
from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

OPERATORS = ("+", "−", "×", "÷", "^")

# ASCII spellings accepted on input, mapped to the canonical symbols.
_ALIASES = {"-": "−", "*": "×", "/": "÷"}

_PRECEDENCE = {"+": 1, "−": 1, "×": 2, "÷": 2, "^": 3}
_RIGHT_ASSOC = {"^"}

_QUANTITY_RE = re.compile(r"N(\d+)$")

DIV_EPS = 1e-12
ANSWER_TOL = 1e-4

Equation = tuple


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class Defect(enum.Enum):
    DIVISION_BY_ZERO = "DivisionByZero"
    OVERFLOW = "Overflow"
    INVALID_QUANTITY_INDEX = "InvalidQuantityIndex"
    MALFORMED_PREFIX = "MalformedPrefix"


@dataclass(frozen=True)
class EvalOutcome:
    value: float | None = None
    defect: Defect | None = None

    @property
    def ok(self) -> bool:
        return self.defect is None


def canonical_token(tok: str) -> str:
    return _ALIASES.get(tok, tok)


def is_operator(tok: str) -> bool:
    return tok in _PRECEDENCE


def quantity_index(tok: str) -> int | None:
    m = _QUANTITY_RE.match(tok)
    return int(m.group(1)) if m else None


def is_quantity(tok: str) -> bool:
    return _QUANTITY_RE.match(tok) is not None


def quantity_token(i: int) -> str:
    return f"N{i}"


def operator_count(eq: Sequence[str]) -> int:
    return sum(1 for t in eq if is_operator(t))


def validate_prefix(tokens: Sequence[str]) -> bool:
    """True iff ``tokens`` encodes exactly one complete binary tree."""
    pending = 1
    for tok in tokens:
        if pending == 0:
            return False
        pending += 1 if is_operator(tok) else -1
    return pending == 0 and len(tokens) > 0


def parse_prefix(text: str) -> Equation:
    """Parse the space-separated serialized form, e.g. ``"× N0 + N1 N2"``."""
    return tuple(canonical_token(t) for t in text.split())


def format_prefix(eq: Sequence[str]) -> str:
    return " ".join(eq)


def _operand_value(tok, quantities, constants):
    idx = quantity_index(tok)
    if idx is not None:
        if idx >= len(quantities):
            raise _EvalFailure(Defect.INVALID_QUANTITY_INDEX)
        return float(quantities[idx])
    if constants is not None and tok in constants:
        return float(constants[tok])
    try:
        return float(tok)
    except ValueError:
        raise _EvalFailure(Defect.MALFORMED_PREFIX) from None


class _EvalFailure(Exception):
    def __init__(self, defect):
        self.defect = defect


def apply_operator(op: str, a: float, b: float) -> float:
    if op == "+":
        r = a + b
    elif op == "−":
        r = a - b
    elif op == "×":
        r = a * b
    elif op == "÷":
        if abs(b) < DIV_EPS:
            raise _EvalFailure(Defect.DIVISION_BY_ZERO)
        r = a / b
    elif op == "^":
        try:
            r = math.pow(a, b)
        except (OverflowError, ValueError):
            raise _EvalFailure(Defect.OVERFLOW) from None
    else:
        raise _EvalFailure(Defect.MALFORMED_PREFIX)
    if not math.isfinite(r):
        raise _EvalFailure(Defect.OVERFLOW)
    return r


def evaluate(eq: Sequence[str], quantities: Sequence[float] = (),
             constants: Mapping[str, float] | None = None) -> EvalOutcome:
    """Evaluate a prefix equation with a right-to-left operand stack.

    Never raises; problems are reported through ``EvalOutcome.defect``.
    """
    if not validate_prefix(eq):
        return EvalOutcome(defect=Defect.MALFORMED_PREFIX)
    stack: list[float] = []
    try:
        for tok in reversed(eq):
            if is_operator(tok):
                a = stack.pop()
                b = stack.pop()
                stack.append(apply_operator(tok, a, b))
            else:
                v = _operand_value(tok, quantities, constants)
                if not math.isfinite(v):
                    raise _EvalFailure(Defect.OVERFLOW)
                stack.append(v)
    except _EvalFailure as exc:
        return EvalOutcome(defect=exc.defect)
    return EvalOutcome(value=stack[0])


def answers_match(predicted: float, gold: float, tol: float = ANSWER_TOL) -> bool:
    # min() keeps the relation symmetric and never looser than tol*max(1, |gold|)
    if not (math.isfinite(predicted) and math.isfinite(gold)):
        return False
    scale = max(1.0, min(abs(predicted), abs(gold)))
    return abs(predicted - gold) <= tol * scale


def equation_is_correct(eq, quantities, gold, constants=None, tol=ANSWER_TOL) -> bool:
    out = evaluate(eq, quantities, constants)
    return out.ok and answers_match(out.value, gold, tol)


# ---------------------------------------------------------------- infix input

_NUMBER_RE = re.compile(r"\d+(?:\.\d+)?%?|\.\d+%?")


def _format_number(x: float) -> str:
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def _lex(text: str):
    i = 0
    out = []
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch in "()":
            out.append((ch, i))
            i += 1
            continue
        op = canonical_token(ch)
        if op in _PRECEDENCE:
            out.append((op, i))
            i += 1
            continue
        if ch == "N":
            qm = re.match(r"N\d+", text[i:])
            if qm is None:
                raise ParseError("bad quantity slot", i)
            out.append((qm.group(0), i))
            i += qm.end()
            continue
        m = _NUMBER_RE.match(text, i)
        if m:
            lit = m.group(0)
            if lit.endswith("%"):
                lit = _format_number(float(lit[:-1]) / 100.0)
            out.append((lit, i))
            i = m.end()
            continue
        raise ParseError(f"unexpected character {ch!r}", i)
    return out


def infix_to_prefix(expr_text: str) -> Equation:
    """Convert an infix expression to a prefix token tuple.

    ``^`` binds tightest and is right-associative; ``× ÷`` bind tighter than
    ``+ −``; all other operators are left-associative.  ``p%`` lexes to the
    literal ``p/100``.
    """
    tokens = _lex(expr_text)
    if not tokens:
        raise ParseError("empty expression", 0)
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else (None, len(expr_text))

    def parse_expr(min_prec):
        nonlocal pos
        left = parse_atom()
        while True:
            tok, off = peek()
            if tok is None or tok not in _PRECEDENCE:
                break
            prec = _PRECEDENCE[tok]
            if prec < min_prec:
                break
            pos += 1
            next_min = prec if tok in _RIGHT_ASSOC else prec + 1
            right = parse_expr(next_min)
            left = (tok,) + left + right
        return left

    def parse_atom():
        nonlocal pos
        tok, off = peek()
        if tok is None:
            raise ParseError("unexpected end of input", off)
        if tok == "(":
            pos += 1
            inner = parse_expr(1)
            tok2, off2 = peek()
            if tok2 != ")":
                raise ParseError("expected ')'", off2)
            pos += 1
            return inner
        if tok == ")" or tok in _PRECEDENCE:
            raise ParseError(f"unexpected {tok!r}", off)
        pos += 1
        return (tok,)

    result = parse_expr(1)
    if pos != len(tokens):
        raise ParseError(f"unexpected {tokens[pos][0]!r}", tokens[pos][1])
    return result


def prefix_to_infix(eq: Sequence[str]) -> str:
    """Render with the minimum parentheses needed to reparse the same tree."""
    if not validate_prefix(eq):
        raise ParseError("not a valid prefix equation", 0)

    def build(i):
        tok = eq[i]
        if not is_operator(tok):
            return tok, math.inf, i + 1
        left, lp, j = build(i + 1)
        right, rp, k = build(j)
        p = _PRECEDENCE[tok]
        if lp < p or (lp == p and tok in _RIGHT_ASSOC):
            left = f"({left})"
        if rp < p or (rp == p and tok not in _RIGHT_ASSOC):
            right = f"({right})"
        return f"{left}{tok}{right}", p, k

    return build(0)[0]


# ---------------------------------------------------------------- enumeration

def _trees(size, operands, operators):
    """All prefix sequences with exactly ``size`` tokens (size odd)."""
    if size == 1:
        for o in operands:
            yield (o,)
        return
    for op in operators:
        for left_size in range(1, size - 1, 2):
            for left in _trees(left_size, operands, operators):
                for right in _trees(size - 1 - left_size, operands, operators):
                    yield (op,) + left + right


def enumerate_equations(max_tokens: int, n_quantities: int, constants: Sequence[str] = (),
                        operators: Sequence[str] = OPERATORS) -> Iterator[Equation]:
    """Yield every prefix-valid sequence of length <= max_tokens exactly once.

    Order: by length, then operator, then left-subtree size, recursively.
    Grows combinatorially; keep max_tokens <= 7.
    """
    operands = [quantity_token(i) for i in range(n_quantities)] + list(constants)
    for size in range(1, max_tokens + 1, 2):
        yield from _trees(size, operands, operators)


def count_equations(max_tokens, n_operands, n_operators=len(OPERATORS)) -> int:
    """Closed-form count via Catalan numbers, useful as a cross-check."""
    total = 0
    for size in range(1, max_tokens + 1, 2):
        k = size // 2
        catalan = math.comb(2 * k, k) // (k + 1)
        total += catalan * n_operators ** k * n_operands ** (k + 1)
    return total


def correct_equations(max_tokens, quantities, gold, constants: Mapping[str, float] | None = None,
                      operators=OPERATORS, tol=ANSWER_TOL) -> list[Equation]:
    """Brute-force list of equations that evaluate to ``gold``."""
    names = list(constants) if constants else []
    out = []
    for eq in enumerate_equations(max_tokens, len(quantities), names, operators):
        if equation_is_correct(eq, quantities, gold, constants, tol):
            out.append(eq)
    return out

