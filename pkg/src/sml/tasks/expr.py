"""A restricted arithmetic language: integers, + - * / ^, parentheses and one variable.

Evaluation is exact (``fractions.Fraction``). Anything outside the grammar is
rejected before evaluation, so untrusted student text is never executed.
"""

from __future__ import annotations

import ast
from fractions import Fraction

MAX_EXPONENT = 64
MAX_LENGTH = 500


class ExpressionError(ValueError):
    pass


def parse(text: str, variable: str = "x") -> ast.Expression:
    text = text.strip().replace("^", "**").replace("×", "*").replace("÷", "/").replace("−", "-")
    if not text or len(text) > MAX_LENGTH:
        raise ExpressionError("empty or oversized expression")
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"syntax error: {exc.msg}") from exc
    for node in ast.walk(tree):
        if isinstance(node, (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Load)):
            continue
        if isinstance(node, (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd)):
            continue
        if isinstance(node, ast.Constant) and type(node.value) is int:
            continue
        if isinstance(node, ast.Name) and node.id == variable:
            continue
        raise ExpressionError(f"disallowed element {type(node).__name__}")
    return tree


def _eval(node, env: dict[str, Fraction]) -> Fraction:
    if isinstance(node, ast.Expression):
        return _eval(node.body, env)
    if isinstance(node, ast.Constant):
        return Fraction(node.value)
    if isinstance(node, ast.Name):
        return env[node.id]
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, env)
        return -v if isinstance(node.op, ast.USub) else v
    left, right = _eval(node.left, env), _eval(node.right, env)
    op = node.op
    if isinstance(op, ast.Add):
        return left + right
    if isinstance(op, ast.Sub):
        return left - right
    if isinstance(op, ast.Mult):
        return left * right
    if isinstance(op, ast.Div):
        if right == 0:
            raise ExpressionError("division by zero")
        return left / right
    if right.denominator != 1 or abs(right) > MAX_EXPONENT:
        raise ExpressionError("exponent must be a small integer")
    if left == 0 and right < 0:
        raise ExpressionError("division by zero")
    return left ** int(right)


def evaluate(text: str, value: int, variable: str = "x") -> Fraction:
    return _eval(parse(text, variable), {variable: Fraction(value)})


def format_value(v: Fraction) -> str:
    return str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"
