"""Safe evaluation of the small expression language used in scenario files."""

import ast
import operator
from collections.abc import Mapping
from functools import lru_cache

Value = int | bool

_BINARY = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.floordiv,
    ast.FloorDiv: operator.floordiv,
    ast.Mod: operator.mod,
}

_COMPARE = {
    ast.Lt: operator.lt,
    ast.LtE: operator.le,
    ast.Gt: operator.gt,
    ast.GtE: operator.ge,
    ast.Eq: operator.eq,
    ast.NotEq: operator.ne,
}

_ALLOWED = (
    ast.Expression,
    ast.Constant,
    ast.Name,
    ast.Load,
    ast.UnaryOp,
    ast.Not,
    ast.USub,
    ast.UAdd,
    ast.BoolOp,
    ast.And,
    ast.Or,
    ast.BinOp,
    ast.Compare,
    *_BINARY,
    *_COMPARE,
)

BUILTIN_NAMES = {"true": True, "false": False}


class ExpressionError(ValueError):
    def __init__(self, message: str, column: int = 0):
        super().__init__(message)
        self.column = column


@lru_cache(maxsize=4096)
def compile_expression(source: str) -> ast.expr:
    """Parse and whitelist an expression; the result is cached per source text."""
    text = source.strip()
    if not text:
        raise ExpressionError("empty expression")
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"invalid expression {text!r}", exc.offset or 0) from exc
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED):
            raise ExpressionError(f"unsupported syntax {type(node).__name__} in {text!r}", getattr(node, "col_offset", 0))
        if isinstance(node, ast.Constant) and not isinstance(node.value, int):
            raise ExpressionError(f"only integer literals are allowed in {text!r}", node.col_offset)
    return tree.body


def referenced_names(source: str) -> set[str]:
    return {node.id for node in ast.walk(compile_expression(source)) if isinstance(node, ast.Name)}


def is_integer_literal(source: str) -> bool:
    node = compile_expression(source)
    match node:
        case ast.Constant(value=int() as value) if not isinstance(value, bool):
            return True
        case ast.UnaryOp(op=ast.USub() | ast.UAdd(), operand=ast.Constant(value=int())):
            return True
    return False


def evaluate(source: str, env: Mapping[str, Value]) -> Value:
    return _eval(compile_expression(source), env)


def evaluate_int(source: str, env: Mapping[str, Value]) -> int:
    return int(evaluate(source, env))


def _eval(node: ast.expr, env: Mapping[str, Value]) -> Value:
    match node:
        case ast.Constant(value=value):
            return value
        case ast.Name(id=name):
            if name in BUILTIN_NAMES:
                return BUILTIN_NAMES[name]
            try:
                return env[name]
            except KeyError:
                raise ExpressionError(f"unknown name {name!r}", node.col_offset) from None
        case ast.UnaryOp(op=ast.Not(), operand=operand):
            return not _eval(operand, env)
        case ast.UnaryOp(op=ast.USub(), operand=operand):
            return -_eval(operand, env)
        case ast.UnaryOp(op=ast.UAdd(), operand=operand):
            return +_eval(operand, env)
        case ast.BoolOp(op=ast.And(), values=values):
            result: Value = True
            for value in values:
                result = _eval(value, env)
                if not result:
                    return result
            return result
        case ast.BoolOp(op=ast.Or(), values=values):
            result = False
            for value in values:
                result = _eval(value, env)
                if result:
                    return result
            return result
        case ast.BinOp(left=left, op=op, right=right):
            try:
                return _BINARY[type(op)](_eval(left, env), _eval(right, env))
            except ZeroDivisionError:
                raise ExpressionError("division by zero", node.col_offset) from None
        case ast.Compare(left=left, ops=ops, comparators=comparators):
            current = _eval(left, env)
            for op, comparator in zip(ops, comparators):
                right = _eval(comparator, env)
                if not _COMPARE[type(op)](current, right):
                    return False
                current = right
            return True
    raise ExpressionError(f"cannot evaluate {type(node).__name__}")
