"""Parser and validator for the line-oriented `cascadelab-scenario v1` format."""

import logging
import re
from collections.abc import Iterator
from pathlib import Path
from typing import NamedTuple, Optional

from app.expressions import ExpressionError, compile_expression, referenced_names
from app.models import (
    CatchClause,
    Component,
    DetectorDecl,
    Handler,
    Request,
    Scenario,
    Statement,
    StatementKind,
    TestWorkload,
)

logger = logging.getLogger(__name__)

HEADER = "cascadelab-scenario v1"

NAME = r"[A-Za-z_][A-Za-z0-9_-]*"
VAR = r"[A-Za-z_][A-Za-z0-9_]*"
CLASS = r"[A-Za-z_][A-Za-z0-9_.]*"

_NAME_RE = re.compile(rf"^{NAME}$")
_VAR_RE = re.compile(rf"^{VAR}$")
_CLASS_RE = re.compile(rf"^{CLASS}$")
_ASSIGN_RE = re.compile(rf"^({VAR})\s*=\s*(.+)$")
_HANDLER_RE = re.compile(rf"^handler\s+({NAME})\s*(?:\((.*)\))?$")
_THROW_RE = re.compile(rf"^throw\s+(\S+)\s+(\S+)((?:\s+excluded)?)\s+when\s+(.+)$")
_CHECK_RE = re.compile(r"^check\s+(\S+)\s*->\s*(\S+)$")
_DETECTOR_RE = re.compile(r"^detector\s+(\S+)\s+(.*?)\s*returns\s+(.+)$")

_DETECTOR_FLAGS = {
    "final-only-inputs": "final_only_inputs",
    "constant-or-unused-return": "constant_or_unused_return",
    "primitive-only": "primitive_only",
    "jdk-utility": "jdk_utility",
}


class ScenarioSyntaxError(ValueError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ScenarioReferenceError(ValueError):
    def __init__(self, identifier: str, message: str):
        super().__init__(f"{message}: {identifier!r}")
        self.identifier = identifier


class _Line(NamedTuple):
    number: int
    indent: int
    text: str

    def column(self, token: str) -> int:
        position = self.text.find(token)
        return self.indent + (position if position >= 0 else 0) + 1


class _Node(NamedTuple):
    line: _Line
    children: list["_Node"]


def load_scenario(path: Path | str) -> Scenario:
    """Read and parse a scenario file."""
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


def parse_scenario(source: str) -> Scenario:
    """Parse scenario text into a validated Scenario."""
    lines = _logical_lines(source)
    if not lines or lines[0].text != HEADER or lines[0].indent != 0:
        found = lines[0] if lines else _Line(1, 0, "")
        raise ScenarioSyntaxError(f"expected header {HEADER!r}", found.number)
    scenario = _Builder().build(_tree(lines[1:]))
    validate_scenario(scenario)
    logger.debug(f"Parsed scenario {scenario.name} with {len(scenario.tests)} tests")
    return scenario


def _logical_lines(source: str) -> list[_Line]:
    lines = []
    for number, raw in enumerate(source.splitlines(), start=1):
        text = raw.split("#", 1)[0].rstrip()
        if not text.strip():
            continue
        stripped = text.lstrip(" ")
        if stripped.startswith("\t"):
            raise ScenarioSyntaxError("tabs are not allowed for indentation", number, len(text) - len(stripped) + 1)
        lines.append(_Line(number, len(text) - len(stripped), " ".join(stripped.split())))
    return lines


def _tree(lines: list[_Line]) -> list[_Node]:
    roots: list[_Node] = []
    stack: list[tuple[int, list[_Node]]] = [(-1, roots)]
    for line in lines:
        while line.indent <= stack[-1][0]:
            stack.pop()
        siblings = stack[-1][1]
        if siblings and siblings[0].line.indent != line.indent:
            raise ScenarioSyntaxError("inconsistent indentation", line.number, line.indent + 1)
        node = _Node(line, [])
        siblings.append(node)
        stack.append((line.indent, node.children))
    return roots


def _require_name(value: str, line: _Line, pattern: re.Pattern[str] = _NAME_RE, what: str = "identifier") -> str:
    if not pattern.match(value):
        raise ScenarioSyntaxError(f"invalid {what} {value!r}", line.number, line.column(value))
    return value


def _expression(text: str, line: _Line) -> str:
    try:
        compile_expression(text)
    except ExpressionError as exc:
        raise ScenarioSyntaxError(str(exc), line.number, line.column(text) + exc.column) from exc
    return text


def _value(text: str, line: _Line) -> int | bool:
    match text:
        case "true":
            return True
        case "false":
            return False
    try:
        return int(text)
    except ValueError:
        raise ScenarioSyntaxError(f"expected an integer or boolean, got {text!r}", line.number, line.column(text)) from None


def _parses(text: str) -> bool:
    try:
        compile_expression(text)
    except ExpressionError:
        logger.debug(f"not an expression: {text!r}")
        return False
    return True


def _is_loop_option(token: str) -> bool:
    return token in ("io", "as") or token.startswith("jitter=")


def _options(tokens: list[str], line: _Line) -> dict[str, str]:
    options: dict[str, str] = {}
    for token in tokens:
        key, separator, value = token.partition("=")
        if not separator or not key or not value:
            raise ScenarioSyntaxError(f"expected key=value, got {token!r}", line.number, line.column(token))
        if key in options:
            raise ScenarioSyntaxError(f"duplicate option {key!r}", line.number, line.column(token))
        options[key] = value
    return options


def _no_children(node: _Node) -> None:
    if node.children:
        child = node.children[0].line
        raise ScenarioSyntaxError("unexpected indented block", child.number, child.indent + 1)


def _needs_children(node: _Node) -> None:
    if not node.children:
        raise ScenarioSyntaxError("expected an indented block", node.line.number, len(node.line.text) + node.line.indent)


class _Builder:
    def __init__(self) -> None:
        self.components: list[Component] = []
        self.tests: list[TestWorkload] = []
        self.config: dict[str, int | bool] = {}
        self.state: dict[str, str] = {}
        self.expected: list[list[str]] = []
        self.name: Optional[str] = None
        self.where = ""

    def build(self, roots: list[_Node]) -> Scenario:
        for node in roots:
            line = node.line
            keyword, _, rest = line.text.partition(" ")
            match keyword:
                case "scenario":
                    _no_children(node)
                    if self.name is not None:
                        raise ScenarioSyntaxError("duplicate scenario line", line.number)
                    self.name = _require_name(rest, line)
                case "expect":
                    _no_children(node)
                    parts = rest.split()
                    if len(parts) < 2 or parts[0] != "cycle":
                        raise ScenarioSyntaxError("expected 'expect cycle <fault> ...'", line.number, line.column(rest))
                    self.expected.append([_require_name(part, line) for part in parts[1:]])
                case "config":
                    for child in node.children:
                        key, value = self._assignment(child)
                        self.config[key] = _value(value, child.line)
                case "state":
                    for child in node.children:
                        key, value = self._assignment(child)
                        self.state[key] = _expression(value, child.line)
                case "component":
                    self.components.append(self._component(node, _require_name(rest, line)))
                case "test":
                    self.tests.append(self._test(node))
                case _:
                    raise ScenarioSyntaxError(f"unknown section {keyword!r}", line.number, line.indent + 1)
        if self.name is None:
            raise ScenarioSyntaxError("missing 'scenario <name>' line", roots[0].line.number if roots else 1)
        return Scenario(
            name=self.name,
            components=self.components,
            tests=self.tests,
            config=self.config,
            state=self.state,
            expected_cycles=self.expected,
        )

    def _assignment(self, node: _Node) -> tuple[str, str]:
        _no_children(node)
        found = _ASSIGN_RE.match(node.line.text)
        if found is None:
            raise ScenarioSyntaxError("expected '<name> = <value>'", node.line.number, node.line.indent + 1)
        return found.group(1), found.group(2)

    def _component(self, node: _Node, name: str) -> Component:
        component = Component(name=name, line=node.line.number)
        for child in node.children:
            keyword = child.line.text.split(" ", 1)[0]
            match keyword:
                case "detector":
                    _no_children(child)
                    component.detectors.append(self._detector(child.line))
                case "handler":
                    component.handlers.append(self._handler(child, name))
                case _:
                    raise ScenarioSyntaxError(f"unknown component entry {keyword!r}", child.line.number, child.line.indent + 1)
        return component

    def _detector(self, line: _Line) -> DetectorDecl:
        found = _DETECTOR_RE.match(line.text)
        if found is None:
            raise ScenarioSyntaxError("expected 'detector <id> [flags] returns <expr>'", line.number, line.indent + 1)
        detector_name, flags, expr = found.groups()
        values: dict[str, bool] = {}
        for flag in flags.split():
            if flag in _DETECTOR_FLAGS:
                values[_DETECTOR_FLAGS[flag]] = True
            elif flag.startswith("fault-on="):
                values["fault_on"] = bool(_value(flag.split("=", 1)[1], line))
            else:
                raise ScenarioSyntaxError(f"unknown detector flag {flag!r}", line.number, line.column(flag))
        return DetectorDecl(
            id=_require_name(detector_name, line),
            expr=_expression(expr, line),
            line=line.number,
            **values,
        )

    def _handler(self, node: _Node, component: str) -> Handler:
        found = _HANDLER_RE.match(node.line.text)
        if found is None:
            raise ScenarioSyntaxError("expected 'handler <name>[(<params>)]'", node.line.number, node.line.indent + 1)
        name, params = found.group(1), found.group(2)
        names = [param.strip() for param in params.split(",") if param.strip()] if params else []
        for param in names:
            _require_name(param, node.line, _VAR_RE, "parameter")
        self.where = f"{component}.{name}"
        return Handler(name=name, params=names, body=self._block(node.children), line=node.line.number)

    def _block(self, nodes: list[_Node]) -> list[Statement]:
        statements: list[Statement] = []
        for node in nodes:
            line = node.line
            keyword = line.text.split(" ", 1)[0]
            previous = statements[-1] if statements else None
            match keyword:
                case "else":
                    if line.text != "else" or previous is None or previous.kind != StatementKind.IF or previous.orelse:
                        raise ScenarioSyntaxError("'else' must directly follow an 'if' block", line.number, line.indent + 1)
                    _needs_children(node)
                    previous.orelse = self._block(node.children)
                case "catch":
                    if previous is None or previous.kind != StatementKind.TRY:
                        raise ScenarioSyntaxError("'catch' must follow a 'try' block", line.number, line.indent + 1)
                    _needs_children(node)
                    classes = [item for item in line.text[len("catch") :].replace(" ", "").split(",") if item]
                    if not classes:
                        raise ScenarioSyntaxError("catch needs an exception class or '*'", line.number, line.indent + 1)
                    for item in classes:
                        if item != "*":
                            _require_name(item, line, _CLASS_RE, "exception class")
                    previous.catches.append(CatchClause(classes=classes, body=self._block(node.children), line=line.number))
                case _:
                    statements.append(self._statement(node, keyword))
        for statement in statements:
            if statement.kind == StatementKind.TRY and not statement.catches:
                raise ScenarioSyntaxError("'try' without 'catch'", statement.line, 1)
        return statements

    def _auto_id(self, line: _Line) -> str:
        return f"{self.where}:{line.number}"

    def _statement(self, node: _Node, keyword: str) -> Statement:
        line = node.line
        tokens = line.text.split(" ")
        rest = line.text[len(keyword) :].strip()
        nested = keyword in ("if", "loop", "retry", "try")
        if nested:
            _needs_children(node)
        else:
            _no_children(node)
        match keyword:
            case "work" | "sleep":
                kind = StatementKind.WORK if keyword == "work" else StatementKind.SLEEP
                return Statement(kind=kind, id=self._auto_id(line), line=line.number, expr=_expression(rest, line))
            case "set":
                found = _ASSIGN_RE.match(rest)
                if found is None:
                    raise ScenarioSyntaxError("expected 'set <var> = <expr>'", line.number, line.indent + 1)
                return Statement(
                    kind=StatementKind.SET,
                    id=self._auto_id(line),
                    line=line.number,
                    var=found.group(1),
                    expr=_expression(found.group(2), line),
                )
            case "if":
                if len(tokens) < 3:
                    raise ScenarioSyntaxError("expected 'if <branch-id> <expr>'", line.number, line.indent + 1)
                return Statement(
                    kind=StatementKind.IF,
                    id=_require_name(tokens[1], line),
                    line=line.number,
                    expr=_expression(" ".join(tokens[2:]), line),
                    body=self._block(node.children),
                )
            case "loop":
                return self._loop(node, tokens)
            case "call":
                if len(tokens) < 3:
                    raise ScenarioSyntaxError("expected 'call <site-id> <handler>'", line.number, line.indent + 1)
                args = _options(tokens[3:], line)
                return Statement(
                    kind=StatementKind.CALL,
                    id=_require_name(tokens[1], line),
                    line=line.number,
                    target=_require_name(tokens[2], line),
                    args={key: _expression(value, line) for key, value in args.items()},
                )
            case "throw":
                found = _THROW_RE.match(line.text)
                if found is None:
                    raise ScenarioSyntaxError(
                        "expected 'throw <id> <Exception> [excluded] when <expr>'", line.number, line.indent + 1
                    )
                return Statement(
                    kind=StatementKind.THROW,
                    id=_require_name(found.group(1), line),
                    line=line.number,
                    exception=_require_name(found.group(2), line, _CLASS_RE, "exception class"),
                    excluded=bool(found.group(3).strip()),
                    expr=_expression(found.group(4), line),
                )
            case "lib":
                if len(tokens) < 3:
                    raise ScenarioSyntaxError("expected 'lib <call-id> <Exception>'", line.number, line.indent + 1)
                options = _options(tokens[3:], line)
                unknown = set(options) - {"cost", "fails-when"}
                if unknown:
                    token = sorted(unknown)[0]
                    raise ScenarioSyntaxError(f"unknown lib option {token!r}", line.number, line.column(token))
                return Statement(
                    kind=StatementKind.LIB,
                    id=_require_name(tokens[1], line),
                    line=line.number,
                    exception=_require_name(tokens[2], line, _CLASS_RE, "exception class"),
                    cost=_expression(options["cost"], line) if "cost" in options else None,
                    fails_when=_expression(options["fails-when"], line) if "fails-when" in options else None,
                )
            case "check":
                found = _CHECK_RE.match(line.text)
                if found is None:
                    raise ScenarioSyntaxError("expected 'check <detector-id> -> <var>'", line.number, line.indent + 1)
                return Statement(
                    kind=StatementKind.CHECK,
                    id=self._auto_id(line),
                    line=line.number,
                    target=_require_name(found.group(1), line),
                    var=_require_name(found.group(2), line, _VAR_RE, "variable"),
                )
            case "send":
                return self._send(line, tokens)
            case "retry":
                return self._retry(node, tokens)
            case "try":
                if rest:
                    raise ScenarioSyntaxError("'try' takes no arguments", line.number, line.column(rest))
                return Statement(
                    kind=StatementKind.TRY, id=self._auto_id(line), line=line.number, body=self._block(node.children)
                )
        raise ScenarioSyntaxError(f"unknown statement {keyword!r}", line.number, line.indent + 1)

    def _loop(self, node: _Node, tokens: list[str]) -> Statement:
        line = node.line
        if len(tokens) < 3:
            raise ScenarioSyntaxError("expected 'loop <loop-id> <bound>'", line.number, line.indent + 1)
        end = next((index for index in range(2, len(tokens)) if _is_loop_option(tokens[index])), len(tokens))
        if end == 2:
            raise ScenarioSyntaxError("loop bound missing", line.number, line.column(tokens[2]))
        bound = " ".join(tokens[2:end])
        if end > 3 and not _parses(bound) and _parses(tokens[2]):
            raise ScenarioSyntaxError(f"unknown loop option {tokens[3]!r}", line.number, line.column(tokens[3]))
        statement = Statement(
            kind=StatementKind.LOOP,
            id=_require_name(tokens[1], line),
            line=line.number,
            expr=_expression(bound, line),
        )
        options = iter(tokens[end:])
        for token in options:
            if token == "io":
                statement.io = True
            elif token == "as":
                var = next(options, None)
                if var is None:
                    raise ScenarioSyntaxError("'as' needs a variable name", line.number, line.column(token))
                statement.var = _require_name(var, line, _VAR_RE, "variable")
            elif token.startswith("jitter="):
                jitter = _value(token.split("=", 1)[1], line)
                if isinstance(jitter, bool) or jitter < 0:
                    raise ScenarioSyntaxError("jitter must be a non-negative integer", line.number, line.column(token))
                statement.jitter = jitter
            else:
                raise ScenarioSyntaxError(f"unknown loop option {token!r}", line.number, line.column(token))
        statement.body = self._block(node.children)
        return statement

    def _send(self, line: _Line, tokens: list[str]) -> Statement:
        if len(tokens) < 3 or "." not in tokens[2]:
            raise ScenarioSyntaxError("expected 'send <site-id> <component>.<handler>'", line.number, line.indent + 1)
        component, _, handler = tokens[2].partition(".")
        _require_name(component, line)
        _require_name(handler, line)
        options = _options(tokens[3:], line)
        timeout = options.pop("timeout", None)
        raises = options.pop("raises", None)
        size = options.pop("size", None)
        if (timeout is None) != (raises is None):
            raise ScenarioSyntaxError("'timeout' and 'raises' go together", line.number, line.column(tokens[2]))
        return Statement(
            kind=StatementKind.SEND,
            id=_require_name(tokens[1], line),
            line=line.number,
            target=tokens[2],
            timeout=_expression(timeout, line) if timeout is not None else None,
            raises=_require_name(raises, line) if raises is not None else None,
            size=_expression(size, line) if size is not None else None,
            args={key: _expression(value, line) for key, value in options.items()},
        )

    def _retry(self, node: _Node, tokens: list[str]) -> Statement:
        line = node.line
        options = _options(tokens[1:], line)
        unknown = set(options) - {"attempts", "backoff", "on"}
        if unknown:
            token = sorted(unknown)[0]
            raise ScenarioSyntaxError(f"unknown retry option {token!r}", line.number, line.column(token))
        attempts = options.get("attempts", "3")
        classes = [item for item in options.get("on", "").split(",") if item]
        for item in classes:
            _require_name(item, line, _CLASS_RE, "exception class")
        return Statement(
            kind=StatementKind.RETRY,
            id=self._auto_id(line),
            line=line.number,
            attempts=None if attempts == "forever" else _expression(attempts, line),
            backoff=_expression(options["backoff"], line) if "backoff" in options else None,
            on=classes,
            body=self._block(node.children),
        )

    def _test(self, node: _Node) -> TestWorkload:
        line = node.line
        tokens = line.text.split(" ")
        if len(tokens) < 2:
            raise ScenarioSyntaxError("expected 'test <name>'", line.number, line.indent + 1)
        options = _options(tokens[2:], line)
        unknown = set(options) - {"duration"}
        if unknown:
            token = sorted(unknown)[0]
            raise ScenarioSyntaxError(f"unknown test option {token!r}", line.number, line.column(token))
        test = TestWorkload(name=_require_name(tokens[1], line), line=line.number)
        if "duration" in options:
            duration = _value(options["duration"], line)
            if isinstance(duration, bool) or duration <= 0:
                raise ScenarioSyntaxError("duration must be a positive integer", line.number, line.column("duration"))
            test.duration = duration
        for child in node.children:
            _no_children(child)
            child_line = child.line
            keyword, _, rest = child_line.text.partition(" ")
            match keyword:
                case "set":
                    found = _ASSIGN_RE.match(rest)
                    if found is None:
                        raise ScenarioSyntaxError("expected 'set <key> = <value>'", child_line.number, child_line.indent + 1)
                    test.config_overrides[found.group(1)] = _value(found.group(2), child_line)
                case "request":
                    parts = rest.split(" ") if rest else []
                    if not parts or "." not in parts[0]:
                        raise ScenarioSyntaxError(
                            "expected 'request <component>.<handler>'", child_line.number, child_line.indent + 1
                        )
                    component, _, handler = parts[0].partition(".")
                    params = _options(parts[1:], child_line)
                    test.requests.append(
                        Request(
                            component=component,
                            handler=handler,
                            params={key: _expression(value, child_line) for key, value in params.items()},
                            line=child_line.number,
                        )
                    )
                case _:
                    raise ScenarioSyntaxError(
                        f"unknown test entry {keyword!r}", child_line.number, child_line.indent + 1
                    )
        return test


def walk(statements: list[Statement]) -> Iterator[Statement]:
    """Yield every statement of a tree in pre-order."""
    for statement in statements:
        yield statement
        yield from walk(statement.body)
        yield from walk(statement.orelse)
        for clause in statement.catches:
            yield from walk(clause.body)


def _assigned_locals(handler: Handler) -> set[str]:
    names = set(handler.params)
    for statement in walk(handler.body):
        if statement.var is not None:
            names.add(statement.var)
    return names


def _check_names(source: Optional[str], allowed: set[str], where: str) -> None:
    if source is None:
        return
    unknown = sorted(referenced_names(source) - allowed - {"now", "true", "false"})
    if unknown:
        raise ScenarioReferenceError(unknown[0], f"unknown name in {where}")


def validate_scenario(scenario: Scenario) -> None:
    """Check naming and reference invariants; raises ScenarioReferenceError."""
    _unique([component.name for component in scenario.components], "duplicate component")
    _unique([test.name for test in scenario.tests], "duplicate test")
    ids: list[str] = []
    for component in scenario.components:
        _unique([handler.name for handler in component.handlers], f"duplicate handler in {component.name}")
        ids.extend(detector.id for detector in component.detectors)
        for handler in component.handlers:
            for statement in walk(handler.body):
                if statement.kind in (
                    StatementKind.IF,
                    StatementKind.LOOP,
                    StatementKind.CALL,
                    StatementKind.THROW,
                    StatementKind.LIB,
                    StatementKind.SEND,
                ):
                    ids.append(statement.id)
                if statement.raises is not None:
                    ids.append(statement.raises)
    _unique(ids, "duplicate statement id")

    globals_ = set(scenario.config)
    for var, expr in scenario.state.items():
        _check_names(expr, globals_, f"state {var}")
        globals_.add(var)

    for component in scenario.components:
        for detector in component.detectors:
            _check_names(detector.expr, globals_, f"detector {detector.id}")
        for handler in component.handlers:
            scope = globals_ | _assigned_locals(handler)
            where = f"{component.name}.{handler.name}"
            for statement in walk(handler.body):
                for source in (statement.expr, statement.timeout, statement.size, statement.cost, statement.fails_when):
                    _check_names(source, scope, where)
                _check_names(statement.attempts, scope, where)
                _check_names(statement.backoff, scope, where)
                for value in statement.args.values():
                    _check_names(value, scope, where)
                _check_references(scenario, component, statement)

    known = set(ids)
    for test in scenario.tests:
        for key in test.config_overrides:
            if key not in scenario.config:
                raise ScenarioReferenceError(key, f"test {test.name} overrides an undeclared config key")
        for request in test.requests:
            handler = _lookup_handler(scenario, request.component, request.handler)
            for param, value in request.params.items():
                if param not in handler.params:
                    raise ScenarioReferenceError(param, f"undeclared request field of {request.component}.{request.handler}")
                _check_names(value, globals_, f"test {test.name}")
    for cycle in scenario.expected_cycles:
        for fault in cycle:
            if fault not in known:
                raise ScenarioReferenceError(fault, "expected cycle names an unknown fault")


def _unique(names: list[str], message: str) -> None:
    seen: set[str] = set()
    for name in names:
        if name in seen:
            raise ScenarioReferenceError(name, message)
        seen.add(name)


def _lookup_handler(scenario: Scenario, component_name: str, handler_name: str) -> Handler:
    component = scenario.component(component_name)
    if component is None:
        raise ScenarioReferenceError(component_name, "unknown component")
    handler = component.handler(handler_name)
    if handler is None:
        raise ScenarioReferenceError(f"{component_name}.{handler_name}", "unknown handler")
    return handler


def _check_references(scenario: Scenario, component: Component, statement: Statement) -> None:
    match statement.kind:
        case StatementKind.CALL:
            callee = _lookup_handler(scenario, component.name, statement.target or "")
        case StatementKind.SEND:
            target_component, _, target_handler = (statement.target or "").partition(".")
            callee = _lookup_handler(scenario, target_component, target_handler)
        case StatementKind.CHECK:
            if component.detector(statement.target or "") is None:
                raise ScenarioReferenceError(statement.target or "", f"undeclared detector in {component.name}")
            return
        case _:
            return
    for param in statement.args:
        if param not in callee.params:
            raise ScenarioReferenceError(param, f"undeclared parameter of {callee.name}")
