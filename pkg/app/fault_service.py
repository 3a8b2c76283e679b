"""Fault-point enumeration and the loop/detector filters that shape the fault corpus."""

import logging
from typing import Optional

from app.expressions import is_integer_literal
from app.models import FaultKind, FaultPoint, Handler, LoopMeta, Scenario, Statement, StatementKind
from app.scenario_parser import walk

logger = logging.getLogger(__name__)

RANK_FRACTION_DIVISOR = 10  # "lowest ranked 10%" of loops


def _handlers(scenario: Scenario) -> dict[tuple[str, str], Handler]:
    return {(component.name, handler.name): handler for component in scenario.components for handler in component.handlers}


def _callees(component: str, statement: Statement) -> Optional[tuple[str, str]]:
    match statement.kind:
        case StatementKind.CALL:
            return component, statement.target or ""
        case StatementKind.SEND:
            target_component, _, target_handler = (statement.target or "").partition(".")
            return target_component, target_handler
    return None


def reachable_statements(scenario: Scenario, component: str, body: list[Statement]) -> list[Statement]:
    """Statements of `body` plus those of every handler reachable from it through call/send, each handler once."""
    handlers = _handlers(scenario)
    seen: set[tuple[str, str]] = set()
    result: list[Statement] = []
    pending: list[tuple[str, list[Statement]]] = [(component, body)]
    while pending:
        owner, statements = pending.pop()
        for statement in walk(statements):
            result.append(statement)
            callee = _callees(owner, statement)
            if callee is not None and callee not in seen and callee in handlers:
                seen.add(callee)
                pending.append((callee[0], handlers[callee].body))
    return result


def loop_meta(scenario: Scenario) -> dict[str, LoopMeta]:
    """Static facts about every loop: bound kind, reachable size, I/O, parent and next sibling."""
    meta: dict[str, LoopMeta] = {}

    def visit(component: str, handler: str, block: list[Statement], parent: Optional[str]) -> None:
        loops = [statement for statement in block if statement.kind == StatementKind.LOOP]
        for statement in block:
            if statement.kind == StatementKind.LOOP:
                reachable = reachable_statements(scenario, component, statement.body)
                position = loops.index(statement)
                sibling = loops[position + 1].id if position + 1 < len(loops) else None
                meta[statement.id] = LoopMeta(
                    loop_id=statement.id,
                    component=component,
                    handler=handler,
                    constant_bound=is_integer_literal(statement.expr or "0"),
                    reachable_code_size=len(reachable),
                    performs_io=statement.io
                    or any(item.kind in (StatementKind.SEND, StatementKind.LIB) for item in reachable),
                    parent_loop=parent,
                    next_sibling_loop=sibling,
                )
                visit(component, handler, statement.body, statement.id)
            else:
                visit(component, handler, statement.body, parent)
                visit(component, handler, statement.orelse, parent)
                for clause in statement.catches:
                    visit(component, handler, clause.body, parent)

    for component in scenario.components:
        for handler in component.handlers:
            visit(component.name, handler.name, handler.body, None)
    return meta


def filter_loops(scenario: Scenario, meta: Optional[dict[str, LoopMeta]] = None) -> set[str]:
    """Loops excluded from delay injection."""
    meta = meta if meta is not None else loop_meta(scenario)
    excluded = {loop for loop, info in meta.items() if info.constant_bound}
    ranked = sorted(meta.values(), key=lambda info: (info.reachable_code_size, info.loop_id))
    lowest = ranked[: len(ranked) // RANK_FRACTION_DIVISOR]
    excluded |= {info.loop_id for info in lowest if not info.performs_io}
    return excluded


def filter_detectors(scenario: Scenario) -> set[str]:
    """Detectors excluded from negation."""
    return {detector.id for component in scenario.components for detector in component.detectors if detector.filtered()}


def enumerate_fault_points(scenario: Scenario) -> list[FaultPoint]:
    """The fault corpus: every injectable element that survives filtering, in declaration order."""
    meta = loop_meta(scenario)
    loops_out = filter_loops(scenario, meta)
    detectors_out = filter_detectors(scenario)
    faults: list[FaultPoint] = []
    for component in scenario.components:
        for detector in component.detectors:
            if detector.id not in detectors_out:
                faults.append(
                    FaultPoint(id=detector.id, kind=FaultKind.NEGATION, source="detector", component=component.name)
                )
        for handler in component.handlers:
            faults.extend(_handler_faults(component.name, handler, loops_out))
    logger.debug(f"{scenario.name}: {len(faults)} fault points, {len(loops_out)} loops and {len(detectors_out)} detectors filtered")
    return faults


def _handler_faults(component: str, handler: Handler, loops_out: set[str]) -> list[FaultPoint]:
    faults: list[FaultPoint] = []

    def point(fault: str, kind: FaultKind, source: str, enclosing: Optional[str]) -> FaultPoint:
        return FaultPoint(
            id=fault, kind=kind, source=source, component=component, handler=handler.name, enclosing_loop=enclosing
        )

    def visit(block: list[Statement], enclosing: Optional[str]) -> None:
        for statement in block:
            match statement.kind:
                case StatementKind.THROW if not statement.excluded:
                    faults.append(point(statement.id, FaultKind.EXCEPTION, "throw", enclosing))
                case StatementKind.LIB:
                    faults.append(point(statement.id, FaultKind.EXCEPTION, "lib", enclosing))
                case StatementKind.SEND if statement.raises is not None:
                    faults.append(point(statement.raises, FaultKind.EXCEPTION, "send", enclosing))
                case StatementKind.LOOP:
                    if statement.id not in loops_out:
                        faults.append(point(statement.id, FaultKind.DELAY, "loop", enclosing))
                    visit(statement.body, statement.id)
                    continue
            visit(statement.body, enclosing)
            visit(statement.orelse, enclosing)
            for clause in statement.catches:
                visit(clause.body, enclosing)

    visit(handler.body, None)
    return faults


def injectable_kinds(scenario: Scenario) -> dict[str, FaultKind]:
    """Kind of every element an injection plan may target, filtered or not."""
    kinds: dict[str, FaultKind] = {}
    for component in scenario.components:
        for detector in component.detectors:
            kinds[detector.id] = FaultKind.NEGATION
        for handler in component.handlers:
            for statement in walk(handler.body):
                match statement.kind:
                    case StatementKind.THROW | StatementKind.LIB:
                        kinds[statement.id] = FaultKind.EXCEPTION
                    case StatementKind.LOOP:
                        kinds[statement.id] = FaultKind.DELAY
                if statement.raises is not None:
                    kinds[statement.raises] = FaultKind.EXCEPTION
    return kinds


def fault_index(faults: list[FaultPoint]) -> dict[str, FaultPoint]:
    return {fault.id: fault for fault in faults}
