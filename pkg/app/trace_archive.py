"""Versioned JSON/JSONL archives for run traces, causal edges and reports."""

import json
import logging
from pathlib import Path
from typing import Any, Optional

from app.models import (
    CausalEdge,
    FaultEvent,
    InjectionMode,
    InjectionPlan,
    LoopRecord,
    RunTrace,
    StitchContext,
)

logger = logging.getLogger(__name__)

TRACE_FORMAT = "cascadelab-trace v1"
EDGE_FORMAT = "cascadelab-edges v1"
REPORT_FORMAT = "cascadelab-report v1"
BASELINE_FORMAT = "cascadelab-baseline v1"
SCHEDULE_FORMAT = "cascadelab-schedule v1"
COVERAGE_FORMAT = "cascadelab-coverage v1"
REACHABILITY_FORMAT = "cascadelab-reachability v1"
FAULTS_FORMAT = "cascadelab-faults v1"
CLUSTERS_FORMAT = "cascadelab-clusters v1"

TRACE_FIELDS = (
    "run-id",
    "test",
    "injection-target",
    "injection-mode",
    "event-kind",
    "fault-id",
    "loop-id",
    "count",
    "stack-frame-1",
    "stack-frame-2",
    "branch-trace",
    "virtual-time",
)


class ArchiveVersionError(ValueError):
    def __init__(self, path: Path, expected: str, found: Optional[str]):
        super().__init__(f"{path}: expected format {expected!r}, found {found!r}")
        self.expected = expected
        self.found = found


def _dumps(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True)


def _check_header(path: Path, header: Any, expected: str) -> None:
    found = header.get("format") if isinstance(header, dict) else None
    if found != expected:
        raise ArchiveVersionError(path, expected, found)


def parse_mode_label(label: str) -> tuple[InjectionMode, Optional[int]]:
    """Inverse of InjectionPlan.label."""
    mode, _, delay = label.partition("@")
    return InjectionMode(mode), int(delay) if delay else None


def _record(trace: RunTrace, kind: str, **fields: Any) -> dict[str, Any]:
    record: dict[str, Any] = {name: None for name in TRACE_FIELDS}
    record.update(
        {
            "run-id": trace.run_id,
            "test": trace.test,
            "injection-target": trace.plan.target,
            "injection-mode": trace.plan.label,
            "event-kind": kind,
        }
    )
    for key, value in fields.items():
        record[key.replace("_", "-")] = value
    return record


def _context_fields(context: StitchContext) -> dict[str, Any]:
    stack = context.stack + [None, None]
    return {
        "stack_frame_1": stack[0],
        "stack_frame_2": stack[1],
        "branch_trace": [[branch, outcome] for branch, outcome in context.branches],
    }


def trace_records(trace: RunTrace) -> list[dict[str, Any]]:
    """Flatten a trace into archive records; `run-end` always comes last."""
    records = [
        _record(trace, "fault", fault_id=event.fault_id, virtual_time=event.time, **_context_fields(event.context))
        for event in trace.fault_events
    ]
    for loop, info in trace.loops.items():
        if not info.contexts:
            records.append(_record(trace, "loop", loop_id=loop, count=info.count, virtual_time=trace.wall))
        for context in info.contexts:
            records.append(
                _record(trace, "loop", loop_id=loop, count=info.count, virtual_time=trace.wall, **_context_fields(context))
            )
    records.extend(_record(trace, "hit", fault_id=fault, count=count) for fault, count in trace.hits.items())
    records.extend(_record(trace, "cover", fault_id=statement) for statement in trace.coverage)
    for flag in ("target_not_reached", "aborted", "deadline_reached"):
        if getattr(trace, flag):
            records.append(_record(trace, flag.replace("_", "-"), virtual_time=trace.wall))
    records.append(_record(trace, "run-end", count=trace.seed, virtual_time=trace.wall))
    return records


def write_traces(path: Path, traces: list[RunTrace]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        handle.write(_dumps({"format": TRACE_FORMAT}) + "\n")
        for trace in traces:
            for record in trace_records(trace):
                handle.write(_dumps(record) + "\n")
    logger.info(f"Wrote {len(traces)} traces to {path}")


def _context_from(record: dict[str, Any]) -> StitchContext:
    stack = [frame for frame in (record["stack-frame-1"], record["stack-frame-2"]) if frame is not None]
    return StitchContext(stack=stack, branches=[(branch, bool(outcome)) for branch, outcome in record["branch-trace"]])


def _trace_from(records: list[dict[str, Any]]) -> RunTrace:
    first = records[0]
    mode, delay = parse_mode_label(first["injection-mode"])
    trace = RunTrace(
        run_id=first["run-id"],
        test=first["test"],
        plan=InjectionPlan(target=first["injection-target"], mode=mode, delay_value=delay),
    )
    for record in records:
        match record["event-kind"]:
            case "fault":
                trace.fault_events.append(
                    FaultEvent(fault_id=record["fault-id"], context=_context_from(record), time=record["virtual-time"])
                )
            case "loop":
                info = trace.loops.setdefault(record["loop-id"], LoopRecord(count=record["count"]))
                if record["branch-trace"] is not None:
                    info.contexts.append(_context_from(record))
            case "hit":
                trace.hits[record["fault-id"]] = record["count"]
            case "cover":
                trace.coverage.append(record["fault-id"])
            case "target-not-reached":
                trace.target_not_reached = True
            case "aborted":
                trace.aborted = True
            case "deadline-reached":
                trace.deadline_reached = True
            case "run-end":
                trace.seed = record["count"]
                trace.wall = record["virtual-time"]
    return trace


def read_traces(path: Path) -> list[RunTrace]:
    """Rebuild traces from an archive, in the order they were written."""
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ArchiveVersionError(path, TRACE_FORMAT, None)
    _check_header(path, json.loads(lines[0]), TRACE_FORMAT)
    runs: dict[str, list[dict[str, Any]]] = {}
    for line in lines[1:]:
        if line.strip():
            record = json.loads(line)
            runs.setdefault(record["run-id"], []).append(record)
    return [_trace_from(records) for records in runs.values()]


def write_edges(path: Path, edges: list[CausalEdge]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        handle.write(_dumps({"format": EDGE_FORMAT}) + "\n")
        for edge in edges:
            handle.write(_dumps(edge.model_dump(mode="json")) + "\n")
    logger.info(f"Wrote {len(edges)} edges to {path}")


def read_edges(path: Path) -> list[CausalEdge]:
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ArchiveVersionError(path, EDGE_FORMAT, None)
    _check_header(path, json.loads(lines[0]), EDGE_FORMAT)
    return [CausalEdge.model_validate(json.loads(line)) for line in lines[1:] if line.strip()]


def write_document(path: Path, payload: dict[str, Any], format_name: str) -> None:
    """Write a JSON artifact with sorted keys and a `format` version field."""
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"format": format_name, **payload}
    path.write_text(json.dumps(body, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_document(path: Path, format_name: str) -> dict[str, Any]:
    payload = json.loads(path.read_text(encoding="utf-8"))
    _check_header(path, payload, format_name)
    return payload
