"""Counterfactual diffing of injection runs against profile runs, and the causal edges it yields."""

import logging
from collections.abc import Iterable
from typing import Optional

import numpy as np
from scipy import stats

from app.models import (
    AdditionalFault,
    CausalEdge,
    DelayRole,
    EdgeKind,
    FaultKind,
    FaultPoint,
    InjectionMode,
    InterferenceReport,
    IterEvidence,
    LoopMeta,
    RunTrace,
    StitchContext,
    TraceEvidence,
)

logger = logging.getLogger(__name__)

_MODE_FOR_KIND = {
    FaultKind.EXCEPTION: InjectionMode.ONE_SHOT_EXCEPTION,
    FaultKind.DELAY: InjectionMode.DELAY,
    FaultKind.NEGATION: InjectionMode.NEGATE,
}


class TraceMismatchError(ValueError):
    pass


def ttest_one_sided(profile_samples: list[int], injection_samples: list[int]) -> float:
    """Pooled-variance t-test p-value for "injection mean > profile mean"."""
    profile = np.asarray(profile_samples, dtype=float)
    injection = np.asarray(injection_samples, dtype=float)
    dof = len(profile) + len(injection) - 2
    pooled = ((len(profile) - 1) * profile.var(ddof=1) + (len(injection) - 1) * injection.var(ddof=1)) / dof
    if pooled == 0:
        difference = injection.mean() - profile.mean()
        if difference == 0:
            return 0.5
        return 0.0 if difference > 0 else 1.0
    result = stats.ttest_ind(injection, profile, equal_var=True, alternative="greater")
    return float(result.pvalue)


def _distinct(contexts: Iterable[StitchContext]) -> list[StitchContext]:
    seen: dict[tuple, StitchContext] = {}
    for context in contexts:
        seen.setdefault(context.key(), context)
    return list(seen.values())


def _first_event_context(traces: list[RunTrace], fault_id: str) -> Optional[StitchContext]:
    for trace in traces:
        for event in trace.fault_events:
            if event.fault_id == fault_id:
                return event.context
    return None


def _loop_contexts(traces: list[RunTrace], loop_id: str) -> list[StitchContext]:
    return _distinct(context for trace in traces if loop_id in trace.loops for context in trace.loops[loop_id].contexts)


def diff_runs(
    profile: list[RunTrace],
    injection: list[RunTrace],
    faults: list[FaultPoint],
    p_value: float = 0.1,
    trace_threshold: int = 3,
) -> InterferenceReport:
    """Faults that appear (or loops that run longer) only because of the injection."""
    tests = {trace.test for trace in profile} | {trace.test for trace in injection}
    if len(tests) != 1:
        raise TraceMismatchError(f"runs belong to different tests: {sorted(tests)}")
    if any(trace.plan.target is not None for trace in profile):
        raise TraceMismatchError("profile runs must not carry an injection")
    if not injection or not profile:
        raise TraceMismatchError("both profile and injection runs are required")
    if len({(trace.plan.target, trace.plan.label) for trace in injection}) != 1:
        raise TraceMismatchError("injection runs must share one plan")

    plan = injection[0].plan
    injected = plan.target or ""
    kinds = {fault.id: fault.kind for fault in faults}
    injected_kind = kinds.get(injected) or next(kind for kind, mode in _MODE_FOR_KIND.items() if mode == plan.mode)

    additional: list[AdditionalFault] = []
    for fault in faults:
        if fault.id == injected:
            continue
        if fault.kind == FaultKind.DELAY:
            profile_samples = [trace.loop_count(fault.id) for trace in profile]
            injection_samples = [trace.loop_count(fault.id) for trace in injection]
            p = ttest_one_sided(profile_samples, injection_samples)
            if p < p_value:
                evidence = IterEvidence(
                    profile_samples=profile_samples,
                    injection_samples=injection_samples,
                    p_value=p,
                    contexts=_loop_contexts(injection, fault.id),
                )
                additional.append(
                    AdditionalFault(fault_id=fault.id, kind=fault.kind, delay_value=plan.delay_value, iteration=evidence)
                )
            continue
        injection_count = sum(1 for trace in injection if trace.event_count(fault.id) > 0)
        profile_count = sum(1 for trace in profile if trace.event_count(fault.id) > 0)
        if injection_count >= trace_threshold and profile_count == 0:
            context = _first_event_context(injection, fault.id) or StitchContext()
            evidence = TraceEvidence(injection_count=injection_count, profile_count=profile_count, context=context)
            additional.append(
                AdditionalFault(fault_id=fault.id, kind=fault.kind, delay_value=plan.delay_value, trace=evidence)
            )

    if injected_kind == FaultKind.DELAY:
        injected_contexts = _loop_contexts(injection, injected)
    else:
        first = _first_event_context(injection, injected)
        injected_contexts = [first] if first is not None else []
    loop_ids = sorted({loop for trace in injection for loop in trace.loops})
    report = InterferenceReport(
        injected=injected,
        injected_kind=injected_kind,
        test=injection[0].test,
        delay_value=plan.delay_value,
        reached=any(not trace.target_not_reached for trace in injection),
        additional=additional,
        injected_contexts=injected_contexts,
        loop_contexts={loop: _loop_contexts(injection, loop) for loop in loop_ids},
    )
    logger.debug(f"I({injected}, {report.test}) @ {plan.label} = {report.faults()}")
    return report


def merge_reports(reports: list[InterferenceReport]) -> InterferenceReport:
    """Union of the per-delay-value reports of one (fault, test) pair; the smallest delay wins a tie."""
    if not reports:
        raise ValueError("nothing to merge")
    first = reports[0]
    additional: dict[str, AdditionalFault] = {}
    loop_contexts: dict[str, list[StitchContext]] = {}
    for report in sorted(reports, key=lambda item: item.delay_value or 0):
        for item in report.additional:
            additional.setdefault(item.fault_id, item)
        for loop, contexts in report.loop_contexts.items():
            loop_contexts[loop] = _distinct([*loop_contexts.get(loop, []), *contexts])
    return InterferenceReport(
        injected=first.injected,
        injected_kind=first.injected_kind,
        test=first.test,
        delay_value=None,
        reached=any(report.reached for report in reports),
        additional=list(additional.values()),
        injected_contexts=_distinct(context for report in reports for context in report.injected_contexts),
        loop_contexts=dict(sorted(loop_contexts.items())),
    )


def edge_kind(injected: FaultKind, observed: FaultKind) -> EdgeKind:
    """One of the four base relationships, from (injected kind, observed kind)."""
    match (injected == FaultKind.DELAY, observed == FaultKind.DELAY):
        case (True, False):
            return EdgeKind.E_D
        case (True, True):
            return EdgeKind.S_D
        case (False, False):
            return EdgeKind.E_I
        case _:
            return EdgeKind.S_I


def _base_edge(report: InterferenceReport, item: AdditionalFault, phase: int) -> CausalEdge:
    kind = edge_kind(report.injected_kind, item.kind)
    return CausalEdge(
        id=f"{kind.value}:{report.injected}->{item.fault_id}@{report.test}",
        kind=kind,
        src=report.injected,
        dst=item.fault_id,
        test=report.test,
        origin=f"{report.injected}@{report.test}",
        injection_mode=_MODE_FOR_KIND[report.injected_kind],
        phase=phase,
        src_role=DelayRole.INJECTED if report.injected_kind == FaultKind.DELAY else None,
        dst_role=DelayRole.OBSERVED if item.kind == FaultKind.DELAY else None,
        src_contexts=list(report.injected_contexts),
        dst_contexts=item.contexts(),
        evidence=item,
    )


def expand_nested(report: InterferenceReport, meta: dict[str, LoopMeta], phase: int = 0) -> list[CausalEdge]:
    """Edges for every observed delay, with parent-loop and sibling-loop hops for nested loops."""
    edges: list[CausalEdge] = []
    origin = f"{report.injected}@{report.test}"
    mode = _MODE_FOR_KIND[report.injected_kind]
    for item in report.additional:
        if item.kind != FaultKind.DELAY:
            continue
        edges.append(_base_edge(report, item, phase))
        info = meta.get(item.fault_id)
        parent = info.parent_loop if info is not None else None
        if info is None or parent is None:
            continue
        edges.append(
            CausalEdge(
                id=f"ICFG:{item.fault_id}->{parent}@{origin}",
                kind=EdgeKind.ICFG,
                src=item.fault_id,
                dst=parent,
                test=report.test,
                origin=origin,
                injection_mode=mode,
                phase=phase,
                src_role=DelayRole.OBSERVED,
                dst_role=DelayRole.PARENT,
                src_contexts=item.contexts(),
                dst_contexts=list(report.loop_contexts.get(parent, [])),
                evidence=item,
            )
        )
        sibling = info.next_sibling_loop
        if sibling is None:
            continue
        edges.append(
            CausalEdge(
                id=f"CFG:{parent}->{sibling}@{origin}",
                kind=EdgeKind.CFG,
                src=parent,
                dst=sibling,
                test=report.test,
                origin=origin,
                injection_mode=mode,
                phase=phase,
                src_role=DelayRole.PARENT,
                dst_role=DelayRole.SIBLING,
                src_contexts=list(report.loop_contexts.get(parent, [])),
                dst_contexts=list(report.loop_contexts.get(sibling, [])),
                evidence=item,
            )
        )
    return edges


def edges_from_report(report: InterferenceReport, meta: dict[str, LoopMeta], phase: int = 0) -> list[CausalEdge]:
    """Typed causal edges for one (fault, test) report."""
    edges = [_base_edge(report, item, phase) for item in report.additional if item.kind != FaultKind.DELAY]
    edges.extend(expand_nested(report, meta, phase))
    return edges


def self_interference(
    fault: FaultPoint,
    profile: list[RunTrace],
    injection: list[RunTrace],
    p_value: float = 0.1,
    trace_threshold: int = 3,
) -> bool:
    """Whether injecting `fault` makes the fault itself recur or intensify."""
    match fault.kind:
        case FaultKind.DELAY:
            p = ttest_one_sided(
                [trace.loop_count(fault.id) for trace in profile], [trace.loop_count(fault.id) for trace in injection]
            )
            return p < p_value
        case FaultKind.EXCEPTION:
            recurring = sum(1 for trace in injection if trace.event_count(fault.id) >= 2)
            natural = sum(1 for trace in profile if trace.event_count(fault.id) > 0)
            return recurring >= trace_threshold and natural == 0
        case FaultKind.NEGATION:
            p = ttest_one_sided(
                [trace.hits.get(fault.id, 0) for trace in profile], [trace.hits.get(fault.id, 0) for trace in injection]
            )
            return p < p_value
    return False
