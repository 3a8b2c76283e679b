"""Joining causal edges from different tests into propagation chains."""

import logging

from app.models import CausalEdge, CompatibilityReason, CompatibilityVerdict, EdgeKind, StitchContext

logger = logging.getLogger(__name__)

OK = CompatibilityVerdict(compatible=True, reason=CompatibilityReason.OK)
KIND_MISMATCH = CompatibilityVerdict(compatible=False, reason=CompatibilityReason.KIND_MISMATCH)
STACK_MISMATCH = CompatibilityVerdict(compatible=False, reason=CompatibilityReason.STACK_MISMATCH)
TRACE_MISMATCH = CompatibilityVerdict(compatible=False, reason=CompatibilityReason.TRACE_MISMATCH)

_ENDS_IN_FAULT = (EdgeKind.E_D, EdgeKind.E_I)
_OBSERVED_DELAY = (EdgeKind.S_D, EdgeKind.S_I)


def _compare(left: StitchContext, right: StitchContext) -> CompatibilityVerdict:
    if left.stack != right.stack:
        return STACK_MISMATCH
    if left.key()[1] != right.key()[1]:
        return TRACE_MISMATCH
    return OK


def check_compatibility(e1: CausalEdge, e2: CausalEdge) -> CompatibilityVerdict:
    """Local check at the junction where e1's consequence is e2's injected fault."""
    if e1.dst != e2.src:
        return KIND_MISMATCH
    if not e1.dst_contexts or not e2.src_contexts:
        return STACK_MISMATCH
    if e2.injects_delay:
        # a loop matches when any stored iteration context matches
        verdicts = [_compare(left, right) for left in e1.dst_contexts for right in e2.src_contexts]
        if OK in verdicts:
            return OK
        return TRACE_MISMATCH if TRACE_MISMATCH in verdicts else STACK_MISMATCH
    return _compare(e1.dst_contexts[0], e2.src_contexts[0])


def stitch(e1: CausalEdge, e2: CausalEdge) -> CompatibilityVerdict:
    """Whether e2 may follow e1 in a chain."""
    if e1.dst != e2.src:
        return KIND_MISMATCH
    match e2.kind:
        case EdgeKind.ICFG:
            # parent-loop hop, only right after the observed delay of the same experiment
            if e1.kind in _OBSERVED_DELAY and e1.origin == e2.origin:
                return OK
            return KIND_MISMATCH
        case EdgeKind.CFG:
            if e1.kind == EdgeKind.ICFG and e1.origin == e2.origin:
                return OK
            return KIND_MISMATCH
        case EdgeKind.E_I | EdgeKind.S_I:
            if e1.kind not in _ENDS_IN_FAULT:
                return KIND_MISMATCH
        case EdgeKind.E_D | EdgeKind.S_D:
            if not e1.ends_in_delay:
                return KIND_MISMATCH
    return check_compatibility(e1, e2)


def validate_chain(edges: list[CausalEdge], closed: bool = True) -> bool:
    """Replay every junction of a chain, including the closing one when `closed`."""
    if not edges or edges[0].is_hop:
        return False
    junctions = list(zip(edges, edges[1:]))
    if closed:
        junctions.append((edges[-1], edges[0]))
    for e1, e2 in junctions:
        verdict = stitch(e1, e2)
        if not verdict.compatible:
            logger.debug(f"junction {e1.id} -> {e2.id} rejected: {verdict.reason.value}")
            return False
    return True
