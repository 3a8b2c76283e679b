"""Beam search for causal cycles over the stitched edge corpus, plus the self-interference baseline."""

import logging
from collections.abc import Iterable
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import networkx as nx

from app.fca_service import self_interference
from app.models import (
    CampaignConfig,
    CausalEdge,
    Chain,
    CycleCluster,
    CycleReport,
    FaultCluster,
    FaultKind,
    FaultPoint,
    InjectionPlan,
    RunTrace,
    Scenario,
)
from app.sim_engine import plan_for, run_repeated
from app.stitch_service import stitch

logger = logging.getLogger(__name__)

EdgePath = tuple[str, ...]


class EdgeGraph:
    """Edges as nodes; an arc wherever the second edge may follow the first."""

    def __init__(self, edges: list[CausalEdge]):
        self.edges = {edge.id: edge for edge in edges}
        self.graph = nx.DiGraph()
        self.graph.add_nodes_from(sorted(self.edges))
        for first in self.edges.values():
            for second in self.edges.values():
                if first.dst != second.src:
                    continue
                verdict = stitch(first, second)
                if verdict.compatible:
                    self.graph.add_edge(first.id, second.id)
                else:
                    logger.debug(f"stitch {first.id} -> {second.id} rejected: {verdict.reason.value}")
        self.successors = {node: sorted(self.graph.successors(node)) for node in self.graph.nodes}

    def starts(self) -> list[str]:
        return sorted(edge_id for edge_id, edge in self.edges.items() if not edge.is_hop)

    def closes(self, path: EdgePath) -> bool:
        return self.graph.has_edge(path[-1], path[0])

    def delay_injections(self, path: Iterable[str]) -> int:
        return sum(1 for edge_id in path if self.edges[edge_id].injects_delay)

    def canonical(self, path: EdgePath) -> EdgePath:
        """Rotation of a closed path that starts at its smallest injected (non-hop) edge id."""
        positions = [index for index, edge_id in enumerate(path) if not self.edges[edge_id].is_hop]
        start = min(positions, key=lambda index: path[index])
        return path[start:] + path[:start]


def _within_bound(graph: EdgeGraph, path: EdgePath, bound: Optional[int]) -> bool:
    return bound is None or graph.delay_injections(path) <= bound


def score_chain(edges: list[CausalEdge], sim_by_fault: dict[str, float]) -> float:
    """Mean similarity score of the clusters of the chain's injected faults; unknown clusters count as 1."""
    injected = [edge.src for edge in edges if not edge.is_hop]
    if not injected:
        return 1.0
    return sum(sim_by_fault.get(fault, 1.0) for fault in injected) / len(injected)


def cluster_lookup(clusters: list[FaultCluster]) -> tuple[dict[str, str], dict[str, float]]:
    """fault -> cluster id and fault -> cluster sim-score (1 when not scored yet)."""
    cluster_of: dict[str, str] = {}
    sim_of: dict[str, float] = {}
    for cluster in clusters:
        for member in cluster.members:
            cluster_of[member] = cluster.id
            sim_of[member] = cluster.sim_score if cluster.sim_score is not None else 1.0
    return cluster_of, sim_of


def _chain(graph: EdgeGraph, path: EdgePath, cluster_of: dict[str, str], sim_of: dict[str, float]) -> Chain:
    edges = [graph.edges[edge_id] for edge_id in path]
    return Chain(
        edges=edges,
        score=score_chain(edges, sim_of),
        signature=[cluster_of.get(edge.src, edge.src) for edge in edges if not edge.is_hop],
    )


def _extend(graph: EdgeGraph, paths: list[EdgePath], bound: Optional[int]) -> list[EdgePath]:
    extended: list[EdgePath] = []
    for path in paths:
        for successor in graph.successors[path[-1]]:
            if successor in path:
                continue
            candidate = path + (successor,)
            if _within_bound(graph, candidate, bound):
                extended.append(candidate)
    return extended


def beam_search(
    edges: list[CausalEdge],
    clusters: list[FaultCluster],
    beam_size: int = 100_000,
    max_delay_injections: Optional[int] = None,
    max_depth: int = 16,
    workers: int = 1,
) -> list[Chain]:
    """Cycles found by level-wise chain extension, keeping the `beam_size` lowest-scored chains per level."""
    graph = EdgeGraph(edges)
    cluster_of, sim_of = cluster_lookup(clusters)

    def score(path: EdgePath) -> tuple[float, str]:
        return score_chain([graph.edges[edge_id] for edge_id in path], sim_of), " > ".join(path)

    beam = [(edge_id,) for edge_id in graph.starts() if _within_bound(graph, (edge_id,), max_delay_injections)]
    beam = sorted(beam, key=score)[:beam_size]
    found: dict[EdgePath, Chain] = {}
    for depth in range(1, max_depth + 1):
        if not beam:
            break
        open_paths: list[EdgePath] = []
        for path in beam:
            if graph.closes(path):
                canonical = graph.canonical(path)
                found.setdefault(canonical, _chain(graph, canonical, cluster_of, sim_of))
            else:
                open_paths.append(path)
        if depth == max_depth:
            break
        partitions = [open_paths[index::workers] for index in range(workers)] if workers > 1 else [open_paths]
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            results = list(pool.map(lambda part: _extend(graph, part, max_delay_injections), partitions))
        merged = sorted({path for result in results for path in result}, key=score)
        beam = merged[:beam_size]
        logger.debug(f"level {depth}: {len(merged)} chains, {len(beam)} kept, {len(found)} cycles so far")
    cycles = sorted(found.values(), key=lambda chain: (chain.score, chain.id))
    logger.info(f"Beam search found {len(cycles)} cycles over {len(edges)} edges")
    return cycles


def exhaustive_cycles(
    edges: list[CausalEdge], max_delay_injections: Optional[int] = None, max_depth: int = 16
) -> set[EdgePath]:
    """Every canonical cycle reachable by depth-first enumeration of simple chains."""
    graph = EdgeGraph(edges)
    cycles: set[EdgePath] = set()
    for start in graph.starts():
        stack: list[EdgePath] = [(start,)]
        while stack:
            path = stack.pop()
            if not _within_bound(graph, path, max_delay_injections):
                continue
            if graph.closes(path):
                cycles.add(graph.canonical(path))
                continue
            if len(path) >= max_depth:
                continue
            stack.extend(path + (successor,) for successor in graph.successors[path[-1]] if successor not in path)
    return cycles


def _rotation_minimal(signature: list[str]) -> tuple[str, ...]:
    if not signature:
        return ()
    return min(tuple(signature[index:] + signature[:index]) for index in range(len(signature)))


def cluster_cycles(cycles: list[Chain]) -> list[CycleCluster]:
    """Group cycles that visit the same sequence of fault clusters."""
    groups: dict[tuple[str, ...], list[Chain]] = {}
    for chain in cycles:
        groups.setdefault(_rotation_minimal(chain.signature), []).append(chain)
    return [
        CycleCluster(signature=list(signature), members=sorted(members, key=lambda chain: (chain.score, chain.id)))
        for signature, members in sorted(groups.items())
    ]


def detect(
    edges: list[CausalEdge],
    clusters: list[FaultCluster],
    beam_size: int = 100_000,
    max_delay_injections: Optional[int] = None,
    max_depth: int = 16,
    workers: int = 1,
) -> CycleReport:
    cycles = beam_search(edges, clusters, beam_size, max_delay_injections, max_depth, workers)
    return CycleReport(cycles=cycles, clusters=cluster_cycles(cycles))


def narrate(report: CycleReport) -> str:
    """Human-readable account of each cycle cluster."""
    if not report.clusters:
        return "No self-sustaining cascading failure found.\n"
    lines: list[str] = []
    for number, cluster in enumerate(report.clusters, start=1):
        lines.append(f"Cycle cluster {number}: {' -> '.join(cluster.signature)} ({len(cluster.members)} cycles)")
        for chain in cluster.members:
            lines.append(f"  cycle (score {chain.score:.3f}):")
            for step, edge in enumerate(chain.edges, start=1):
                if edge.is_hop:
                    lines.append(f"    {step}. the delay on {edge.src} spreads to loop {edge.dst} [{edge.kind.value}]")
                    continue
                summary = edge.evidence.summary() if edge.evidence is not None else ""
                lines.append(
                    f"    {step}. in test {edge.test}, injecting {edge.injection_mode.value} at {edge.src} "
                    f"triggers {edge.dst} [{edge.kind.value}, phase {edge.phase}] {summary}".rstrip()
                )
            lines.append(f"    which brings the chain back to {chain.edges[0].src}.")
    return "\n".join(lines) + "\n"


def naive_baseline(
    scenario: Scenario,
    faults: list[FaultPoint],
    reachability: dict[str, list[str]],
    config: CampaignConfig,
) -> list[str]:
    """Faults whose own injection makes them recur, checked in every reaching test."""
    profiles: dict[str, list[RunTrace]] = {}
    detected: list[str] = []
    for fault in faults:
        for test_name in reachability.get(fault.id, []):
            test = scenario.test(test_name)
            if test is None:
                continue
            if test_name not in profiles:
                profiles[test_name] = run_repeated(
                    scenario, test, InjectionPlan(), config.seed, config.repetitions, config.timeout_range
                )
            delays = config.delay_values if fault.kind == FaultKind.DELAY else [None]
            if any(
                self_interference(
                    fault,
                    profiles[test_name],
                    run_repeated(
                        scenario, test, plan_for(fault, delay), config.seed, config.repetitions, config.timeout_range
                    ),
                    config.p_value,
                    config.trace_threshold,
                )
                for delay in delays
            ):
                detected.append(fault.id)
                break
    logger.info(f"Baseline found {len(detected)} self-interfering faults in {scenario.name}")
    return detected
