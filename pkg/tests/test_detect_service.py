"""Tests for cycle search, cycle clustering and the self-interference baseline."""

import numpy as np
import pytest

from app.detect_service import (
    EdgeGraph,
    beam_search,
    cluster_cycles,
    cluster_lookup,
    detect,
    exhaustive_cycles,
    naive_baseline,
    narrate,
    score_chain,
)
from app.fault_service import enumerate_fault_points
from app.models import (
    CampaignConfig,
    CausalEdge,
    Chain,
    CycleReport,
    EdgeKind,
    FaultCluster,
    InjectionMode,
    InjectionPlan,
    StitchContext,
)
from app.sim_engine import build_reachability, run_repeated

KINDS = list(EdgeKind)
NODES = ["a", "b", "c", "d"]


def edge(kind: EdgeKind, src: str, dst: str, test: str = "t1", origin: str = "") -> CausalEdge:
    mode = InjectionMode.ONE_SHOT_EXCEPTION if kind in (EdgeKind.E_I, EdgeKind.S_I) else InjectionMode.DELAY
    return CausalEdge(
        id=f"{kind.value}:{src}->{dst}@{test}",
        kind=kind,
        src=src,
        dst=dst,
        test=test,
        origin=origin or f"{src}@{test}",
        injection_mode=mode,
        src_contexts=[StitchContext()],
        dst_contexts=[StitchContext()],
    )


def two_edge_cycle() -> list[CausalEdge]:
    return [edge(EdgeKind.S_I, "ioe", "loop", test="t2"), edge(EdgeKind.E_D, "loop", "ioe")]


def random_corpus(rng: np.random.Generator, size: int) -> list[CausalEdge]:
    edges: dict[str, CausalEdge] = {}
    for _ in range(size):
        kind = KINDS[int(rng.integers(len(KINDS)))]
        src, dst = (NODES[int(index)] for index in rng.integers(len(NODES), size=2))
        origin = f"o{int(rng.integers(2))}"
        item = edge(kind, src, dst, test=origin, origin=origin)
        edges[item.id] = item
    return list(edges.values())


def ids(chain: Chain) -> tuple[str, ...]:
    return tuple(item.id for item in chain.edges)


def test_self_edge_is_a_cycle():
    """Test a loop whose slowdown slows itself down."""
    cycles = beam_search([edge(EdgeKind.S_D, "loop", "loop")], [])
    assert [ids(chain) for chain in cycles] == [("S+(D):loop->loop@t1",)]


def test_two_edge_cycle_starts_at_smallest_id():
    """Test canonical rotation of a found cycle."""
    cycles = beam_search(two_edge_cycle(), [])
    assert [ids(chain) for chain in cycles] == [("E(D):loop->ioe@t1", "S+(I):ioe->loop@t2")]


def test_open_chain_is_not_a_cycle():
    """Test that a chain that does not return finds nothing."""
    edges = [edge(EdgeKind.E_D, "loop", "ioe"), edge(EdgeKind.S_I, "ioe", "other")]
    assert beam_search(edges, []) == []
    assert exhaustive_cycles(edges) == set()


def test_hops_never_start_a_cycle():
    """Test the starting edges of the search."""
    edges = two_edge_cycle() + [edge(EdgeKind.ICFG, "loop", "outer")]
    assert EdgeGraph(edges).starts() == ["E(D):loop->ioe@t1", "S+(I):ioe->loop@t2"]


def test_delay_injection_bound():
    """Test the limit on delay injections per cycle."""
    assert beam_search(two_edge_cycle(), [], max_delay_injections=0) == []
    assert len(beam_search(two_edge_cycle(), [], max_delay_injections=1)) == 1
    assert exhaustive_cycles(two_edge_cycle(), max_delay_injections=0) == set()


def test_depth_bound():
    """Test that cycles longer than the depth limit are not reported."""
    assert beam_search(two_edge_cycle(), [], max_depth=1) == []
    assert len(beam_search(two_edge_cycle(), [], max_depth=2)) == 1


@pytest.mark.parametrize("seed", range(50))
def test_beam_search_matches_exhaustive_search(seed):
    """Test that an unbounded beam finds exactly the cycles of exhaustive enumeration."""
    edges = random_corpus(np.random.default_rng(seed), 10)
    found = {ids(chain) for chain in beam_search(edges, [], max_depth=6)}
    assert found == exhaustive_cycles(edges, max_depth=6)


def test_parallel_extension_matches_sequential():
    """Test that the worker count does not change the result."""
    edges = random_corpus(np.random.default_rng(99), 14)
    assert beam_search(edges, [], max_depth=6, workers=3) == beam_search(edges, [], max_depth=6, workers=1)


def test_search_is_deterministic():
    """Test that the same corpus gives the same cycles in the same order."""
    edges = random_corpus(np.random.default_rng(7), 12)
    assert beam_search(edges, []) == beam_search(list(reversed(edges)), [])


def test_score_chain():
    """Test chain scores from cluster sim-scores."""
    first, second = two_edge_cycle()
    assert score_chain([first, second], {"ioe": 0.4, "loop": 0.4}) == pytest.approx(0.4)
    assert score_chain([first, second], {"ioe": 0.4}) == pytest.approx(0.7)
    assert score_chain([second], {}) == 1.0
    assert score_chain([edge(EdgeKind.ICFG, "l2", "l1")], {"l2": 0.0}) == 1.0


@pytest.mark.parametrize("case", range(25))
def test_score_chain_matches_formula(case):
    """Test score_chain against the mean sim-score of the injected faults, unknown faults counting 1."""
    rng = np.random.default_rng(500 + case)
    edges = random_corpus(rng, int(rng.integers(1, 8)))
    sim_by_fault = {node: float(rng.random()) for node in NODES if rng.random() < 0.7}
    injected = [item.src for item in edges if not item.is_hop]
    expected = sum(sim_by_fault.get(fault, 1.0) for fault in injected) / len(injected) if injected else 1.0
    assert score_chain(edges, sim_by_fault) == pytest.approx(expected, abs=1e-9)


def test_cluster_lookup():
    """Test the fault to cluster maps."""
    clusters = [FaultCluster(id="G0", members=["a", "b"], sim_score=0.25), FaultCluster(id="G1", members=["c"])]
    cluster_of, sim_of = cluster_lookup(clusters)
    assert cluster_of == {"a": "G0", "b": "G0", "c": "G1"}
    assert sim_of == {"a": 0.25, "b": 0.25, "c": 1.0}


def test_low_scored_cycles_come_first():
    """Test that cycles through diverse clusters rank ahead."""
    clusters = [FaultCluster(id="G0", members=["loop", "ioe"], sim_score=0.2)]
    cycles = beam_search(two_edge_cycle() + [edge(EdgeKind.S_D, "slow", "slow")], clusters)
    assert [chain.score for chain in cycles] == pytest.approx([0.2, 1.0])
    assert cycles[0].signature == ["G0", "G0"]
    assert cycles[1].signature == ["slow"]


def test_cycles_cluster_by_signature_rotation():
    """Test grouping of cycles visiting the same fault clusters."""
    first = Chain(edges=two_edge_cycle(), score=0.5, signature=["G1", "G0"])
    second = Chain(edges=list(reversed(two_edge_cycle())), score=0.3, signature=["G0", "G1"])
    third = Chain(edges=[edge(EdgeKind.S_D, "slow", "slow")], score=1.0, signature=["G2"])
    clusters = cluster_cycles([first, second, third])
    assert [cluster.signature for cluster in clusters] == [["G0", "G1"], ["G2"]]
    assert clusters[0].members == [second, first]


def test_narrate():
    """Test the human-readable report."""
    assert narrate(CycleReport()) == "No self-sustaining cascading failure found.\n"
    text = narrate(detect(two_edge_cycle(), []))
    assert text.startswith("Cycle cluster 1: ")
    assert "injecting delay at loop triggers ioe" in text
    assert "which brings the chain back to loop." in text


def baseline(scenario) -> list[str]:
    faults = enumerate_fault_points(scenario)
    traces = [trace for test in scenario.tests for trace in run_repeated(scenario, test, InjectionPlan(), 0)]
    reachability = build_reachability(scenario, traces, faults)
    return naive_baseline(scenario, faults, reachability, CampaignConfig())


def test_baseline_finds_self_interference(bundled):
    """Test a loop whose own slowdown makes it run more often."""
    assert baseline(bundled("self-loop")) == ["fetch-loop"]


def test_baseline_misses_multi_fault_cycles(bundled):
    """Test that no fault of the region storm interferes with itself."""
    assert baseline(bundled("region-retry")) == []
    assert baseline(bundled("ibr-retry")) == []
    assert baseline(bundled("quiet")) == []
