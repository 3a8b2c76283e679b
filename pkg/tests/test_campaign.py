"""End-to-end campaigns over the bundled scenarios."""

from pathlib import Path

import pytest

from app.campaign_service import Campaign, StageError, cycle_found, run_stage
from app.models import CampaignConfig, EdgeKind
from app.trace_archive import (
    BASELINE_FORMAT,
    COVERAGE_FORMAT,
    REPORT_FORMAT,
    ArchiveVersionError,
    read_document,
    write_document,
)

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

pytestmark = pytest.mark.campaign


def campaign(name: str, out: Path, **overrides) -> Campaign:
    values = {"scenario": str(SCENARIOS / f"{name}.scn"), "output_dir": str(out), "workers": 1}
    values.update(overrides)
    return Campaign(CampaignConfig(**values))


def found_expected(run: Campaign) -> bool:
    report = run.run()
    return all(cycle_found(expected, report) for expected in run.scenario.expected_cycles)


def test_region_storm_is_found(tmp_path):
    """Test the three-fault cycle that no single fault reveals."""
    run = campaign("region-retry", tmp_path)
    report = run.run()
    assert cycle_found(["deploy-loop", "assign-ioe", "can-place-favored"], report)
    assert len(report.clusters) == 1

    document = read_document(tmp_path / "report.json", REPORT_FORMAT)
    assert document["expected"] == [{"faults": ["deploy-loop", "assign-ioe", "can-place-favored"], "found": True}]
    assert (tmp_path / "report.txt").read_text(encoding="utf-8").startswith("Cycle cluster 1")

    assert run.baseline() == []
    assert read_document(tmp_path / "baseline.json", BASELINE_FORMAT)["expected"][0]["found"] is False


def test_delay_fault_explored_in_widest_test(tmp_path):
    """Test that phase one puts the region loop into the workload with the widest coverage."""
    run = campaign("region-retry", tmp_path)
    run.profile()
    schedule = run.schedule(1)
    assert {item.fault: item.test for item in schedule}["deploy-loop"] == "t1"
    assert len(schedule) == len(run.faults)


def test_self_loop_is_found_by_both(tmp_path):
    """Test a cycle the baseline also reports."""
    run = campaign("self-loop", tmp_path)
    assert found_expected(run)
    assert run.baseline() == ["fetch-loop"]


def test_quiet_scenario_has_no_cycle(tmp_path):
    """Test the campaign exit code without cycles."""
    run = campaign("quiet", tmp_path)
    assert run_stage("campaign", run) == 1
    assert (tmp_path / "report.txt").read_text(encoding="utf-8") == "No self-sustaining cascading failure found.\n"


def test_scenario_without_tests(tmp_path):
    """Test profiling a scenario that declares no workloads."""
    run = campaign("minimal", tmp_path)
    assert run.profile() == []
    assert (tmp_path / "profile-traces.jsonl").read_text(encoding="utf-8") == '{"format": "cascadelab-trace v1"}\n'


def test_profiles_are_byte_identical(tmp_path):
    """Test that the same seed writes the same profile archive."""
    first = campaign("region-retry", tmp_path / "a")
    second = campaign("region-retry", tmp_path / "b", workers=2)
    first.profile()
    second.profile()
    archive = "profile-traces.jsonl"
    assert (tmp_path / "a" / archive).read_bytes() == (tmp_path / "b" / archive).read_bytes()


def test_campaigns_are_reproducible(tmp_path):
    """Test that two campaigns with the same seed report the same cycles."""
    first = campaign("ibr-retry", tmp_path / "a").run()
    second = campaign("ibr-retry", tmp_path / "b", workers=2).run()
    assert first == second


def test_callers_must_agree(tmp_path):
    """Test that edges observed under different callers do not join."""
    split = campaign("caller-split", tmp_path / "split")
    assert not found_expected(split)
    joined = campaign("caller-joined", tmp_path / "joined")
    assert found_expected(joined)


@pytest.mark.parametrize("name", ["ibr-retry", "shard-redistribution"])
def test_planted_cycles_are_found(tmp_path, name):
    """Test the remaining planted cycles."""
    assert found_expected(campaign(name, tmp_path))


def test_all_edge_kinds_occur(tmp_path):
    """Test that the bundled scenarios produce every kind of causal edge."""
    kinds: set[EdgeKind] = set()
    for name in ("region-retry", "nested-batch"):
        run = campaign(name, tmp_path / name)
        run.run()
        kinds |= {edge.kind for edge in run.edges()}
    assert kinds == set(EdgeKind)


def test_random_allocation(tmp_path):
    """Test the random-allocation campaign on the same budget."""
    run = campaign("self-loop", tmp_path, allocation="random")
    assert found_expected(run)
    assert run.phases_done() == [0]


def test_stage_failures_are_wrapped(tmp_path):
    """Test that a stage run out of order fails as a stage error."""
    run = campaign("self-loop", tmp_path)
    with pytest.raises(StageError) as exc:
        run_stage("schedule", run, 1)
    assert exc.value.stage == "schedule"
    with pytest.raises(StageError):
        run_stage("inject", run)


def test_reports_are_byte_identical(tmp_path):
    """Test that the worker count does not change a single byte of the report."""
    campaign("region-retry", tmp_path / "one").run()
    campaign("region-retry", tmp_path / "four", workers=4).run()
    assert (tmp_path / "one" / "report.json").read_bytes() == (tmp_path / "four" / "report.json").read_bytes()
    assert (tmp_path / "one" / "report.txt").read_bytes() == (tmp_path / "four" / "report.txt").read_bytes()


def test_detect_resumes_from_edges_and_ledger(tmp_path):
    """Test that detection needs only the phase edges, clusters and ledger of a finished campaign."""
    campaign("region-retry", tmp_path).run()
    report = (tmp_path / "report.json").read_bytes()
    for pattern in ("*traces*.jsonl", "schedule-p*.json", "report.*"):
        for path in tmp_path.glob(pattern):
            path.unlink()
    assert run_stage("detect", campaign("region-retry", tmp_path)) == 0
    assert (tmp_path / "report.json").read_bytes() == report


def test_changed_archive_version_is_rejected(tmp_path):
    """Test that profile documents from another format version are refused."""
    run = campaign("self-loop", tmp_path)
    run.profile()
    document = read_document(tmp_path / "coverage.json", COVERAGE_FORMAT)
    write_document(tmp_path / "coverage.json", {"coverage": document["coverage"]}, "cascadelab-coverage v0")
    with pytest.raises(ArchiveVersionError):
        run.schedule(1)

    (tmp_path / "reachability.json").write_text('{"fetch-loop": ["t1"]}\n', encoding="utf-8")
    with pytest.raises(ArchiveVersionError):
        run.reachability()


def test_rerun_with_other_allocation_ignores_old_phases(tmp_path):
    """Test that a random campaign in a used directory detects on its own edges only."""
    campaign("self-loop", tmp_path).run()
    second = campaign("self-loop", tmp_path, allocation="random")
    second.run()
    assert second.phases_done() == [0]
    assert not list(tmp_path.glob("edges-p[123].jsonl"))
    assert {edge.phase for edge in second.edges()} == {0}
    assert read_document(tmp_path / "report.json", REPORT_FORMAT)["campaign"]["allocation"] == "random"

    third = campaign("self-loop", tmp_path)
    third.run()
    assert third.phases_done() == [1, 2, 3]
    assert not (tmp_path / "edges-p0.jsonl").exists()
