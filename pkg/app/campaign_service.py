"""Campaign stages: profile, schedule, inject, fca, detect and baseline, all persisted in the output directory."""

import logging
from functools import cached_property
from pathlib import Path
from typing import Optional

from app import alloc_service, ledger_service
from app.detect_service import detect, naive_baseline, narrate
from app.fault_service import enumerate_fault_points, fault_index, loop_meta
from app.fca_service import diff_runs, edges_from_report, merge_reports
from app.models import (
    BudgetLedger,
    CampaignConfig,
    CausalEdge,
    CycleReport,
    ExperimentRecord,
    FaultCluster,
    FaultKind,
    FaultPoint,
    InjectionPlan,
    LoopMeta,
    RunTrace,
    Scenario,
    ScheduledExperiment,
)
from app.scenario_parser import load_scenario
from app.sim_engine import build_reachability, coverage_by_test, plan_for, run_batch
from app.startup import startup
from app.trace_archive import (
    BASELINE_FORMAT,
    CLUSTERS_FORMAT,
    COVERAGE_FORMAT,
    FAULTS_FORMAT,
    REACHABILITY_FORMAT,
    REPORT_FORMAT,
    SCHEDULE_FORMAT,
    read_document,
    read_edges,
    read_traces,
    write_document,
    write_edges,
    write_traces,
)

logger = logging.getLogger(__name__)

PHASES = (alloc_service.PHASE_ONE, alloc_service.PHASE_TWO, alloc_service.PHASE_THREE)
PHASE_ARTIFACTS = (
    "schedule-p{phase}.json",
    "injection-traces-p{phase}.jsonl",
    "clusters-p{phase}.json",
    "edges-p{phase}.jsonl",
)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


def cycle_found(expected: list[str], report: CycleReport) -> bool:
    """Whether some cycle injects exactly the expected faults, in the expected cyclic order."""
    rotations = {tuple(expected[index:] + expected[:index]) for index in range(len(expected))}
    return any(tuple(chain.injected_faults()) in rotations for chain in report.cycles)


class Campaign:
    """One scenario's campaign, rooted in an output directory."""

    def __init__(self, config: CampaignConfig):
        self.config = config
        self.out = Path(config.output_dir)
        self.url = startup(config)

    @cached_property
    def scenario(self) -> Scenario:
        return load_scenario(Path(self.config.scenario))

    @cached_property
    def faults(self) -> list[FaultPoint]:
        return enumerate_fault_points(self.scenario)

    @cached_property
    def meta(self) -> dict[str, LoopMeta]:
        return loop_meta(self.scenario)

    def path(self, name: str) -> Path:
        return self.out / name

    # profile

    def profile(self) -> list[RunTrace]:
        """Five fault-free runs per test, plus coverage and reachability maps."""
        if not self.scenario.tests:
            logger.warning(f"Scenario {self.scenario.name} declares no tests")
        jobs = [(test.name, InjectionPlan()) for test in self.scenario.tests]
        traces = [trace for runs in self._run(jobs) for trace in runs]
        write_traces(self.path("profile-traces.jsonl"), traces)
        write_document(self.path("coverage.json"), {"coverage": coverage_by_test(traces)}, COVERAGE_FORMAT)
        reachability = build_reachability(self.scenario, traces, self.faults)
        write_document(self.path("reachability.json"), {"reachability": reachability}, REACHABILITY_FORMAT)
        faults = [fault.model_dump(mode="json") for fault in self.faults]
        write_document(self.path("faults.json"), {"faults": faults}, FAULTS_FORMAT)
        logger.info(f"Profiled {len(self.scenario.tests)} tests, {len(self.faults)} fault points")
        return traces

    def reachability(self) -> dict[str, list[str]]:
        return read_document(self.path("reachability.json"), REACHABILITY_FORMAT)["reachability"]

    def coverage(self) -> dict[str, list[str]]:
        return read_document(self.path("coverage.json"), COVERAGE_FORMAT)["coverage"]

    def profile_traces(self) -> dict[str, list[RunTrace]]:
        grouped: dict[str, list[RunTrace]] = {}
        for trace in read_traces(self.path("profile-traces.jsonl")):
            grouped.setdefault(trace.test, []).append(trace)
        return grouped

    # schedule

    def schedule(self, phase: int) -> list[ScheduledExperiment]:
        """Decide the (fault, test) experiments of one phase and reserve their budget."""
        reachability = self.reachability()
        self._reset(phase)
        rng = alloc_service.phase_rng(self.config.seed, phase)
        ledger = self._ledger_before(phase)
        match phase:
            case alloc_service.RANDOM_PHASE:
                schedule = alloc_service.schedule_random(self.faults, reachability, set(), ledger, rng)
            case alloc_service.PHASE_ONE:
                schedule = alloc_service.schedule_phase1(self.faults, reachability, self.coverage(), ledger)
            case alloc_service.PHASE_TWO:
                used = alloc_service.used_pairs(self._records_before(phase))
                schedule = alloc_service.schedule_phase2(self._clusters(phase - 1), reachability, used, ledger, rng)
            case alloc_service.PHASE_THREE:
                used = alloc_service.used_pairs(self._records_before(phase))
                schedule = alloc_service.schedule_phase3(self._clusters(phase - 1), reachability, used, ledger, rng)
            case _:
                raise ValueError(f"unknown phase {phase}")
        self._write_schedule(phase, schedule)
        ledger_service.save_ledger(ledger, phase, self.url)
        logger.info(f"Phase {phase}: scheduled {len(schedule)} experiments")
        return schedule

    def phases(self) -> tuple[int, ...]:
        """Phases the configured allocation mode runs, in order."""
        return (alloc_service.RANDOM_PHASE,) if self.config.allocation == "random" else PHASES

    def _reset(self, phase: int) -> None:
        """Drop ledger rows and phase artifacts from `phase` on; the first phase of a mode drops every phase."""
        first = phase == self.phases()[0]
        start = alloc_service.RANDOM_PHASE if first else phase
        ledger_service.clear_from(start, self.url)
        for stale in (alloc_service.RANDOM_PHASE, *PHASES):
            if stale < start:
                continue
            for pattern in PHASE_ARTIFACTS:
                path = self.path(pattern.format(phase=stale))
                if path.exists():
                    logger.debug(f"Removing stale artifact {path}")
                    path.unlink()

    def _ledger_before(self, phase: int) -> BudgetLedger:
        if phase == alloc_service.RANDOM_PHASE:
            return alloc_service.new_random_ledger(len(self.faults), self.config.budget_multiplier)
        if phase == alloc_service.PHASE_ONE:
            return alloc_service.new_ledger(len(self.faults), self.config.budget_multiplier)
        ledger = ledger_service.load_ledger(phase - 1, self.url)
        if ledger is None:
            raise ValueError(f"phase {phase - 1} has not finished")
        return ledger

    def _records_before(self, phase: int) -> list[ExperimentRecord]:
        return ledger_service.load_experiments(self.url, phases=list(range(alloc_service.PHASE_ONE, phase)))

    def _clusters(self, phase: int) -> list[FaultCluster]:
        payload = read_document(self.path(f"clusters-p{phase}.json"), CLUSTERS_FORMAT)
        return [FaultCluster.model_validate(item) for item in payload["clusters"]]

    def _write_schedule(self, phase: int, schedule: list[ScheduledExperiment]) -> None:
        write_document(
            self.path(f"schedule-p{phase}.json"),
            {"phase": phase, "experiments": [item.model_dump(mode="json") for item in schedule]},
            SCHEDULE_FORMAT,
        )

    def read_schedule(self, phase: int) -> list[ScheduledExperiment]:
        payload = read_document(self.path(f"schedule-p{phase}.json"), SCHEDULE_FORMAT)
        return [ScheduledExperiment.model_validate(item) for item in payload["experiments"]]

    # inject

    def _plans(self, item: ScheduledExperiment) -> list[InjectionPlan]:
        fault = fault_index(self.faults)[item.fault]
        if fault.kind == FaultKind.DELAY:
            return [plan_for(fault, delay) for delay in self.config.delay_values]
        return [plan_for(fault)]

    def _run(self, jobs: list[tuple[str, InjectionPlan]]) -> list[list[RunTrace]]:
        return run_batch(
            self.scenario,
            jobs,
            self.config.seed,
            self.config.workers,
            self.config.repetitions,
            self.config.timeout_range,
        )

    def inject(self, phase: int) -> list[RunTrace]:
        """Run every scheduled experiment (each delay value separately) five times."""
        schedule = self.read_schedule(phase)
        jobs = [(item.test, plan) for item in schedule for plan in self._plans(item)]
        traces = [trace for runs in self._run(jobs) for trace in runs]
        write_traces(self.path(f"injection-traces-p{phase}.jsonl"), traces)
        logger.info(f"Phase {phase}: {len(jobs)} injection plans, {len(traces)} runs")
        return traces

    # fca

    def records(self, phase: int) -> list[ExperimentRecord]:
        """Interference reports for the experiments of one phase, from the persisted traces."""
        schedule = self.read_schedule(phase)
        profiles = self.profile_traces()
        runs: dict[tuple[Optional[str], str, str], list[RunTrace]] = {}
        for trace in read_traces(self.path(f"injection-traces-p{phase}.jsonl")):
            runs.setdefault((trace.plan.target, trace.test, trace.plan.label), []).append(trace)
        records: list[ExperimentRecord] = []
        for item in schedule:
            sub_reports = [
                diff_runs(
                    profiles[item.test],
                    runs[(plan.target, item.test, plan.label)],
                    self.faults,
                    self.config.p_value,
                    self.config.trace_threshold,
                )
                for plan in self._plans(item)
            ]
            records.append(
                ExperimentRecord(
                    fault=item.fault,
                    test=item.test,
                    phase=phase,
                    cluster=item.cluster,
                    report=merge_reports(sub_reports),
                    sub_reports=sub_reports,
                )
            )
        return records

    def fca(self, phase: int) -> list[CausalEdge]:
        """Diff the phase's runs, update clusters and budget, and archive the causal edges."""
        records = self.records(phase)
        ledger = ledger_service.load_ledger(phase, self.url)
        if ledger is None:
            raise ValueError(f"phase {phase} was not scheduled")
        earlier = self._records_before(phase) if phase != alloc_service.RANDOM_PHASE else []
        clusters = self._finish(phase, records, earlier, ledger)
        return self._persist(phase, records, earlier, clusters, ledger)

    def _finish(
        self,
        phase: int,
        records: list[ExperimentRecord],
        earlier: list[ExperimentRecord],
        ledger: BudgetLedger,
    ) -> list[FaultCluster]:
        config = self.config
        match phase:
            case alloc_service.RANDOM_PHASE:
                alloc_service.revectorize(records, [fault.id for fault in self.faults])
                return []
            case alloc_service.PHASE_ONE:
                return alloc_service.finish_phase1(self.faults, records, ledger, config.tau)
            case alloc_service.PHASE_TWO:
                clusters = self._clusters(phase - 1)
                alloc_service.assign_clusters(records, clusters)
                return alloc_service.finish_phase2(self.faults, clusters, earlier + records, ledger, config.epsilon)
            case _:
                clusters = self._clusters(phase - 1)
                alloc_service.assign_clusters(records, clusters)
                return alloc_service.finish_phase3(
                    self.faults, clusters, earlier + records, config.epsilon, config.retrain_after_phase3
                )

    def _persist(
        self,
        phase: int,
        records: list[ExperimentRecord],
        earlier: list[ExperimentRecord],
        clusters: list[FaultCluster],
        ledger: BudgetLedger,
    ) -> list[CausalEdge]:
        ledger_service.save_experiments(records, phase, self.url)
        ledger_service.update_experiments(earlier, self.url)
        ledger_service.save_ledger(ledger, phase, self.url)
        write_document(
            self.path(f"clusters-p{phase}.json"),
            {"phase": phase, "clusters": [cluster.model_dump(mode="json") for cluster in clusters]},
            CLUSTERS_FORMAT,
        )
        edges = [edge for record in records for edge in edges_from_report(record.report, self.meta, phase)]
        write_edges(self.path(f"edges-p{phase}.jsonl"), edges)
        logger.info(f"Phase {phase}: {len(records)} experiments produced {len(edges)} causal edges")
        return edges

    # in-memory phase run, same artifacts as schedule + inject + fca

    def run_phase(self, phase: int) -> list[CausalEdge]:
        reachability = self.reachability()
        self._reset(phase)
        ledger = self._ledger_before(phase)
        rng = alloc_service.phase_rng(self.config.seed, phase)
        earlier = self._records_before(phase) if phase != alloc_service.RANDOM_PHASE else []

        def execute(schedule: list[ScheduledExperiment]) -> list[ExperimentRecord]:
            self._write_schedule(phase, schedule)
            ledger_service.save_ledger(ledger, phase, self.url)
            self.inject(phase)
            return self.records(phase)

        config = self.config
        match phase:
            case alloc_service.RANDOM_PHASE:
                records = alloc_service.run_random(self.faults, reachability, ledger, execute, rng)
                clusters: list[FaultCluster] = []
            case alloc_service.PHASE_ONE:
                records, clusters = alloc_service.run_phase1(
                    self.faults, reachability, self.coverage(), ledger, execute, config.tau
                )
            case alloc_service.PHASE_TWO:
                records, clusters = alloc_service.run_phase2(
                    self.faults, self._clusters(phase - 1), reachability, earlier, ledger, execute, rng, config.epsilon
                )
            case _:
                records, clusters = alloc_service.run_phase3(
                    self.faults,
                    self._clusters(phase - 1),
                    reachability,
                    earlier,
                    ledger,
                    execute,
                    rng,
                    config.epsilon,
                    config.retrain_after_phase3,
                )
        return self._persist(phase, records, earlier, clusters, ledger)

    # detect

    def phases_done(self) -> list[int]:
        return [phase for phase in self.phases() if self.path(f"edges-p{phase}.jsonl").exists()]

    def edges(self) -> list[CausalEdge]:
        found: dict[str, CausalEdge] = {}
        for phase in self.phases_done():
            for edge in read_edges(self.path(f"edges-p{phase}.jsonl")):
                found.setdefault(edge.id, edge)
        return list(found.values())

    def detect(self) -> CycleReport:
        """Search the edge corpus for cycles and write the machine and human reports."""
        phases = self.phases_done()
        clusters = self._clusters(phases[-1]) if phases else []
        edges = self.edges()
        report = detect(
            edges,
            clusters,
            self.config.beam_size,
            self.config.max_delay_injections,
            self.config.max_depth,
            self.config.workers,
        )
        ledger = ledger_service.load_ledger(None, self.url)
        per_phase: dict[str, int] = {}
        for edge in edges:
            per_phase[str(edge.phase)] = per_phase.get(str(edge.phase), 0) + 1
        payload = {
            "campaign": {
                "scenario": self.scenario.name,
                "seed": self.config.seed,
                "beam_size": self.config.beam_size,
                "allocation": self.config.allocation,
                "budget": ledger.model_dump(mode="json") if ledger is not None else None,
            },
            "edges_per_phase": per_phase,
            "expected": [
                {"faults": expected, "found": cycle_found(expected, report)} for expected in self.scenario.expected_cycles
            ],
            **report.model_dump(mode="json"),
        }
        write_document(self.path("report.json"), payload, REPORT_FORMAT)
        self.path("report.txt").write_text(narrate(report), encoding="utf-8")
        logger.info(f"Detected {len(report.cycles)} cycles in {len(report.clusters)} clusters")
        return report

    # baseline

    def baseline(self) -> list[str]:
        """Self-interference baseline, with a verdict per planted cycle."""
        if not self.path("reachability.json").exists():
            self.profile()
        detected = naive_baseline(self.scenario, self.faults, self.reachability(), self.config)
        payload = {
            "scenario": self.scenario.name,
            "detected": detected,
            "expected": [
                {"faults": expected, "found": any(fault in detected for fault in expected)}
                for expected in self.scenario.expected_cycles
            ],
        }
        write_document(self.path("baseline.json"), payload, BASELINE_FORMAT)
        return detected

    # everything

    def run(self) -> CycleReport:
        self.profile()
        for phase in self.phases():
            self.run_phase(phase)
        return self.detect()


def run_stage(stage: str, campaign: Campaign, phase: Optional[int] = None) -> int:
    """Run one named stage; returns the process exit code, failures become StageError."""
    try:
        match stage:
            case "profile":
                campaign.profile()
            case "schedule":
                campaign.schedule(_phase(phase))
            case "inject":
                campaign.inject(_phase(phase))
            case "fca":
                campaign.fca(_phase(phase))
            case "detect":
                return 0 if campaign.detect().clusters else 1
            case "baseline":
                campaign.baseline()
            case "campaign":
                return 0 if campaign.run().clusters else 1
            case _:
                raise ValueError(f"unknown stage {stage!r}")
    except Exception as exc:
        logger.error(f"Stage {stage} failed: {exc}")
        raise StageError(stage, exc) from exc
    return 0


def _phase(phase: Optional[int]) -> int:
    if phase is None:
        raise ValueError("this stage needs --phase")
    return phase
