from enum import Enum
from typing import Optional

from pydantic import field_validator, model_validator
from sqlalchemy import UniqueConstraint
from sqlmodel import Field, SQLModel


class FaultKind(str, Enum):
    EXCEPTION = "exception"
    DELAY = "delay"
    NEGATION = "negation"


class InjectionMode(str, Enum):
    NONE = "none"
    ONE_SHOT_EXCEPTION = "one-shot-exception"
    DELAY = "delay"
    NEGATE = "negate"


class EdgeKind(str, Enum):
    E_D = "E(D)"
    S_D = "S+(D)"
    E_I = "E(I)"
    S_I = "S+(I)"
    ICFG = "ICFG"
    CFG = "CFG"


class DelayRole(str, Enum):
    INJECTED = "injected"
    OBSERVED = "observed"
    PARENT = "parent"
    SIBLING = "sibling"


class CompatibilityReason(str, Enum):
    OK = "ok"
    STACK_MISMATCH = "stack-mismatch"
    TRACE_MISMATCH = "trace-mismatch"
    KIND_MISMATCH = "kind-mismatch"


class StatementKind(str, Enum):
    WORK = "work"
    SLEEP = "sleep"
    SET = "set"
    IF = "if"
    LOOP = "loop"
    CALL = "call"
    THROW = "throw"
    LIB = "lib"
    CHECK = "check"
    SEND = "send"
    RETRY = "retry"
    TRY = "try"


# Persistent models (campaign ledger)
class ExperimentRow(SQLModel, table=True):
    __tablename__ = "experiments"  # type: ignore[assignment]
    __table_args__ = (UniqueConstraint("fault_id", "test", name="uq_experiment_pair"),)

    id: Optional[int] = Field(default=None, primary_key=True)
    fault_id: str = Field(max_length=200, index=True)
    test: str = Field(max_length=200)
    phase: int = Field(index=True)
    payload: str  # ExperimentRecord as JSON


class LedgerRow(SQLModel, table=True):
    __tablename__ = "budget_ledger"  # type: ignore[assignment]

    id: Optional[int] = Field(default=None, primary_key=True)
    phase: int = Field(index=True, unique=True)  # ledger state once this phase is done
    payload: str  # BudgetLedger as JSON


# Scenario schemas
class CatchClause(SQLModel, table=False):
    classes: list[str] = Field(default_factory=list)  # "*" catches everything
    body: list["Statement"] = Field(default_factory=list)
    line: int = 0


class Statement(SQLModel, table=False):
    """One node of a handler's statement tree."""

    kind: StatementKind
    id: str
    line: int = 0
    expr: Optional[str] = None  # condition, bound, amount or assigned value
    var: Optional[str] = None
    target: Optional[str] = None  # handler, "component.handler" or detector id
    exception: Optional[str] = None
    raises: Optional[str] = None
    timeout: Optional[str] = None
    size: Optional[str] = None
    cost: Optional[str] = None
    fails_when: Optional[str] = None
    attempts: Optional[str] = None  # None retries forever
    backoff: Optional[str] = None
    on: list[str] = Field(default_factory=list)
    args: dict[str, str] = Field(default_factory=dict)
    jitter: int = 0
    io: bool = False
    excluded: bool = False
    body: list["Statement"] = Field(default_factory=list)
    orelse: list["Statement"] = Field(default_factory=list)
    catches: list[CatchClause] = Field(default_factory=list)


CatchClause.model_rebuild()
Statement.model_rebuild()


class DetectorDecl(SQLModel, table=False):
    id: str
    expr: str
    fault_on: bool = False  # return value that signals the error
    final_only_inputs: bool = False
    constant_or_unused_return: bool = False
    primitive_only: bool = False
    jdk_utility: bool = False
    line: int = 0

    @property
    def returns_boolean(self) -> bool:
        return True

    def filtered(self) -> bool:
        return self.final_only_inputs or self.constant_or_unused_return or self.primitive_only or self.jdk_utility


class Handler(SQLModel, table=False):
    name: str
    params: list[str] = Field(default_factory=list)
    body: list[Statement] = Field(default_factory=list)
    line: int = 0


class Component(SQLModel, table=False):
    name: str
    handlers: list[Handler] = Field(default_factory=list)
    detectors: list[DetectorDecl] = Field(default_factory=list)
    line: int = 0

    def handler(self, name: str) -> Optional[Handler]:
        return next((handler for handler in self.handlers if handler.name == name), None)

    def detector(self, name: str) -> Optional[DetectorDecl]:
        return next((detector for detector in self.detectors if detector.id == name), None)


class Request(SQLModel, table=False):
    component: str
    handler: str
    params: dict[str, str] = Field(default_factory=dict)
    line: int = 0


class TestWorkload(SQLModel, table=False):
    __test__ = False  # keep pytest from collecting the schema

    name: str
    requests: list[Request] = Field(default_factory=list)
    config_overrides: dict[str, int | bool] = Field(default_factory=dict)
    duration: int = 3_600_000  # expected virtual duration, ms
    line: int = 0


class Scenario(SQLModel, table=False):
    name: str
    components: list[Component] = Field(default_factory=list)
    tests: list[TestWorkload] = Field(default_factory=list)
    config: dict[str, int | bool] = Field(default_factory=dict)
    state: dict[str, str] = Field(default_factory=dict)
    expected_cycles: list[list[str]] = Field(default_factory=list)

    def component(self, name: str) -> Optional[Component]:
        return next((component for component in self.components if component.name == name), None)

    def test(self, name: str) -> Optional[TestWorkload]:
        return next((test for test in self.tests if test.name == name), None)


class LoopMeta(SQLModel, table=False):
    loop_id: str
    component: str
    handler: str
    constant_bound: bool
    reachable_code_size: int = Field(ge=0)
    performs_io: bool
    parent_loop: Optional[str] = None
    next_sibling_loop: Optional[str] = None


class FaultPoint(SQLModel, table=False):
    id: str
    kind: FaultKind
    source: str  # throw, lib, send, loop or detector
    component: str
    handler: Optional[str] = None
    enclosing_loop: Optional[str] = None


# Execution schemas
class InjectionPlan(SQLModel, table=False):
    target: Optional[str] = None
    mode: InjectionMode = InjectionMode.NONE
    delay_value: Optional[int] = None

    @model_validator(mode="after")
    def check_mode(self) -> "InjectionPlan":
        if (self.target is None) != (self.mode == InjectionMode.NONE):
            raise ValueError("a profile plan has no target and every injection plan has one")
        if (self.mode == InjectionMode.DELAY) != (self.delay_value is not None):
            raise ValueError("delay_value is set exactly for delay plans")
        return self

    @property
    def label(self) -> str:
        if self.mode == InjectionMode.DELAY:
            return f"{self.mode.value}@{self.delay_value}"
        return self.mode.value


class StitchContext(SQLModel, table=False):
    stack: list[str] = Field(default_factory=list)
    branches: list[tuple[str, bool]] = Field(default_factory=list)

    @field_validator("stack")
    @classmethod
    def check_stack(cls, value: list[str]) -> list[str]:
        if len(value) > 2:
            raise ValueError("call-stack-2 holds at most two frames")
        return value

    def key(self) -> tuple[tuple[str, ...], tuple[tuple[str, bool], ...]]:
        return tuple(self.stack), tuple((branch, bool(outcome)) for branch, outcome in self.branches)


class NoiseModel(SQLModel, table=False):
    seed: int = 0
    iteration_jitter: dict[str, int] = Field(default_factory=dict)
    scheduling_jitter: int = Field(default=0, ge=0)


class FaultEvent(SQLModel, table=False):
    fault_id: str
    context: StitchContext
    time: int = 0


class LoopRecord(SQLModel, table=False):
    count: int = Field(default=0, ge=0)
    contexts: list[StitchContext] = Field(default_factory=list)


class RunTrace(SQLModel, table=False):
    run_id: str
    test: str
    plan: InjectionPlan = Field(default_factory=InjectionPlan)
    seed: int = 0
    fault_events: list[FaultEvent] = Field(default_factory=list)
    loops: dict[str, LoopRecord] = Field(default_factory=dict)
    hits: dict[str, int] = Field(default_factory=dict)
    coverage: list[str] = Field(default_factory=list)
    wall: int = 0
    target_not_reached: bool = False
    aborted: bool = False
    deadline_reached: bool = False

    def loop_count(self, loop_id: str) -> int:
        record = self.loops.get(loop_id)
        return record.count if record is not None else 0

    def event_count(self, fault_id: str) -> int:
        return sum(1 for event in self.fault_events if event.fault_id == fault_id)


# Analysis schemas
class TraceEvidence(SQLModel, table=False):
    injection_count: int
    profile_count: int
    context: StitchContext


class IterEvidence(SQLModel, table=False):
    profile_samples: list[int]
    injection_samples: list[int]
    p_value: float
    contexts: list[StitchContext] = Field(default_factory=list)


class AdditionalFault(SQLModel, table=False):
    fault_id: str
    kind: FaultKind
    delay_value: Optional[int] = None
    trace: Optional[TraceEvidence] = None
    iteration: Optional[IterEvidence] = None

    def contexts(self) -> list[StitchContext]:
        if self.trace is not None:
            return [self.trace.context]
        return list(self.iteration.contexts) if self.iteration is not None else []

    def summary(self) -> str:
        if self.trace is not None:
            return f"seen in {self.trace.injection_count}/5 injection runs, {self.trace.profile_count}/5 profile runs"
        if self.iteration is not None:
            profile = sum(self.iteration.profile_samples) / max(1, len(self.iteration.profile_samples))
            injection = sum(self.iteration.injection_samples) / max(1, len(self.iteration.injection_samples))
            return f"iterations {profile:g} -> {injection:g} (p={self.iteration.p_value:.3g})"
        return ""


class InterferenceReport(SQLModel, table=False):
    injected: str
    injected_kind: FaultKind
    test: str
    delay_value: Optional[int] = None
    reached: bool = True
    additional: list[AdditionalFault] = Field(default_factory=list)
    injected_contexts: list[StitchContext] = Field(default_factory=list)
    loop_contexts: dict[str, list[StitchContext]] = Field(default_factory=dict)

    def faults(self) -> list[str]:
        return [item.fault_id for item in self.additional]


class CausalEdge(SQLModel, table=False):
    id: str
    kind: EdgeKind
    src: str
    dst: str
    test: str
    origin: str  # "<injected fault>@<test>" of the experiment that produced the edge
    injection_mode: InjectionMode
    phase: int = 0
    src_role: Optional[DelayRole] = None
    dst_role: Optional[DelayRole] = None
    src_contexts: list[StitchContext] = Field(default_factory=list)
    dst_contexts: list[StitchContext] = Field(default_factory=list)
    evidence: Optional[AdditionalFault] = None

    @property
    def is_hop(self) -> bool:
        return self.kind in (EdgeKind.ICFG, EdgeKind.CFG)

    @property
    def injects_delay(self) -> bool:
        return self.kind in (EdgeKind.E_D, EdgeKind.S_D)

    @property
    def ends_in_delay(self) -> bool:
        return self.kind in (EdgeKind.S_D, EdgeKind.S_I, EdgeKind.ICFG, EdgeKind.CFG)


# Allocation schemas
class CorpusStats(SQLModel, table=False):
    n: int = Field(default=0, ge=0)
    counts: dict[str, int] = Field(default_factory=dict)


class ExperimentRecord(SQLModel, table=False):
    fault: str
    test: str
    phase: int
    cluster: Optional[str] = None
    report: InterferenceReport
    sub_reports: list[InterferenceReport] = Field(default_factory=list)
    vector: list[float] = Field(default_factory=list)


class ScheduledExperiment(SQLModel, table=False):
    fault: str
    test: str
    phase: int
    cluster: Optional[str] = None


class FaultCluster(SQLModel, table=False):
    id: str
    members: list[str] = Field(default_factory=list)
    sim_score: Optional[float] = None
    weight: float = 1.0
    inert: bool = False


class BudgetTransfer(SQLModel, table=False):
    phase: int
    source: str
    target: str
    amount: int = Field(ge=0)
    reason: str = ""


class BudgetLedger(SQLModel, table=False):
    total: int = Field(ge=0)
    quotas: dict[int, int] = Field(default_factory=dict)
    spent: dict[int, int] = Field(default_factory=dict)
    spent_by_cluster: dict[str, int] = Field(default_factory=dict)
    unreachable: list[str] = Field(default_factory=list)
    transfers: list[BudgetTransfer] = Field(default_factory=list)

    def remaining(self, phase: int) -> int:
        return self.quotas.get(phase, 0) - self.spent.get(phase, 0)

    @property
    def spent_total(self) -> int:
        return sum(self.spent.values())

    @property
    def unspent(self) -> int:
        return self.total - self.spent_total


# Detection schemas
class CompatibilityVerdict(SQLModel, table=False):
    compatible: bool
    reason: CompatibilityReason

    @model_validator(mode="after")
    def check_reason(self) -> "CompatibilityVerdict":
        if self.compatible != (self.reason == CompatibilityReason.OK):
            raise ValueError("reason is ok exactly when the edges are compatible")
        return self


class Chain(SQLModel, table=False):
    edges: list[CausalEdge] = Field(default_factory=list)
    score: float = 0.0
    signature: list[str] = Field(default_factory=list)

    @property
    def id(self) -> str:
        return " > ".join(edge.id for edge in self.edges)

    def injected_faults(self) -> list[str]:
        return [edge.src for edge in self.edges if not edge.is_hop]


class CycleCluster(SQLModel, table=False):
    signature: list[str]
    members: list[Chain] = Field(default_factory=list)


class CycleReport(SQLModel, table=False):
    cycles: list[Chain] = Field(default_factory=list)
    clusters: list[CycleCluster] = Field(default_factory=list)


# Configuration
DEFAULT_DELAY_VALUES = [100, 250, 500, 1000, 2000, 4000, 8000]


class CampaignConfig(SQLModel, table=False):
    scenario: str = ""
    output_dir: str = "cascadelab-out"
    seed: int = 0
    budget_multiplier: int = Field(default=4, ge=1)
    epsilon: float = Field(default=0.01, gt=0, le=1)
    tau: float = Field(default=0.5, ge=0, le=1)
    p_value: float = Field(default=0.1, gt=0, lt=1)
    delay_values: list[int] = Field(default_factory=lambda: list(DEFAULT_DELAY_VALUES))
    timeout_min: int = Field(default=10_000, ge=0)
    timeout_max: int = Field(default=20_000, ge=0)
    beam_size: int = Field(default=100_000, ge=1)
    max_delay_injections: Optional[int] = Field(default=None, ge=0)
    max_depth: int = Field(default=16, ge=1)
    workers: int = Field(default=4, ge=1)
    repetitions: int = Field(default=5, ge=2)
    trace_threshold: int = Field(default=3, ge=1)
    retrain_after_phase3: bool = True
    allocation: str = "3pa"

    @field_validator("delay_values")
    @classmethod
    def check_delays(cls, value: list[int]) -> list[int]:
        if not value:
            raise ValueError("delay_values must not be empty")
        if any(delay <= 0 for delay in value) or any(a >= b for a, b in zip(value, value[1:])):
            raise ValueError("delay_values must be positive and strictly ascending")
        return value

    @field_validator("allocation")
    @classmethod
    def check_allocation(cls, value: str) -> str:
        if value not in ("3pa", "random"):
            raise ValueError("allocation is either '3pa' or 'random'")
        return value

    @model_validator(mode="after")
    def check_ranges(self) -> "CampaignConfig":
        if self.timeout_min > self.timeout_max:
            raise ValueError("timeout_min must not exceed timeout_max")
        if self.trace_threshold > self.repetitions:
            raise ValueError("trace_threshold cannot exceed repetitions")
        return self

    @property
    def timeout_range(self) -> tuple[int, int]:
        return self.timeout_min, self.timeout_max
