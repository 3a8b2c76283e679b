"""Deterministic virtual-time interpreter that runs test workloads under injection plans."""

import asyncio
import logging
from collections import Counter
from collections.abc import Iterator, Mapping
from typing import Optional

import numpy as np

from app.expressions import Value, evaluate
from app.fault_service import injectable_kinds
from app.models import (
    DetectorDecl,
    FaultEvent,
    FaultKind,
    FaultPoint,
    Handler,
    InjectionMode,
    InjectionPlan,
    LoopRecord,
    NoiseModel,
    RunTrace,
    Scenario,
    Statement,
    StatementKind,
    StitchContext,
    TestWorkload,
)
from app.scenario_parser import walk

logger = logging.getLogger(__name__)

REPETITIONS = 5
DEFAULT_TIMEOUT_RANGE = (10_000, 20_000)
DEFAULT_MAX_STEPS = 2_000_000
TIMEOUT_EXCEPTION = "TimeoutException"

_MODE_FOR_KIND = {
    FaultKind.EXCEPTION: InjectionMode.ONE_SHOT_EXCEPTION,
    FaultKind.DELAY: InjectionMode.DELAY,
    FaultKind.NEGATION: InjectionMode.NEGATE,
}

ContextKey = tuple[tuple[str, ...], tuple[tuple[str, bool], ...]]


class ReachabilityError(ValueError):
    def __init__(self, test: str):
        super().__init__(f"no profile trace for test {test!r}")
        self.test = test


class SimException(Exception):
    """An exception travelling through the simulated system."""

    def __init__(self, fault_id: str, exception_class: str):
        super().__init__(f"{exception_class} from {fault_id}")
        self.fault_id = fault_id
        self.exception_class = exception_class


class _RunStopped(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def plan_for(fault: FaultPoint, delay_value: Optional[int] = None) -> InjectionPlan:
    """The injection plan that matches a fault's kind."""
    mode = _MODE_FOR_KIND[fault.kind]
    return InjectionPlan(target=fault.id, mode=mode, delay_value=delay_value if mode == InjectionMode.DELAY else None)


def effective_config(
    scenario: Scenario, test: TestWorkload, timeouts: Optional[tuple[int, int]] = DEFAULT_TIMEOUT_RANGE
) -> dict[str, int | bool]:
    """Scenario config with test overrides applied and timeouts clamped into the reduced range."""
    config = {**scenario.config, **test.config_overrides}
    if timeouts is not None:
        low, high = timeouts
        for key, value in config.items():
            if "timeout" in key and not isinstance(value, bool):
                config[key] = min(max(value, low), high)
    return config


def noise_for(scenario: Scenario, seed: int) -> NoiseModel:
    """Noise model with the jitter bounds declared in the scenario."""
    jitter = {
        statement.id: statement.jitter
        for component in scenario.components
        for handler in component.handlers
        for statement in walk(handler.body)
        if statement.kind == StatementKind.LOOP and statement.jitter > 0
    }
    scheduling = scenario.config.get("scheduling_jitter", 0)
    return NoiseModel(seed=seed, iteration_jitter=jitter, scheduling_jitter=int(scheduling))


class _Frame:
    __slots__ = ("component", "handler", "locals", "call_site", "parent")

    def __init__(self, component: str, handler: str, locals_: dict[str, Value], call_site: Optional[str], parent):
        self.component = component
        self.handler = handler
        self.locals = locals_
        self.call_site = call_site
        self.parent: Optional[_Frame] = parent

    @property
    def qualified(self) -> str:
        return f"{self.component}.{self.handler}"


class _Env(Mapping[str, Value]):
    def __init__(self, interpreter: "Interpreter", locals_: dict[str, Value]):
        self.interpreter = interpreter
        self.locals = locals_

    def __getitem__(self, name: str) -> Value:
        if name in self.locals:
            return self.locals[name]
        if name in self.interpreter.state:
            return self.interpreter.state[name]
        if name in self.interpreter.config:
            return self.interpreter.config[name]
        if name == "now":
            return self.interpreter.clock
        raise KeyError(name)

    def __iter__(self) -> Iterator[str]:
        yield from {**self.interpreter.config, **self.interpreter.state, **self.locals, "now": 0}

    def __len__(self) -> int:
        return len(set(self.locals) | set(self.interpreter.state) | set(self.interpreter.config) | {"now"})


class Interpreter:
    """Executes one test workload; a single instance is used for a single run."""

    def __init__(
        self,
        scenario: Scenario,
        test: TestWorkload,
        plan: InjectionPlan,
        noise: NoiseModel,
        timeouts: Optional[tuple[int, int]] = DEFAULT_TIMEOUT_RANGE,
    ):
        self.scenario = scenario
        self.test = test
        self.plan = plan
        self.noise = noise
        self.rng = np.random.default_rng(noise.seed)
        self.config = effective_config(scenario, test, timeouts)
        self.state: dict[str, Value] = {}
        self.clock = 0
        self.steps = 0
        self.max_steps = int(self.config.get("max_steps", DEFAULT_MAX_STEPS))
        self.handlers: dict[tuple[str, str], Handler] = {
            (component.name, handler.name): handler for component in scenario.components for handler in component.handlers
        }
        self.detectors: dict[tuple[str, str], DetectorDecl] = {
            (component.name, detector.id): detector
            for component in scenario.components
            for detector in component.detectors
        }
        self.coverage: set[str] = set()
        self.hits: Counter[str] = Counter()
        self.events: list[tuple[str, ContextKey, int]] = []
        self.loop_counts: dict[str, int] = {}
        self.loop_contexts: dict[str, dict[ContextKey, None]] = {}
        self.scopes: list[list[tuple[str, bool]]] = []
        self.frame: Optional[_Frame] = None
        self.fired = False
        self.reached = plan.target is None
        self.aborted = False
        self.deadline_reached = False

    def run(self) -> RunTrace:
        globals_env = _Env(self, {})
        for var, expr in self.scenario.state.items():
            self.state[var] = evaluate(expr, globals_env)
        try:
            for request in self.test.requests:
                args = {param: evaluate(expr, globals_env) for param, expr in request.params.items()}
                try:
                    self._invoke(request.component, request.handler, args, None)
                except SimException as exc:
                    logger.debug(f"{self.test.name}: request {request.component}.{request.handler} failed with {exc}")
                    self.aborted = True
                    break
        except _RunStopped as stop:
            logger.debug(f"{self.test.name}: run stopped ({stop.reason}) at {self.clock} ms")
            self.deadline_reached = True
        return self._trace()

    # bookkeeping

    def _tick(self) -> None:
        self.steps += 1
        if self.steps > self.max_steps:
            raise _RunStopped("step cap")
        if self.clock > self.test.duration:
            raise _RunStopped("deadline")

    def _advance(self, amount: int) -> None:
        self.clock += max(0, int(amount))

    def _env(self) -> _Env:
        return _Env(self, self.frame.locals if self.frame is not None else {})

    def _eval(self, source: str) -> Value:
        return evaluate(source, self._env())

    def _stack(self) -> tuple[str, ...]:
        frames: list[str] = []
        frame = self.frame
        while frame is not None and len(frames) < 2:
            if frame.call_site is not None:
                frames.append(frame.call_site)
            frame = frame.parent
        return tuple(frames)

    def _context(self) -> ContextKey:
        return self._stack(), tuple(self.scopes[-1]) if self.scopes else ()

    def _branch(self, branch: str, outcome: bool) -> None:
        if self.scopes:
            self.scopes[-1].append((branch, outcome))

    def _record(self, fault: str, context: ContextKey) -> None:
        self.events.append((fault, context, self.clock))

    def _raise(self, fault: str, exception_class: str, context: ContextKey):
        self._record(fault, context)
        raise SimException(fault, exception_class)

    def _inject_once(self, fault: str) -> bool:
        if self.plan.mode == InjectionMode.ONE_SHOT_EXCEPTION and self.plan.target == fault and not self.fired:
            self.fired = True
            self.reached = True
            return True
        return False

    # execution

    def _invoke(self, component: str, handler_name: str, args: dict[str, Value], call_site: Optional[str]) -> None:
        handler = self.handlers[(component, handler_name)]
        locals_: dict[str, Value] = {param: 0 for param in handler.params}
        locals_.update(args)
        frame = _Frame(component, handler_name, locals_, call_site, self.frame)
        self.frame = frame
        self.scopes.append([])
        try:
            self._block(handler.body)
        finally:
            self.scopes.pop()
            self.frame = frame.parent

    def _block(self, statements: list[Statement]) -> None:
        for statement in statements:
            self._exec(statement)

    def _exec(self, statement: Statement) -> None:
        self._tick()
        self.coverage.add(statement.id)
        match statement.kind:
            case StatementKind.WORK:
                self._advance(int(self._eval(statement.expr or "0")) + self._scheduling_jitter())
            case StatementKind.SLEEP:
                self._advance(int(self._eval(statement.expr or "0")))
            case StatementKind.SET:
                self._assign(statement.var or "", self._eval(statement.expr or "0"))
            case StatementKind.IF:
                outcome = bool(self._eval(statement.expr or "false"))
                self._branch(statement.id, outcome)
                self._block(statement.body if outcome else statement.orelse)
            case StatementKind.LOOP:
                self._loop(statement)
            case StatementKind.CALL:
                assert self.frame is not None
                args = {param: self._eval(expr) for param, expr in statement.args.items()}
                self._invoke(self.frame.component, statement.target or "", args, f"{self.frame.qualified}@{statement.id}")
            case StatementKind.THROW:
                self._throw(statement)
            case StatementKind.LIB:
                self._lib(statement)
            case StatementKind.CHECK:
                self._check(statement)
            case StatementKind.SEND:
                self._send(statement)
            case StatementKind.RETRY:
                self._retry(statement)
            case StatementKind.TRY:
                self._try(statement)

    def _scheduling_jitter(self) -> int:
        if self.noise.scheduling_jitter <= 0:
            return 0
        return int(self.rng.integers(0, self.noise.scheduling_jitter + 1))

    def _assign(self, var: str, value: Value) -> None:
        if var in self.state:
            self.state[var] = value
        elif self.frame is not None:
            self.frame.locals[var] = value

    def _loop(self, statement: Statement) -> None:
        assert self.frame is not None
        bound = int(self._eval(statement.expr or "0"))
        jitter = self.noise.iteration_jitter.get(statement.id, 0)
        if jitter > 0:
            bound += int(self.rng.integers(-jitter, jitter + 1))
        self.hits[statement.id] += 1
        self.loop_counts.setdefault(statement.id, 0)
        contexts = self.loop_contexts.setdefault(statement.id, {})
        delayed = self.plan.mode == InjectionMode.DELAY and self.plan.target == statement.id
        if delayed:
            self.reached = True
        for index in range(max(0, bound)):
            self._tick()
            self.loop_counts[statement.id] += 1
            if statement.var is not None:
                self.frame.locals[statement.var] = index
            scope: list[tuple[str, bool]] = []
            self.scopes.append(scope)
            try:
                if delayed:
                    self._advance(self.plan.delay_value or 0)
                self._block(statement.body)
            finally:
                self.scopes.pop()
                contexts.setdefault((self._stack(), tuple(scope)), None)

    def _throw(self, statement: Statement) -> None:
        self.hits[statement.id] += 1
        context = self._context()
        if self._inject_once(statement.id):
            self._branch(statement.id, True)
            self._raise(statement.id, statement.exception or "Exception", context)
        outcome = bool(self._eval(statement.expr or "false"))
        self._branch(statement.id, outcome)
        if outcome:
            self._raise(statement.id, statement.exception or "Exception", context)

    def _lib(self, statement: Statement) -> None:
        self.hits[statement.id] += 1
        context = self._context()
        if self._inject_once(statement.id):
            self._raise(statement.id, statement.exception or "Exception", context)
        if statement.cost is not None:
            self._advance(int(self._eval(statement.cost)))
        if statement.fails_when is not None and self._eval(statement.fails_when):
            self._raise(statement.id, statement.exception or "Exception", context)

    def _check(self, statement: Statement) -> None:
        assert self.frame is not None
        detector = self.detectors[(self.frame.component, statement.target or "")]
        self.coverage.add(detector.id)
        self.hits[detector.id] += 1
        value = bool(evaluate(detector.expr, _Env(self, {})))
        if self.plan.mode == InjectionMode.NEGATE and self.plan.target == detector.id:
            value = not value
            self.reached = True
        if value == detector.fault_on:
            self._record(detector.id, self._context())
        self.frame.locals[statement.var or "_"] = value

    def _send(self, statement: Statement) -> None:
        assert self.frame is not None
        component, _, handler = (statement.target or "").partition(".")
        if statement.raises is not None:
            self.coverage.add(statement.raises)
            self.hits[statement.raises] += 1
        args = {param: self._eval(expr) for param, expr in statement.args.items()}
        started = self.clock
        if statement.size is not None:
            self._advance(int(self._eval(statement.size)) * int(self.config.get("transfer_ms_per_unit", 0)))
        self._invoke(component, handler, args, f"{self.frame.qualified}@{statement.id}")
        if statement.raises is None:
            return
        context = self._context()
        if self._inject_once(statement.raises):
            self._raise(statement.raises, TIMEOUT_EXCEPTION, context)
        if self.clock - started > int(self._eval(statement.timeout or "0")):
            self._raise(statement.raises, TIMEOUT_EXCEPTION, context)

    def _retry(self, statement: Statement) -> None:
        attempts = None if statement.attempts is None else int(self._eval(statement.attempts))
        backoff = int(self._eval(statement.backoff)) if statement.backoff is not None else 0
        attempt = 0
        while True:
            attempt += 1
            try:
                self._block(statement.body)
                return
            except SimException as exc:
                if statement.on and exc.exception_class not in statement.on:
                    raise
                if attempts is not None and attempt >= attempts:
                    raise
            self._advance(backoff)
            self._tick()

    def _try(self, statement: Statement) -> None:
        try:
            self._block(statement.body)
        except SimException as exc:
            for clause in statement.catches:
                if "*" in clause.classes or exc.exception_class in clause.classes:
                    break
            else:
                raise
            self._block(clause.body)

    def _trace(self) -> RunTrace:
        plan = self.plan
        return RunTrace(
            run_id=f"{self.test.name}/{plan.target or 'profile'}/{plan.label}/{self.noise.seed}",
            test=self.test.name,
            plan=plan,
            seed=self.noise.seed,
            fault_events=[
                FaultEvent(fault_id=fault, context=_context_model(context), time=time)
                for fault, context, time in self.events
            ],
            loops={
                loop: LoopRecord(
                    count=self.loop_counts[loop], contexts=[_context_model(key) for key in self.loop_contexts[loop]]
                )
                for loop in sorted(self.loop_counts)
            },
            hits=dict(sorted(self.hits.items())),
            coverage=sorted(self.coverage),
            wall=self.clock,
            target_not_reached=not self.reached,
            aborted=self.aborted,
            deadline_reached=self.deadline_reached,
        )


def _context_model(key: ContextKey) -> StitchContext:
    stack, branches = key
    return StitchContext(stack=list(stack), branches=[(branch, outcome) for branch, outcome in branches])


def execute(
    scenario: Scenario,
    test: TestWorkload,
    plan: InjectionPlan,
    noise: NoiseModel,
    timeouts: Optional[tuple[int, int]] = DEFAULT_TIMEOUT_RANGE,
) -> RunTrace:
    """Run one test workload under an injection plan and return its trace."""
    if scenario.test(test.name) is None:
        raise ValueError(f"test {test.name!r} is not part of scenario {scenario.name!r}")
    if plan.target is not None:
        kind = injectable_kinds(scenario).get(plan.target)
        if kind is None:
            raise ValueError(f"injection target {plan.target!r} is not part of scenario {scenario.name!r}")
        if _MODE_FOR_KIND[kind] != plan.mode:
            raise ValueError(f"mode {plan.mode.value} does not fit {kind.value} fault {plan.target!r}")
    trace = Interpreter(scenario, test, plan, noise, timeouts).run()
    if trace.target_not_reached:
        logger.debug(f"{test.name}: injection target {plan.target} not reached")
    return trace


def run_repeated(
    scenario: Scenario,
    test: TestWorkload,
    plan: InjectionPlan,
    base_seed: int,
    repetitions: int = REPETITIONS,
    timeouts: Optional[tuple[int, int]] = DEFAULT_TIMEOUT_RANGE,
) -> list[RunTrace]:
    """Run a plan `repetitions` times with seeds base_seed, base_seed + 1, ..."""
    return [
        execute(scenario, test, plan, noise_for(scenario, base_seed + offset), timeouts) for offset in range(repetitions)
    ]


async def run_batch_async(
    scenario: Scenario,
    jobs: list[tuple[str, InjectionPlan]],
    base_seed: int,
    workers: int,
    repetitions: int = REPETITIONS,
    timeouts: Optional[tuple[int, int]] = DEFAULT_TIMEOUT_RANGE,
) -> list[list[RunTrace]]:
    """Run (test, plan) jobs on a bounded worker pool; results keep the job order."""
    semaphore = asyncio.Semaphore(workers)

    async def run(test_name: str, plan: InjectionPlan) -> list[RunTrace]:
        test = scenario.test(test_name)
        if test is None:
            raise ValueError(f"unknown test {test_name!r}")
        async with semaphore:
            return await asyncio.to_thread(run_repeated, scenario, test, plan, base_seed, repetitions, timeouts)

    return list(await asyncio.gather(*(run(test_name, plan) for test_name, plan in jobs)))


def run_batch(
    scenario: Scenario,
    jobs: list[tuple[str, InjectionPlan]],
    base_seed: int,
    workers: int = 1,
    repetitions: int = REPETITIONS,
    timeouts: Optional[tuple[int, int]] = DEFAULT_TIMEOUT_RANGE,
) -> list[list[RunTrace]]:
    if workers <= 1:
        results = []
        for test_name, plan in jobs:
            test = scenario.test(test_name)
            if test is None:
                raise ValueError(f"unknown test {test_name!r}")
            results.append(run_repeated(scenario, test, plan, base_seed, repetitions, timeouts))
        return results
    return asyncio.run(run_batch_async(scenario, jobs, base_seed, workers, repetitions, timeouts))


def coverage_by_test(traces: list[RunTrace]) -> dict[str, list[str]]:
    """Union of covered statement ids per test over its profile traces."""
    coverage: dict[str, set[str]] = {}
    for trace in traces:
        coverage.setdefault(trace.test, set()).update(trace.coverage)
    return {test: sorted(ids) for test, ids in sorted(coverage.items())}


def build_reachability(
    scenario: Scenario, traces: list[RunTrace], faults: list[FaultPoint]
) -> dict[str, list[str]]:
    """Map each fault to the tests whose profile coverage contains it."""
    coverage = coverage_by_test([trace for trace in traces if trace.plan.target is None])
    for test in scenario.tests:
        if test.name not in coverage:
            raise ReachabilityError(test.name)
    covered = {test: set(ids) for test, ids in coverage.items()}
    return {
        fault.id: [test.name for test in scenario.tests if fault.id in covered[test.name]]
        for fault in faults
    }
