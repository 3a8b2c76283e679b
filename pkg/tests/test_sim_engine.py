"""Tests for the virtual-time interpreter."""

import pytest

from app.fault_service import enumerate_fault_points
from app.models import InjectionMode, InjectionPlan, NoiseModel, RunTrace
from app.scenario_parser import parse_scenario
from app.sim_engine import (
    ReachabilityError,
    build_reachability,
    coverage_by_test,
    effective_config,
    execute,
    noise_for,
    plan_for,
    run_batch,
    run_batch_async,
    run_repeated,
)

JITTERY = """cascadelab-scenario v1
scenario jittery

config
  count = 10

component app
  handler spin
    loop spin-loop count jitter=2
      work 1

test t1
  request app.spin
"""

SHORT = """cascadelab-scenario v1
scenario short

component app
  handler spin
    loop spin-loop 100
      work 1

test t1 duration=50
  request app.spin
"""


def behaviour(trace: RunTrace) -> dict:
    return trace.model_dump(exclude={"run_id", "seed"})


def test_quiet_profile_run(bundled):
    """Test a profile run of a scenario without fault points."""
    scenario = bundled("quiet")
    trace = execute(scenario, scenario.tests[0], InjectionPlan(), NoiseModel())
    assert trace.fault_events == []
    assert trace.loop_count("spin") == 3
    assert trace.wall == 6
    assert not trace.aborted
    assert not trace.target_not_reached


def test_one_shot_exception_at_guarded_throw(bundled):
    """Test that a one-shot injection throws exactly once."""
    scenario = bundled("injection-points")
    plan = InjectionPlan(target="no-space", mode=InjectionMode.ONE_SHOT_EXCEPTION)
    trace = execute(scenario, scenario.tests[0], plan, NoiseModel())
    assert trace.event_count("no-space") == 1
    assert trace.aborted


def test_delay_makes_send_time_out(bundled):
    """Test delay x iterations exceeding the RPC timeout on every retry attempt."""
    scenario = bundled("self-loop")
    test = scenario.tests[0]
    profile = execute(scenario, test, InjectionPlan(), NoiseModel())
    assert profile.loop_count("fetch-loop") == 10
    assert profile.wall == 1000
    assert profile.event_count("fetch-timeout") == 0

    # 10 iterations x (100 + 1000) ms > 10000 ms timeout, three attempts
    plan = InjectionPlan(target="fetch-loop", mode=InjectionMode.DELAY, delay_value=1000)
    trace = execute(scenario, test, plan, NoiseModel())
    assert trace.event_count("fetch-timeout") == 3
    assert trace.loop_count("fetch-loop") == 30
    assert trace.aborted

    small = InjectionPlan(target="fetch-loop", mode=InjectionMode.DELAY, delay_value=100)
    assert execute(scenario, test, small, NoiseModel()).event_count("fetch-timeout") == 0


def test_injected_send_timeout_is_retried(bundled):
    """Test that a one-shot timeout costs one extra round of the callee."""
    scenario = bundled("self-loop")
    plan = InjectionPlan(target="fetch-timeout", mode=InjectionMode.ONE_SHOT_EXCEPTION)
    trace = execute(scenario, scenario.tests[0], plan, NoiseModel())
    assert trace.event_count("fetch-timeout") == 1
    assert trace.loop_count("fetch-loop") == 20
    assert not trace.aborted


def test_negation_fires_on_every_call(bundled):
    """Test detector negation and the blind retry it causes."""
    scenario = bundled("region-retry")
    t3 = scenario.test("t3")
    assert t3 is not None
    profile = execute(scenario, t3, InjectionPlan(), NoiseModel())
    assert profile.loop_count("deploy-loop") == 1
    assert profile.event_count("can-place-favored") == 0

    plan = InjectionPlan(target="can-place-favored", mode=InjectionMode.NEGATE)
    trace = execute(scenario, t3, plan, NoiseModel())
    assert trace.event_count("can-place-favored") == 10
    assert trace.loop_count("deploy-loop") == 10
    assert trace.hits["can-place-favored"] == 10


def test_stitch_context_of_fault_events(bundled):
    """Test call stack and local branch trace recorded with a fault."""
    scenario = bundled("region-retry")
    t2 = scenario.test("t2")
    assert t2 is not None
    plan = InjectionPlan(target="assign-ioe", mode=InjectionMode.ONE_SHOT_EXCEPTION)
    trace = execute(scenario, t2, plan, NoiseModel())

    injected = next(event for event in trace.fault_events if event.fault_id == "assign-ioe")
    assert injected.context.stack == ["master.assign_regions@send-assign"]
    assert injected.context.branches == []

    detector = next(event for event in trace.fault_events if event.fault_id == "can-place-favored")
    assert detector.context.stack == []
    assert detector.context.branches == [("has-work", True), ("use-favored", True)]


def test_loop_contexts_are_per_call_path(bundled):
    """Test that loop iteration contexts carry two caller frames."""
    scenario = bundled("caller-split")
    t2 = scenario.test("t2")
    assert t2 is not None
    plan = InjectionPlan(target="flush-timeout", mode=InjectionMode.ONE_SHOT_EXCEPTION)
    trace = execute(scenario, t2, plan, NoiseModel())
    stacks = [context.stack for context in trace.loops["ingest-loop"].contexts]
    assert stacks == [
        ["client.flush@s-flush", "client.sync_path@c-sync"],
        ["client.flush@s-resend", "client.sync_path@c-sync"],
    ]


def test_target_not_reached(bundled):
    """Test the flag for an injection target the test never executes."""
    scenario = bundled("region-retry")
    t1 = scenario.test("t1")
    assert t1 is not None
    plan = InjectionPlan(target="can-place-favored", mode=InjectionMode.NEGATE)
    trace = execute(scenario, t1, plan, NoiseModel())
    assert trace.target_not_reached
    assert trace.fault_events == []


def test_mode_must_fit_target(bundled):
    """Test that a plan whose mode does not match the target kind is refused."""
    scenario = bundled("region-retry")
    plan = InjectionPlan(target="deploy-loop", mode=InjectionMode.NEGATE)
    with pytest.raises(ValueError):
        execute(scenario, scenario.tests[0], plan, NoiseModel())


def test_unknown_target(bundled):
    """Test that a plan must name an element of the scenario."""
    scenario = bundled("region-retry")
    plan = InjectionPlan(target="nowhere", mode=InjectionMode.ONE_SHOT_EXCEPTION)
    with pytest.raises(ValueError):
        execute(scenario, scenario.tests[0], plan, NoiseModel())


def test_plan_for_matches_kind(bundled):
    """Test plan construction from fault points."""
    faults = {fault.id: fault for fault in enumerate_fault_points(bundled("region-retry"))}
    assert plan_for(faults["deploy-loop"], 250).label == "delay@250"
    assert plan_for(faults["assign-ioe"]).mode == InjectionMode.ONE_SHOT_EXCEPTION
    assert plan_for(faults["can-place-favored"], 250).delay_value is None


def test_deadline_stops_run():
    """Test that a run past its expected duration stops."""
    scenario = parse_scenario(SHORT)
    trace = execute(scenario, scenario.tests[0], InjectionPlan(), NoiseModel())
    assert trace.deadline_reached
    assert trace.loop_count("spin-loop") < 100


def test_zero_jitter_repetitions_are_identical(bundled):
    """Test that noise-free repetitions behave the same."""
    scenario = bundled("region-retry")
    traces = run_repeated(scenario, scenario.tests[0], InjectionPlan(), base_seed=7)
    assert len(traces) == 5
    assert [trace.seed for trace in traces] == [7, 8, 9, 10, 11]
    assert all(behaviour(trace) == behaviour(traces[0]) for trace in traces)
    assert len({trace.run_id for trace in traces}) == 5


def test_loop_jitter_stays_in_bound():
    """Test iteration-count noise against the declared bound."""
    scenario = parse_scenario(JITTERY)
    counts = [trace.loop_count("spin-loop") for trace in run_repeated(scenario, scenario.tests[0], InjectionPlan(), 0, 20)]
    assert all(8 <= count <= 12 for count in counts)
    assert len(set(counts)) > 1
    assert noise_for(scenario, 3).iteration_jitter == {"spin-loop": 2}


def test_seeded_runs_are_reproducible():
    """Test that the same seed gives the same noisy trace."""
    scenario = parse_scenario(JITTERY)
    first = execute(scenario, scenario.tests[0], InjectionPlan(), noise_for(scenario, 5))
    second = execute(scenario, scenario.tests[0], InjectionPlan(), noise_for(scenario, 5))
    assert first == second


def test_timeouts_are_clamped(bundled):
    """Test the reduced timeout range."""
    scenario = bundled("region-retry")
    t1 = scenario.tests[0]
    assert effective_config(scenario, t1)["rpc_timeout"] == 15000
    assert effective_config(scenario, t1, (20000, 30000))["rpc_timeout"] == 20000
    assert effective_config(scenario, t1, (1000, 2000))["rpc_timeout"] == 2000
    assert effective_config(scenario, t1, None)["rpc_timeout"] == 15000
    assert effective_config(scenario, t1)["regions"] == 20


def test_reachability_from_profiles(bundled):
    """Test which tests reach which faults."""
    scenario = bundled("region-retry")
    faults = enumerate_fault_points(scenario)
    traces = [trace for test in scenario.tests for trace in run_repeated(scenario, test, InjectionPlan(), 0)]
    reachability = build_reachability(scenario, traces, faults)
    assert reachability["can-place-favored"] == ["t2", "t3"]
    assert reachability["meta-write"] == ["t1"]
    assert reachability["deploy-loop"] == ["t1", "t2", "t3"]
    assert reachability["assign-timeout"] == ["t1", "t2", "t3"]

    coverage = coverage_by_test(traces)
    assert len(coverage["t1"]) > len(coverage["t2"])
    assert len(coverage["t1"]) > len(coverage["t3"])


def test_reachability_of_uninvoked_handler():
    """Test that a fault in a handler no test invokes reaches nothing."""
    source = JITTERY.replace(
        "test t1\n", "  handler idle\n    throw never-thrown IOException when count > 100\n\ntest t1\n"
    )
    scenario = parse_scenario(source)
    faults = enumerate_fault_points(scenario)
    traces = run_repeated(scenario, scenario.tests[0], InjectionPlan(), 0)
    reachability = build_reachability(scenario, traces, faults)
    assert reachability["never-thrown"] == []
    assert reachability["spin-loop"] == ["t1"]


def test_reachability_needs_every_profile(bundled):
    """Test the error naming a test without profile traces."""
    scenario = bundled("region-retry")
    t1 = scenario.tests[0]
    traces = run_repeated(scenario, t1, InjectionPlan(), 0)
    with pytest.raises(ReachabilityError) as exc:
        build_reachability(scenario, traces, enumerate_fault_points(scenario))
    assert exc.value.test == "t2"


def test_parallel_batch_matches_sequential(bundled):
    """Test that the worker pool keeps job order and results."""
    scenario = bundled("region-retry")
    jobs = [
        ("t1", InjectionPlan()),
        ("t1", InjectionPlan(target="deploy-loop", mode=InjectionMode.DELAY, delay_value=1000)),
        ("t3", InjectionPlan(target="can-place-favored", mode=InjectionMode.NEGATE)),
    ]
    sequential = run_batch(scenario, jobs, 0, workers=1)
    parallel = run_batch(scenario, jobs, 0, workers=3)
    assert sequential == parallel
    assert [runs[0].plan.target for runs in parallel] == [None, "deploy-loop", "can-place-favored"]


async def test_worker_pool_runs_inside_event_loop(bundled):
    """Test the async worker pool directly and an unknown test name."""
    scenario = bundled("self-loop")
    results = await run_batch_async(scenario, [("t1", InjectionPlan()), ("t1", InjectionPlan())], 0, workers=2)
    assert len(results) == 2
    assert results[0] == results[1]
    with pytest.raises(ValueError):
        await run_batch_async(scenario, [("nope", InjectionPlan())], 0, workers=2)
