"""Tests for the scenario file parser and validator."""

import pytest

from app.models import StatementKind
from app.scenario_parser import (
    ScenarioReferenceError,
    ScenarioSyntaxError,
    parse_scenario,
    walk,
)

BASE = """cascadelab-scenario v1
scenario demo

config
  limit = 3

component app
  handler run(count)
    loop work-loop count
      work 1

test t1
  request app.run count=limit
"""

BUNDLED = [
    "region-retry",
    "ibr-retry",
    "shard-redistribution",
    "self-loop",
    "caller-split",
    "caller-joined",
    "nested-batch",
    "injection-points",
    "quiet",
    "minimal",
]


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scenarios_parse(bundled, name):
    """Test that every shipped scenario parses and validates."""
    scenario = bundled(name)
    assert scenario.name == name


def test_minimal_scenario_has_no_tests(bundled):
    """Test the smallest valid scenario."""
    scenario = bundled("minimal")
    assert len(scenario.components) == 1
    assert len(scenario.components[0].handlers) == 1
    assert scenario.tests == []


def test_region_retry_structure(bundled):
    """Test the parsed structure of the region assignment scenario."""
    scenario = bundled("region-retry")
    assert [test.name for test in scenario.tests] == ["t1", "t2", "t3"]
    assert scenario.expected_cycles == [["deploy-loop", "assign-ioe", "can-place-favored"]]

    master = scenario.component("master")
    assert master is not None
    assert [detector.id for detector in master.detectors] == ["can-place-favored"]

    kinds = {
        statement.kind
        for component in scenario.components
        for handler in component.handlers
        for statement in walk(handler.body)
    }
    assert StatementKind.LOOP in kinds
    assert StatementKind.THROW in kinds
    assert StatementKind.SEND in kinds

    t1 = scenario.test("t1")
    assert t1 is not None
    assert t1.config_overrides == {"regions": 20}
    assert t1.requests[0].params == {"count": "regions"}
    assert scenario.state == {"live_servers": "servers"}


def test_send_options(bundled):
    """Test that send timeout, raised fault and arguments are separated."""
    scenario = bundled("region-retry")
    master = scenario.component("master")
    assert master is not None
    handler = master.handler("assign_regions")
    assert handler is not None
    send = next(statement for statement in walk(handler.body) if statement.kind == StatementKind.SEND)
    assert send.id == "send-assign"
    assert send.target == "rs.assign"
    assert send.timeout == "rpc_timeout"
    assert send.raises == "assign-timeout"
    assert send.args == {"regions": "pending"}


def test_auto_ids_name_handler_and_line(bundled):
    """Test generated ids for statements without an explicit id."""
    scenario = bundled("self-loop")
    worker = scenario.component("worker")
    assert worker is not None
    handler = worker.handler("process")
    assert handler is not None
    retry = handler.body[0]
    assert retry.kind == StatementKind.RETRY
    assert retry.id == f"worker.process:{retry.line}"
    assert retry.attempts == "3"
    assert retry.on == ["TimeoutException"]


def test_walk_is_pre_order(bundled):
    """Test statement traversal order over nested loops."""
    scenario = bundled("nested-batch")
    handler = scenario.components[0].handlers[0]
    loops = [statement.id for statement in walk(handler.body) if statement.kind == StatementKind.LOOP]
    assert loops == ["l1", "l2", "l3", "drain-loop"]


def test_detector_flags():
    """Test detector filter attributes and the fault-on value."""
    source = BASE.replace(
        "component app\n",
        "component app\n  detector ok final-only-inputs fault-on=true returns limit > 0\n",
    )
    scenario = parse_scenario(source)
    detector = scenario.components[0].detectors[0]
    assert detector.final_only_inputs
    assert detector.fault_on
    assert not detector.jdk_utility


def test_missing_header():
    """Test that the version header is required."""
    with pytest.raises(ScenarioSyntaxError) as exc:
        parse_scenario("scenario demo\n")
    assert exc.value.line == 1


def test_unknown_statement_reports_line():
    """Test syntax errors carry the offending line."""
    with pytest.raises(ScenarioSyntaxError) as exc:
        parse_scenario(BASE.replace("work 1", "frobnicate 1"))
    assert exc.value.line == 10
    assert "frobnicate" in str(exc.value)


def test_tab_indentation_rejected():
    """Test that tabs are refused."""
    with pytest.raises(ScenarioSyntaxError) as exc:
        parse_scenario(BASE.replace("      work 1", "\twork 1"))
    assert exc.value.line == 10


def test_unknown_loop_option_reports_column():
    """Test syntax errors carry the column of the offending token."""
    with pytest.raises(ScenarioSyntaxError) as exc:
        parse_scenario(BASE.replace("loop work-loop count", "loop work-loop count fast"))
    assert exc.value.line == 9
    assert exc.value.column == 26


def test_loop_bound_may_contain_spaces():
    """Test that the whole bound expression up to the first option is kept."""
    scenario = parse_scenario(BASE.replace("loop work-loop count", "loop work-loop count - 1 jitter=1 io as i"))
    loop = scenario.components[0].handlers[0].body[0]
    assert loop.expr == "count - 1"
    assert loop.jitter == 1
    assert loop.io
    assert loop.var == "i"

    scenario = parse_scenario(BASE.replace("loop work-loop count", "loop work-loop (count + 1) // 2"))
    assert scenario.components[0].handlers[0].body[0].expr == "(count + 1) // 2"


def test_else_without_if():
    """Test that a dangling else is a syntax error."""
    with pytest.raises(ScenarioSyntaxError):
        parse_scenario(BASE.replace("      work 1", "      work 1\n    else\n      work 2"))


def test_send_timeout_needs_raised_fault():
    """Test that a send timeout without a fault id is refused."""
    source = BASE.replace("      work 1", "      send s1 app.run timeout=10 count=1")
    with pytest.raises(ScenarioSyntaxError):
        parse_scenario(source)


def test_duplicate_statement_id():
    """Test that statement ids are unique scenario-wide."""
    source = BASE.replace("      work 1", "      if work-loop count > 1\n        work 1")
    with pytest.raises(ScenarioReferenceError) as exc:
        parse_scenario(source)
    assert exc.value.identifier == "work-loop"


def test_unknown_name_in_expression():
    """Test that expressions only use declared names."""
    with pytest.raises(ScenarioReferenceError) as exc:
        parse_scenario(BASE.replace("work 1", "work speed"))
    assert exc.value.identifier == "speed"


def test_undeclared_detector():
    """Test that a check must name a detector of its component."""
    with pytest.raises(ScenarioReferenceError) as exc:
        parse_scenario(BASE.replace("      work 1", "      check healthy -> ok"))
    assert exc.value.identifier == "healthy"


def test_override_of_undeclared_config_key():
    """Test that tests only override declared config keys."""
    source = BASE.replace("test t1\n", "test t1\n  set speed = 2\n")
    with pytest.raises(ScenarioReferenceError) as exc:
        parse_scenario(source)
    assert exc.value.identifier == "speed"


def test_request_with_undeclared_field():
    """Test that request parameters match the handler signature."""
    with pytest.raises(ScenarioReferenceError) as exc:
        parse_scenario(BASE.replace("count=limit", "count=limit size=2"))
    assert exc.value.identifier == "size"


def test_expected_cycle_names_known_faults():
    """Test that expected cycles reference existing faults."""
    source = BASE.replace("scenario demo\n", "scenario demo\nexpect cycle nowhere\n")
    with pytest.raises(ScenarioReferenceError) as exc:
        parse_scenario(source)
    assert exc.value.identifier == "nowhere"


def test_duplicate_test_names():
    """Test that test names are unique."""
    source = BASE + "\ntest t1\n  request app.run count=1\n"
    with pytest.raises(ScenarioReferenceError):
        parse_scenario(source)
