from collections.abc import Callable, Generator
from pathlib import Path

import pytest

from app.models import Scenario
from app.scenario_parser import load_scenario

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture()
def bundled() -> Callable[[str], Scenario]:
    """Loader for the scenario files shipped in scenarios/."""

    def load(name: str) -> Scenario:
        return load_scenario(SCENARIOS / f"{name}.scn")

    return load


@pytest.fixture()
def new_db(tmp_path: Path) -> Generator[str, None, None]:
    from app.database import reset_db

    url = f"sqlite:///{tmp_path / 'ledger.db'}"
    reset_db(url)
    yield url
    reset_db(url)
