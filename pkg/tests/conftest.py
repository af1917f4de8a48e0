import json
from pathlib import Path

import pytest

from swarmadapt.config import ScenarioConfig, TargetConfig

FIXTURES = Path(__file__).parent / "fixtures"


def small_config(n=2, **kw) -> ScenarioConfig:
    return ScenarioConfig(scenario_id="custom", n_aircraft=n,
                          target=TargetConfig(n_slots=n), **kw)


@pytest.fixture
def cyber_record():
    return json.loads((FIXTURES / "cyber_defense_record.json").read_text("utf-8"))


# telemetry keys of the retrieval feature vector and their normalisation range
FEATURE_RANGES = {
    "s_overall_mean": (0.0, 100.0),
    "s_overall_slope": (-1.0, 1.0),
    "e_radius": (0.0, 500.0),
    "sigma_height": (0.0, 100.0),
    "infected_report_rate": (0.0, 1.0),
    "wind_magnitude": (0.0, 2.0),
    "rain_drag": (0.0, 0.2),
    "e_radius_slot": (0.0, 1000.0),
}


def telemetry_from_unit(u) -> dict:
    """Telemetry whose normalised features are ``u`` (8 values in [0, 1])."""
    return {k: lo + float(x) * (hi - lo) for (k, (lo, hi)), x in zip(FEATURE_RANGES.items(), u)}


def record_with(template: dict, telemetry: dict, primitive="FormationControl") -> dict:
    """Copy of ``template`` describing an episode of ``primitive`` in ``telemetry``."""
    rec = json.loads(json.dumps(template))
    rec["logical_primitive"] = ("L1: " if primitive == "FormationControl" else "L2: ") + primitive
    rec["environmental_context"] = dict(telemetry)
    return rec


# ------------------------------------------------------------ acceptance log

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def report_criterion(number: int, passed: bool, detail: str) -> None:
    """Record (and print) the verdict of one acceptance criterion."""
    ACCEPTANCE[number] = (passed, detail)
    print(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number:>2}: {'PASS' if passed else 'FAIL'} - {detail}")
