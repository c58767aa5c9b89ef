import pytest

from ruinmix import hazard, tuning

# (criterion number, PASS/FAIL, detail) rows filled in by test_acceptance.py
ACCEPTANCE_LINES: list[tuple[int, str, str]] = []


@pytest.fixture(scope="session")
def mg1():
    return hazard.MG1Pareto()


@pytest.fixture(scope="session")
def weibull():
    return hazard.WeibullType()


@pytest.fixture(scope="session")
def mg1_params(mg1):
    return tuning.select_variance_params(mg1)


@pytest.fixture(scope="session")
def weibull_params(weibull):
    return tuning.select_variance_params(weibull)


@pytest.fixture(scope="session")
def mg1_override_params(mg1):
    return tuning.select_variance_params(mg1, user_overrides={"cutoff_override": [("frac", 0.9)]})


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, verdict, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {num:>2}: {verdict}  {detail}")
