import pytest

from helpers import make_credentials

# lines appended by test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def creds_pqc(tmp_path_factory):
    return make_credentials(tmp_path_factory.mktemp("creds-pqc"), "pqc", subjects=("nrf", "amf"))


@pytest.fixture(scope="session")
def creds_classical(tmp_path_factory):
    return make_credentials(tmp_path_factory.mktemp("creds-classical"), "classical", subjects=("nrf", "amf"))


@pytest.fixture(scope="session")
def creds(creds_pqc, creds_classical):
    return {"pqc": creds_pqc, "classical": creds_classical}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
