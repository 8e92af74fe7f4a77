import pytest

from texlet.corpus import make_asset


@pytest.fixture(scope="session")
def toy_mesh():
    from texlet.pipeline import open_mesh

    return open_mesh("toy")


@pytest.fixture(scope="session")
def smooth_ico4():
    return make_asset("icosphere", 512, level=4)


def pytest_terminal_summary(terminalreporter):
    import acceptance_report

    if acceptance_report.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_report.lines():
            terminalreporter.write_line(line)
