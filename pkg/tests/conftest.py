import pytest

from hotpatch_sim.flash import FlashDevice, FlashGeometry, FlashTimings


@pytest.fixture
def geometry():
    return FlashGeometry()


@pytest.fixture
def device(geometry):
    return FlashDevice(geometry, FlashTimings())


@pytest.fixture
def small_geometry():
    # 4 sectors of 512 bytes: table 0, code 1-2, recovery 3
    return FlashGeometry(512, 8, 4, (0, 1), (1, 3), 3, 32)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion."""
    def record(name: str, ok: bool, detail: str):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
