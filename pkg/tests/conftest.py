from __future__ import annotations

import numpy as np
import pytest

from focalvsr.fixtures import texture, translating_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    # 8 frames, 120x216, 4 px/frame pan, near half at 30 and far half at 220
    return translating_scene(8, 120, 216, shift=(4, 0))


@pytest.fixture(scope="session")
def tex():
    return texture(np.random.default_rng(7), 96, 160)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in results:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    passed = sum(ok for _, ok, _ in results)
    terminalreporter.write_line(f"{passed}/{len(results)} criteria passed")
