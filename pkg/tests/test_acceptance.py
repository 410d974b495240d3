"""Acceptance gate: every criterion at its full size and stated tolerance."""

import pytest

from nodalmc.acceptance import CRITERIA, _Suite, run_criterion

LINES: list[str] = []


@pytest.fixture(scope="module")
def suite():
    return _Suite(threads=1)


@pytest.mark.slow
@pytest.mark.parametrize("number", sorted(CRITERIA), ids=lambda n: f"criterion_{n:02d}")
def test_criterion(number, suite):
    res = run_criterion(number, suite)
    LINES.append(res.line())
    print(res.line())
    assert res.passed, res.line()
