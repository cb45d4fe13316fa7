"""Acceptance suite: one check per criterion, each at its stated tolerance.

Every check prints a single PASS or FAIL line. The lines are also collected
and repeated in a summary section at the end of the pytest run.
"""

import pytest

from ebmforge.verify import CHECKS, QUICK, VerifyContext, run_checks

from .conftest import ACCEPTANCE_LINES


@pytest.fixture(scope="module")
def ctx(tmp_path_factory):
    # the training checks share their runs through this context
    return VerifyContext(str(tmp_path_factory.mktemp("acceptance")))


@pytest.mark.parametrize("name", [pytest.param(n, marks=() if n in QUICK else pytest.mark.slow) for n in CHECKS])
def test_criterion(name, ctx):
    (res,) = run_checks([name], ctx, echo=None)
    print(res.line())
    ACCEPTANCE_LINES.append(res.line())
    assert res.passed, res.line()
