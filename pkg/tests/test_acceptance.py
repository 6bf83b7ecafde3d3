"""The nine acceptance criteria at their stated tolerances.

Each test prints one ``[PASS]``/``[FAIL]`` line with the measured value, so
the outcome of the suite is readable directly from the pytest log.
"""
import pytest

from slowhomog import acceptance
from slowhomog.config import load_defaults

CONFIG = load_defaults()


@pytest.mark.parametrize("criterion", acceptance.CRITERIA, ids=[f"{i}-{c.__name__}" for i, c in enumerate(acceptance.CRITERIA, 1)])
def test_criterion(criterion, capsys):
    result = criterion(CONFIG)
    with capsys.disabled():
        print(f"\n{result.line()} ({result.seconds:.1f} s)")
    assert result.passed, result.line()
