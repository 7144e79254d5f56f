import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from attn3d.data import generate_synthetic_dataset  # noqa: E402
from attn3d.tensor import Rng  # noqa: E402


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """K=4 translations, 10 groups, 20 frames of 16x16: enough for quick training smoke runs."""
    out = tmp_path_factory.mktemp("small_data")
    return generate_synthetic_dataset(out, classes=4, clips_per_class=10, frames=20, size=16, rng=Rng(3))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
