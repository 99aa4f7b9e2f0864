import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import degraded_clip, write_clip  # noqa: E402

from bvqi.pipeline import Scorer, ScorerConfig  # noqa: E402
from bvqi.vlm import ClipAdapter, ClipConfig  # noqa: E402

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def adapter():
    return ClipAdapter.random(ClipConfig.tiny(), seed=0)


@pytest.fixture(scope="session")
def clip_dir(tmp_path_factory):
    """Six short lossless clips with increasing degradation."""
    root = tmp_path_factory.mktemp("clips")
    return [write_clip(root / f"clip{k}", degraded_clip(k, seed=k, frames=10), fps=8.0) for k in range(6)]


@pytest.fixture(scope="session")
def scorer(adapter, tmp_path_factory):
    cache = tmp_path_factory.mktemp("cache")
    return Scorer(ScorerConfig(cache_dir=str(cache)), adapter=adapter)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance summary: one line per criterion ------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        prev = _CRITERIA.get(number, ("SKIP", title))[0]
        # any failure fails the criterion; otherwise one passing check passes it
        rank = {"SKIP": 0, "PASS": 1, "FAIL": 2}
        _CRITERIA[number] = (max(prev, status, key=rank.get), title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title}")
