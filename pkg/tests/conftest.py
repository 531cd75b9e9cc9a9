from __future__ import annotations

from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]

TINY_CONFIG = """\
# a grid small enough for unit tests
synthetic.num_labels = 3
synthetic.train_per_class = 12
synthetic.test_per_class = 6
synthetic.image_size = 8
net.blocks = 2
net.width = 8
source.models = natural,pgd2
source.epochs = 2
source.decay_epochs = 1
source.eps = 0.5
finetune.subset_sizes = 6,9
finetune.blocks = 0,2
finetune.seeds = 2
finetune.epoch_scale = 0.05
influence.subset_size = 9
influence.test_size = 6
influence.k = 1,2
influence.models = natural,pgd2
"""


@pytest.fixture
def tiny_config(tmp_path) -> Path:
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


# acceptance summary ---------------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}
_RANK = {"SKIP": 0, "PASS": 1, "FAIL": 2}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        previous = _ACCEPTANCE.get(number)
        # a criterion split over several tests: any failure fails it, and a
        # skipped optional part does not hide a pass
        if previous is None or _RANK[outcome] > _RANK[previous[0]]:
            _ACCEPTANCE[number] = (outcome, title)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        outcome.get_result().criterion = (marker.args[0], marker.kwargs.get("title", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        outcome, title = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {outcome}  {title}")
