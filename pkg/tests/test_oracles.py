import pytest

from lib.errors import KVDeskError
from lib.oracles import SUITES, exhaustive_topk, run_suite


@pytest.mark.parametrize(
    "name, cases",
    [("redundancy", 30), ("attention", 30), ("topk", 30), ("capacity", 50), ("stride", 4)],
)
def test_randomized_suites_pass(name, cases):
    report = run_suite(name, cases=cases, seed=1)
    assert report.passed, report.failures[:3]
    assert report.cases == cases


def test_scheduler_suite_passes():
    report = run_suite("scheduler", steps=300, seeds=1, seed=2)
    assert report.passed, report.failures[:3]
    assert report.cases == 4


def test_exhaustive_topk_pins_the_window_and_prefers_later_ties():
    assert exhaustive_topk([1.0, 1.0, 1.0, 0.0], 2, 1, 4) == {2, 3}


def test_unknown_suite():
    assert "scheduler" in SUITES
    with pytest.raises(KVDeskError):
        run_suite("fuzz")


def test_scheduler_suite_runs_in_worker_processes():
    serial = run_suite("scheduler", steps=200, seeds=1, seed=3)
    parallel = run_suite("scheduler", steps=200, seeds=1, seed=3, workers=2)
    assert parallel.passed, parallel.failures[:3]
    assert (parallel.cases, parallel.failures) == (serial.cases, serial.failures)
