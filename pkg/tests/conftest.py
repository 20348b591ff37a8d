import contextlib
import math
import time

import pytest

from fedrel import diig, federation as fed, synthdata as sd

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


class Criterion:
    def __init__(self, name: str, budget_s: float):
        self.name = name
        self.budget_s = budget_s
        self.ok = False
        self.detail = ""
        self.elapsed = 0.0


@pytest.fixture
def criterion(request):
    """``with criterion(name, budget_s) as c:`` then set ``c.ok`` / ``c.detail``.

    Writes one PASS/FAIL line per criterion to the terminal summary; the
    runtime budget is part of the verdict.
    """
    @contextlib.contextmanager
    def run(name: str, budget_s: float, extra_s: float = 0.0):
        c = Criterion(name, budget_s)
        started = time.perf_counter()
        try:
            yield c
        except Exception as exc:
            c.ok, c.detail = False, f"{type(exc).__name__}: {exc}"
            raise
        finally:
            c.elapsed = time.perf_counter() - started + extra_s
            in_time = c.elapsed < budget_s
            verdict = "PASS" if (c.ok and in_time) else "FAIL"
            budget = f"budget {budget_s:g}s" if math.isfinite(budget_s) else "no budget"
            line = (f"{verdict}  {name}: {c.detail} [{c.elapsed:.1f}s / {budget}"
                    f"{'' if in_time else ', over budget'}]")
            request.config.stash[_LINES].append(line)
            print(line)
        assert c.ok, c.detail
        assert in_time, f"{name} took {c.elapsed:.1f}s, budget {budget_s:g}s"

    return run


@pytest.fixture(scope="session")
def default_dataset():
    return sd.generate(sd.GeneratorConfig(), seed=0)


@pytest.fixture(scope="session")
def central_run(default_dataset):
    """60 centralised epochs on the default synthetic dataset (shared, timed)."""
    started = time.perf_counter()
    model = diig.ModelConfig(w=2)
    data = fed.prepare_data(default_dataset, model, K=1, seed=0)
    cfg = fed.FedConfig(K=1, rounds=60, mode="central", seed=0, track_train=True)
    recs = fed.run_baseline("central", cfg, data)
    return recs, time.perf_counter() - started
