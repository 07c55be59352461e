import numpy as np
import pytest

from imuaug.datasets import synthesize_corpus
from imuaug.labeling import builtin_ruleset
from imuaug.skeleton import builtin_model


@pytest.fixture(scope="session")
def lower():
    return builtin_model("lowerbody9")


@pytest.fixture(scope="session")
def full():
    return builtin_model("fullbody15")


@pytest.fixture(scope="session")
def fde_rules():
    return builtin_ruleset("fde")


@pytest.fixture(scope="session")
def fde_small(lower, fde_rules):
    """Two repetitions per (subject, class) of the synthetic FDE corpus."""
    return synthesize_corpus(lower, fde_rules, "fde", n=42, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary -----------------------------------------------------------

ACCEPTANCE = pytest.StashKey[dict]()


class _Criterion:
    def __init__(self, results, number, title):
        self.results, self.number, self.title = results, number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        status = "PASS" if kind is None else "FAIL"
        note = "; ".join(filter(None, [self.detail, f"{kind.__name__}: {exc}" if kind else ""]))
        self.results[self.number] = f"criterion {self.number:>2} {status}  {self.title}" + (f"  [{note}]" if note else "")
        print(self.results[self.number])
        return False


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as c:`` records one pass/fail line for the acceptance summary."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})
    return lambda number, title: _Criterion(results, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
