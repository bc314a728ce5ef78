from importlib import resources

import numpy as np
import pytest

from scanguard.core import PriceSeries, RatioSeries


def brute_quantile(sample, p):
    """Reference quantile written straight from the interpolation rule."""
    x = sorted(float(v) for v in sample)
    g = (len(x) - 1) * p
    i = int(g // 1)
    f = g - i
    hi = x[i + 1] if i + 1 < len(x) else x[i]
    return x[i] * (1 - f) + hi * f


def make_ratio_series(ratios, vol_pairs=None, t0=1):
    r = np.asarray(ratios, dtype=float)
    if vol_pairs is None:
        vol_pairs = np.column_stack([np.arange(1, len(r) + 1), np.arange(2, len(r) + 2)]).astype(float)
    return RatioSeries(np.arange(t0, t0 + len(r)), r, np.log(r), vol_pairs)


@pytest.fixture
def sample_csv_path():
    return resources.files("scanguard") / "data" / "sample_scanner.csv"


@pytest.fixture
def milk_series():
    # 880 -> 630 -> 880 promo embedded in otherwise flat prices
    prices = [880, 880, 880, 880, 880, 630, 880, 880, 880, 870, 880]
    return PriceSeries("S01", "MILK", np.arange(1, 12), prices, np.full(11, 10.0))


ACCEPTANCE = pytest.StashKey[list]()


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title = number, title
        self.ok = None
        self.detail = ""

    def check(self, ok, detail=""):
        self.ok, self.detail = bool(ok), detail
        assert ok, f"criterion {self.number} ({self.title}): {detail}"


@pytest.fixture
def criterion(request):
    """Records one acceptance line per criterion; printed in the terminal summary."""
    made = []

    def start(number, title):
        c = _Criterion(number, title)
        made.append(c)
        return c

    yield start
    store = request.config.stash.setdefault(ACCEPTANCE, [])
    for c in made:
        if c.ok is None:
            c.ok, c.detail = False, "did not complete"
        store.append(c)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(results, key=lambda c: c.number):
        status = "PASS" if c.ok else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {c.number}: {c.title} | {c.detail}")
