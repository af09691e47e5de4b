import pytest

from fedprotokd.orchestrator import run_experiment, synthetic_benchmark

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


class BenchmarkCache:
    """Memoised synthetic-benchmark runs shared across the acceptance tests."""

    def __init__(self):
        self._runs = {}

    def get(self, method, seed, alpha=0.1):
        key = (method, seed, alpha)
        if key not in self._runs:
            # only the weighted-average baseline is allowed to see sample counts
            release = method == "fedpkd_weightedavg"
            self._runs[key] = run_experiment(synthetic_benchmark(method, seed, alpha), release_counts=release)
        return self._runs[key]

    def results(self):
        return list(self._runs.values())


@pytest.fixture(scope="session")
def benchmark_runs():
    return BenchmarkCache()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
