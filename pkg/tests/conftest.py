import numpy as np
import pytest

from streamshield.telemetry import GeneratorConfig, generate_synthetic


@pytest.fixture(scope="session")
def bench():
    """The default desk-scale synthetic benchmark (seed 42)."""
    return generate_synthetic(GeneratorConfig())


@pytest.fixture(scope="session")
def small_bench():
    return generate_synthetic(GeneratorConfig(n_benign=2000, n_anomalous=400, seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one acceptance line; the terminal summary repeats them all."""

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
