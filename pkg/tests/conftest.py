import numpy as np
import pytest

from mddfnet.data import SynthConfig, synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth16(tmp_path_factory):
    """The 16-image, 3-class, seed-0 desk dataset."""
    out = tmp_path_factory.mktemp("synth16")
    return synth_generate(SynthConfig(n_images=16, seed=0), out)


@pytest.fixture(scope="session")
def synth2(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth2")
    return synth_generate(SynthConfig(n_images=2, seed=3), out)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and fail the test on FAIL."""

    def record(n: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
