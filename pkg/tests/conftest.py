import numpy as np
import pytest

from weakcoupling.model import harmonic_pair, softened_pair, PotentialPair


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["harmonic", "softened"])
def pp(request):
    return harmonic_pair() if request.param == "harmonic" else softened_pair()


@pytest.fixture
def harm_half():
    """Harmonic pinning with V = |q|^2 / 2."""
    return PotentialPair("harmonic", "harmonic_v", kappa=1.0)


@pytest.fixture(scope="session")
def harmonic_table():
    """Green-Kubo table of the harmonic family on {0, 0.5, 1, 2, 4}, sigma = 1."""
    from weakcoupling.coefficients import GKParams, tabulate
    return tabulate([0.0, 0.5, 1.0, 2.0, 4.0], 1.0, harmonic_pair(),
                    GKParams(n_traj=5000), seed=2024)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one summary line per acceptance criterion."""
    def record(number, ok, detail):
        _ACCEPTANCE.append((number, f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
