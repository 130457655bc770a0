import numpy as np
import pytest

from threshpanel import _kernels
from threshpanel.panel import PanelDataset
from threshpanel.synth import SynthConfig, generate_synthetic


def small_panel(n_units=12, n_periods=4, n_states=3, seed=0, scale_range=(5, 400), controls=("z1",)):
    """Random small panel with integer counts, one or more controls and state labels."""
    rng = np.random.default_rng(seed)
    U, T = n_units, n_periods
    S = rng.integers(scale_range[0], scale_range[1], size=U * T)
    n = rng.integers(1, 60, size=U * T)
    s = rng.binomial(n, 0.3)
    return PanelDataset.from_arrays(
        unit_id=[f"u{i:03d}" for i in range(U) for _ in range(T)],
        period=[2010 + t for _ in range(U) for t in range(T)],
        scale=S,
        inspections=n,
        successes=s,
        controls={c: rng.standard_normal(U * T) for c in controls},
        fe_labels={"state": [f"s{i % n_states}" for i in range(U) for _ in range(T)]},
        density=rng.standard_normal(U * T),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def panel():
    return small_panel()


@pytest.fixture(scope="session")
def baseline_panel():
    """One draw of the strong-break synthetic baseline (3,000 rows)."""
    return generate_synthetic(SynthConfig(seed=2024))


@pytest.fixture(params=_kernels.available_backends())
def backend(request):
    with _kernels.use_backend(request.param):
        yield request.param


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
