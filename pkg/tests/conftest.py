import numpy as np
import pytest

from lcroll.curve_data import CurveDataset, make_curve


def make_dataset(n_curves=4, length=6, dim=2, seed=0, name="toy"):
    rng = np.random.default_rng(seed)
    curves = [
        make_curve(f"k{i}", rng.normal(size=dim), rng.uniform(0, 1, length))
        for i in range(n_curves)
    ]
    return CurveDataset(tuple(curves), name, dim)


@pytest.fixture
def toy():
    return make_dataset()


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", None) != "call":
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                lines.append((props["criterion"], outcome, props.get("detail", "")))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, outcome, detail in sorted(lines):
        tag = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{tag} criterion {number:2d}: {detail}")
