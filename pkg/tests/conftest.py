import numpy as np
import pytest

from stemrecon.density import ParamVector
from stemrecon.scan import FrameStack, ScanGeometry

ACCEPTANCE = {}


def pytest_addoption(parser):
    parser.addoption("--full", action="store_true", default=False,
                     help="run the precision-scaling criterion at 256x256 with K up to 64 (hours)")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def report_criterion():
    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def random_instance(rng, max_side=8, max_atoms=3, max_frames=2):
    """Small random frames plus parameters for derivative checks."""
    n1, n2 = (int(v) for v in rng.integers(3, max_side + 1, 2))
    K = int(rng.integers(1, max_frames + 1))
    J = int(rng.integers(0, max_atoms + 1))
    g = ScanGeometry(n1, n2)
    p = ParamVector(rng.uniform(0, [n1 + 1, n2 + 1], (J, 2)), rng.uniform(5, 40, J),
                    rng.uniform(1.5, 3.0), rng.uniform(5, 20), rng.random(J) < 0.7)
    p_ini = ParamVector(p.centers + rng.normal(0, 0.5, (J, 2)), p.heights + 1, p.width, p.offset, p.in_domain)
    frames = rng.poisson(20, (K, n2, n1)).astype(float)
    return FrameStack(frames, g), p, p_ini


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
