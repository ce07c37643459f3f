import numpy as np
import pytest

from fcmg import bench
from fcmg.assembly import PhysicalParams, assemble, compute_quadratures
from fcmg.config import RunConfig
from fcmg.geometry import FullSpace, LevelSetDomain
from fcmg.mesh import Forest, make_level


def small_config(base=3, r_max=4, levels=2, **extra) -> RunConfig:
    cfg = RunConfig()
    cfg.set("base_level", base)
    cfg.set("r_max", r_max)
    cfg.set("levels", levels)
    for k, v in extra.items():
        cfg.set(k, v)
    return cfg


@pytest.fixture(scope="session")
def tiny_cfg():
    return small_config()


@pytest.fixture(scope="session")
def tiny_channel(tiny_cfg):
    """Channel hierarchy with two levels (about 2000 fine DoFs)."""
    return bench.build_channel_solver(tiny_cfg)


@pytest.fixture(scope="session")
def small_channel():
    """Three-level channel hierarchy (about 10^4 fine DoFs) with hanging nodes."""
    return bench.build_channel_solver(small_config(4, 6, 3))


def uniform_patch(n=6, level=0):
    """Operator on an ``n x n`` uniform grid without boundary terms."""
    dom = LevelSetDomain(FullSpace(), (0.0, float(n), 0.0, float(n)))
    grid = make_level(Forest.uniform(n, n, (0.0, 0.0), 1.0, level=level))
    quad = compute_quadratures(grid, dom)
    return grid, assemble(grid, quad, PhysicalParams(eta=1.0))


@pytest.fixture(scope="session")
def patch():
    return uniform_patch()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary -----------------------------------------------------------

ACCEPTANCE: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    """Remember one acceptance verdict; the session prints all of them at the end."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
