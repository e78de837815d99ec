import logging
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from mesh_core import gauss_legendre_rule, perturb_interior, structured_mesh  # noqa: E402


# the autouse env fixture below is safe to share across generated examples
settings.register_profile("tmop", suppress_health_check=[HealthCheck.function_scoped_fixture], deadline=None)
settings.load_profile("tmop")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running optimization cases (still run by default)")


@pytest.fixture
def unit_quad():
    return structured_mesh(1, degree=1, dim=2)


@pytest.fixture
def square_p2():
    return structured_mesh(4, degree=2, dim=2)


@pytest.fixture
def perturbed_p2(square_p2):
    return perturb_interior(square_p2, 0.15, seed=7)


@pytest.fixture
def cube_p1():
    return structured_mesh(2, degree=1, dim=3)


@pytest.fixture
def quad4_2d():
    return gauss_legendre_rule(4, 2)


@pytest.fixture(autouse=True)
def _isolated_dirs(tmp_path, monkeypatch):
    monkeypatch.setenv("TMOP_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("TMOP_OUTPUT_DIR", str(tmp_path / "runs"))
    root = logging.getLogger()
    before = list(root.handlers)
    yield
    for handler in [h for h in root.handlers if h not in before]:
        root.removeHandler(handler)
        handler.close()
    root.__dict__.pop("_tmop_configured", None)


def random_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
