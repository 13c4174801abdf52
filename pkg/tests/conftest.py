import numpy as np
import pytest
from hypothesis import settings

from specssm.geomcore import Mesh
from specssm.synth import icosphere, sphere_mesh

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def ellipsoid_mesh(n=300, axes=(3.0, 2.0, 1.2)) -> Mesh:
    u, f = sphere_mesh(n)
    return Mesh(u * np.array(axes), f)


@pytest.fixture(scope="session")
def ico3() -> Mesh:
    return icosphere(3)


@pytest.fixture(scope="session")
def ellipsoid() -> Mesh:
    return ellipsoid_mesh()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
