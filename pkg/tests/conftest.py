import json
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from repulsor import shapes
from repulsor.mesh import TriMesh


def random_convex_mesh(n: int = 100, seed: int = 0, stretch=(1.0, 0.8, 0.6)) -> TriMesh:
    """Convex hull of ``n`` random points on a stretched sphere, faces oriented outward."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    x *= np.asarray(stretch) * (1.0 + 0.1 * rng.uniform(size=(n, 1)))
    hull = ConvexHull(x)
    faces = hull.simplices.copy()
    c = x.mean(axis=0)
    n_ = np.cross(x[faces[:, 1]] - x[faces[:, 0]], x[faces[:, 2]] - x[faces[:, 0]])
    flip = np.einsum("ij,ij->i", n_, x[faces].mean(axis=1) - c) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return TriMesh(x, faces)


def central_fd(fun, x: np.ndarray, h: float) -> np.ndarray:
    """Central finite-difference gradient of ``fun`` at ``x`` (any shape)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = fun(x)
        flat[k] = old - h
        fm = fun(x)
        flat[k] = old
        gf[k] = (fp - fm) / (2 * h)
    return g


def rel_l2(a, b) -> float:
    return float(np.linalg.norm(np.ravel(a) - np.ravel(b)) / np.linalg.norm(np.ravel(b)))


@pytest.fixture
def tetra():
    return shapes.tetrahedron()


@pytest.fixture
def convex100():
    return random_convex_mesh(100, seed=1)


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Store one acceptance line; printed after the run by the terminal summary hook."""
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def golden():
    return json.loads((Path(__file__).parent / "golden.json").read_text())
