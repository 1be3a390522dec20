import os
from pathlib import Path

import pytest

from fnrd.integrator import build_context
from fnrd.mesh import build_mesh
from fnrd.model import ModelParams


def pytest_report_header(config):
    mode = "quick" if os.environ.get("FNRD_QUICK") else "full"
    return f"fnrd acceptance mode: {mode} (set FNRD_QUICK=1 for the CI-sized run)"


@pytest.fixture(scope="session")
def quick_mode() -> bool:
    return bool(os.environ.get("FNRD_QUICK"))


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory) -> Path:
    """Reference/spectrum cache shared across the test session.

    Honors FNRD_CACHE so repeated local runs can reuse the expensive
    reference solutions; CI gets a fresh session-scoped directory.
    """
    env = os.environ.get("FNRD_CACHE")
    if env:
        p = Path(env)
        p.mkdir(parents=True, exist_ok=True)
        return p
    return tmp_path_factory.mktemp("fnrd-cache")


@pytest.fixture(scope="session")
def params() -> ModelParams:
    return ModelParams()


@pytest.fixture(scope="session")
def ctx2d3(params):
    """Small 2D context used by many integrator/spectral tests."""
    return build_context(build_mesh(2, 3), params)


@pytest.fixture(scope="session")
def ctx1d3(params):
    return build_context(build_mesh(1, 3), params)
