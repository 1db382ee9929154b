# tests/conftest.py - Shared fixtures and the opt-in slow marker
import os
from dotenv import load_dotenv
import pytest

# Load environment variables first
load_dotenv(dotenv_path=os.path.join(os.path.dirname(__file__), '..', '.env'))

from src.models.params import LmmParams, MglmmParams, ToyParams


def pytest_configure(config):
    """Configure pytest markers and settings"""
    config.addinivalue_line(
        "markers", "slow: Monte Carlo heavy test (skipped unless --run-slow)"
    )


def pytest_collection_modifyitems(config, items):
    """Skip slow tests by default unless explicitly requested"""
    if not config.getoption("--run-slow"):
        skip_slow = pytest.mark.skip(reason="Slow tests skipped (use --run-slow to run)")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip_slow)


def pytest_addoption(parser):
    """Add custom command line options"""
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Run Monte Carlo heavy tests"
    )


@pytest.fixture
def lmm_theta0():
    """Reference LMM parameters (theta1..theta7)"""
    return LmmParams(1.0, 0.5, 1.0, 1.0, 1.0, 1.0, 0.3)


@pytest.fixture
def mglmm_theta0():
    """Reference MGLMM parameters with p = 2"""
    return MglmmParams([0.5, -0.5], [0.3, 0.2], 1.0)


@pytest.fixture
def toy_theta0():
    return ToyParams(0.0)


@pytest.fixture
def lmm_data(lmm_theta0):
    """Small LMM dataset, N=4, T=4"""
    from src.models.lmm import simulate_lmm
    return simulate_lmm(lmm_theta0, 4, 4, seed=11)


@pytest.fixture
def mglmm_data(mglmm_theta0):
    """Small MGLMM dataset, N=4, p=2"""
    from src.models.mglmm import generate_design, simulate_mglmm
    design = generate_design(4, 2, seed=3, gram_floor=0.0)
    return simulate_mglmm(mglmm_theta0, design, seed=12)


@pytest.fixture
def output_dir(tmp_path):
    """Temporary directory for reports and datasets"""
    path = tmp_path / "out"
    path.mkdir()
    return path
