"""Shared fixtures."""

from pathlib import Path

import pytest

from src.config.settings import AppConfig
from src.core.lockservice import LockService
from src.core.simkernel import SimKernel

SCENARIO_DIR = Path(__file__).parent.parent / "scenarios"


@pytest.fixture
def config() -> AppConfig:
    return AppConfig()


@pytest.fixture
def kernel() -> SimKernel:
    return SimKernel(seed=7, latency=0.01)


@pytest.fixture
def lockservice(kernel) -> LockService:
    return LockService(kernel)


@pytest.fixture
def scenario_path():
    def _path(name: str) -> str:
        return str(SCENARIO_DIR / name)
    return _path


def advance(kernel: SimKernel, seconds: float) -> None:
    """Move the clock forward by seconds."""
    kernel.run_until(kernel.now() + seconds)
