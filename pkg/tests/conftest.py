"""
Pytest configuration and shared fixtures for fg-array-sim tests.

Provides:
- Device parameter sets (calibrated defaults, noiseless)
- Small arrays under both routings
- Seeded random streams
- Config file helpers for the harness tests
"""

import json
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import numpy as np
import pytest
from loguru import logger

from fg_array_sim.array import ArrayState, ArrayTopology, RoutingVariant
from fg_array_sim.device import READ_BIASES, DeviceParams, TerminalBiases, state_for_current


# ============================================================================
# Logging
# ============================================================================

@pytest.fixture(autouse=True)
def quiet_logger():
    """Keep loguru at WARNING during tests; drop every sink afterwards."""
    logger.remove()
    logger.add(lambda msg: None, level="WARNING")
    yield
    logger.remove()


# ============================================================================
# Device Fixtures
# ============================================================================

@pytest.fixture
def params() -> DeviceParams:
    """Calibrated default parameters (default readout noise)."""
    return DeviceParams()


@pytest.fixture
def noiseless() -> DeviceParams:
    """Default parameters with the readout noise switched off."""
    return DeviceParams(noise_a=0.0, noise_b=0.0)


@pytest.fixture
def read_biases() -> TerminalBiases:
    return READ_BIASES


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# ============================================================================
# Array Fixtures
# ============================================================================

def _array(
    routing: RoutingVariant, params: DeviceParams, current: Optional[float] = None
) -> ArrayState:
    topology = ArrayTopology(4, 2, routing)
    if current is None:
        return ArrayState.uniform(topology, params)
    return ArrayState.uniform(topology, params, state_for_current(current, READ_BIASES, params).q)


@pytest.fixture
def modified_array(noiseless) -> ArrayState:
    """4x2 (two-by-two supercells) Modified array, fully erased, noiseless."""
    return _array(RoutingVariant.MODIFIED, noiseless)


@pytest.fixture
def original_array(noiseless) -> ArrayState:
    """4x2 Original array, fully erased, noiseless."""
    return _array(RoutingVariant.ORIGINAL, noiseless)


@pytest.fixture
def array_at() -> Callable[..., ArrayState]:
    """
    Factory for 4x2 arrays with every cell at one readout current.

    Usage:
        array = array_at(RoutingVariant.ORIGINAL, params, 1e-8)
    """
    return _array


# ============================================================================
# Harness Fixtures
# ============================================================================

@pytest.fixture
def config_writer(tmp_path: Path) -> Callable[[Dict[str, Any]], Path]:
    """
    Write a config mapping to a JSON file under tmp_path.

    Returns:
        Callable taking the mapping (and optional file name), returning the path
    """

    def write(data: Dict[str, Any], name: str = "config.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(data, indent=2), encoding="utf-8")
        return path

    return write


@pytest.fixture
def out_dir(tmp_path: Path) -> Path:
    path = tmp_path / "results"
    path.mkdir()
    return path
