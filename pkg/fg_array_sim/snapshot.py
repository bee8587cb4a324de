"""
JSON snapshots of an ArrayState (charge grid, per-cell parameters, seed).

Python floats serialize through repr, so load(save(state)) is exact.
"""

import json
from pathlib import Path
from typing import Any, Dict, Union

from loguru import logger

from .array import ArrayState, ArrayTopology
from .device import CellState, DeviceParams
from .errors import ConfigError

SNAPSHOT_VERSION = 1


def snapshot_dict(state: ArrayState) -> Dict[str, Any]:
    topology = state.topology
    return {
        "version": SNAPSHOT_VERSION,
        "topology": {
            "rows": topology.rows,
            "cols": topology.cols,
            "routing": topology.routing.value,
        },
        "seed": state.seed,
        "cells": [
            {
                "row": row,
                "col": col,
                "q": state.cells[row][col].q,
                "params": state.cells[row][col].params.model_dump(),
            }
            for row, col in topology.cells()
        ],
    }


def state_from_dict(data: Dict[str, Any]) -> ArrayState:
    """
    Rebuild an ArrayState from snapshot_dict() output.

    Raises:
        ConfigError: Unknown version, missing or duplicated cells
    """
    if data.get("version") != SNAPSHOT_VERSION:
        raise ConfigError(f"unsupported snapshot version: {data.get('version')}")
    try:
        topology = ArrayTopology(**data["topology"])
        grid = [[None] * topology.cols for _ in range(topology.rows)]
        params_cache: Dict[str, DeviceParams] = {}
        for entry in data["cells"]:
            key = json.dumps(entry["params"], sort_keys=True)
            if key not in params_cache:
                params_cache[key] = DeviceParams.model_validate(entry["params"])
            row, col = topology.check_cell((entry["row"], entry["col"]))
            if grid[row][col] is not None:
                raise ConfigError(f"cell ({row}, {col}) appears twice in snapshot")
            grid[row][col] = CellState(q=entry["q"], params=params_cache[key])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed snapshot: {e}") from e

    missing = [(r, c) for r, c in topology.cells() if grid[r][c] is None]
    if missing:
        raise ConfigError(f"snapshot is missing cells {missing}")
    return ArrayState(topology, grid, seed=data.get("seed"))


def save_snapshot(state: ArrayState, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(snapshot_dict(state), indent=2) + "\n", encoding="utf-8")
    logger.debug(f"Snapshot written: {path}")
    return path


def load_snapshot(path: Union[str, Path]) -> ArrayState:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read snapshot {path}: {e}") from e
    return state_from_dict(data)
