"""
fg-array-sim: behavioral simulator of an analog-tunable floating-gate NOR-flash array.

Layers, bottom up: device (single-cell model), array (topology, bias
protocols, half-select disturb), tuning (write-verify controller), vmm
(gate-coupled vector-by-matrix multiplier) and harness (CLI experiments).
"""

__version__ = "1.0.0"

from .array import (  # noqa: E402
    ArrayState,
    ArrayTopology,
    BiasProtocol,
    CellClass,
    OpKind,
    RoutingVariant,
    apply_array_pulse,
    bias_map,
    classify,
    read_cell,
)
from .device import (  # noqa: E402
    READ_BIASES,
    CellState,
    DeviceParams,
    Pulse,
    TerminalBiases,
    draw_cell,
    fg_potential,
    pulse_update,
    read_current,
    sample_readout,
    state_for_current,
)
from .errors import (  # noqa: E402
    AcceptanceError,
    ConfigError,
    FgSimError,
    RangeError,
    UnsupportedRegimeError,
)
from .tuning import TuningConfig, TuningPolicy, TuningTrace, tune_cell, tune_sequence  # noqa: E402

__all__ = [
    "__version__",
    "ArrayState",
    "ArrayTopology",
    "BiasProtocol",
    "CellClass",
    "OpKind",
    "RoutingVariant",
    "apply_array_pulse",
    "bias_map",
    "classify",
    "read_cell",
    "READ_BIASES",
    "CellState",
    "DeviceParams",
    "Pulse",
    "TerminalBiases",
    "draw_cell",
    "fg_potential",
    "pulse_update",
    "read_current",
    "sample_readout",
    "state_for_current",
    "AcceptanceError",
    "ConfigError",
    "FgSimError",
    "RangeError",
    "UnsupportedRegimeError",
    "TuningConfig",
    "TuningPolicy",
    "TuningTrace",
    "tune_cell",
    "tune_sequence",
]
