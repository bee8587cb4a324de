"""
Supercell array: line topology, bias protocols, half-select classes.

Every program, erase or read operation is expressed as a grid of terminal
biases generated line by line from the selected cell and a BiasProtocol. The
grid is then applied to every cell through the device model, so half-select
disturb is never special-cased: it follows from the voltages each cell sees.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Annotated, Dict, Iterator, List, NamedTuple, Optional, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .device import (
    READ_BIASES,
    SAFE_V_MAX,
    SAFE_V_MIN,
    CellState,
    DeviceParams,
    Pulse,
    TerminalBiases,
    UpdateReport,
    draw_cell,
    pulse_update,
    read_current,
    sample_readout,
)
from .errors import RangeError

Cell = Tuple[int, int]
Voltage = Annotated[float, Field(ge=SAFE_V_MIN, le=SAFE_V_MAX)]


class RoutingVariant(str, Enum):
    """Gate-line routing of the array."""

    ORIGINAL = "original"
    MODIFIED = "modified"


class OpKind(str, Enum):
    PROGRAM = "program"
    ERASE = "erase"
    READ = "read"


class CellClass(str, Enum):
    """Role of a cell during one operation on a selected cell."""

    SELECTED = "selected"
    HALF_A = "A"
    HALF_B = "B"
    HALF_C = "C"
    HALF_D = "D"
    HALF_E = "E"
    UNSELECTED = "unselected"


# ============================================================================
# Topology
# ============================================================================

class LineAssignment(NamedTuple):
    """Terminal line ids of one cell."""

    gate: int
    source: int
    bit: int


@dataclass(frozen=True)
class ArrayTopology:
    """
    Array dimensions and routing.

    Rows pair into supercells sharing one source line. Original routing runs
    one gate line per row. Modified routing runs gate lines along the columns,
    two per column (even and odd row of each supercell), so that the two cells
    of a supercell stay separately addressable.
    """

    rows: int
    cols: int
    routing: RoutingVariant = RoutingVariant.MODIFIED

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise RangeError(f"array must be at least 2x2, got {self.rows}x{self.cols}")
        if self.rows % 2:
            raise RangeError(f"rows must be even (supercells share a source), got {self.rows}")
        object.__setattr__(self, "routing", RoutingVariant(self.routing))

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def n_gate_lines(self) -> int:
        if self.routing is RoutingVariant.ORIGINAL:
            return self.rows
        return 2 * self.cols

    @property
    def n_source_lines(self) -> int:
        return self.rows // 2

    @property
    def n_bit_lines(self) -> int:
        return self.cols

    def check_cell(self, cell: Cell) -> Cell:
        row, col = cell
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise RangeError(f"cell {cell} outside {self.rows}x{self.cols} array")
        return (int(row), int(col))

    def lines(self, cell: Cell) -> LineAssignment:
        row, col = self.check_cell(cell)
        if self.routing is RoutingVariant.ORIGINAL:
            gate = row
        else:
            gate = 2 * col + row % 2
        return LineAssignment(gate=gate, source=row // 2, bit=col)

    def cells(self) -> Iterator[Cell]:
        for row in range(self.rows):
            for col in range(self.cols):
                yield (row, col)

    def gate_line_members(self, gate: int) -> List[Cell]:
        return [cell for cell in self.cells() if self.lines(cell).gate == gate]


# ============================================================================
# Bias protocols
# ============================================================================

class _Roles(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    ramp_lo: Voltage
    ramp_hi: Voltage
    initial_amplitude: Voltage
    initial_duration: float = Field(gt=0, le=1.0)

    @model_validator(mode="after")
    def _check_ramp(self):
        if self.ramp_lo > self.ramp_hi:
            raise ValueError("ramp_lo must not exceed ramp_hi")
        return self

    def check_amplitude(self, amplitude: float) -> float:
        if amplitude == self.initial_amplitude or self.ramp_lo <= amplitude <= self.ramp_hi:
            return amplitude
        raise RangeError(
            f"pulse amplitude {amplitude} V outside ramp [{self.ramp_lo}, {self.ramp_hi}] V"
        )


class ProgramRoles(_Roles):
    """Programming: ramped source pulse, gate in the injection window."""

    v_g_sel: Voltage = 1.6
    v_g_unsel: Voltage = -1.0
    v_s_unsel: Voltage = 0.0
    v_d_sel: Voltage = 0.0
    v_d_inhibit: Voltage = 2.7
    ramp_lo: Voltage = 4.5
    ramp_hi: Voltage = 8.0
    initial_amplitude: Voltage = 9.0
    initial_duration: float = Field(5e-6, gt=0, le=1.0)


class EraseRoles(_Roles):
    """Erasure: ramped gate pulse, source/drain rails raised on inhibited lines."""

    v_g_unsel: Voltage = 0.0
    v_s_sel: Voltage = 0.0
    v_s_unsel: Voltage = 2.7
    v_d_sel: Voltage = 2.7
    v_d_inhibit: Voltage = 2.7
    ramp_lo: Voltage = 5.0
    ramp_hi: Voltage = 8.5
    initial_amplitude: Voltage = 10.0
    initial_duration: float = Field(10e-3, gt=0, le=1.0)


class ReadRoles(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    v_g: Voltage = READ_BIASES.v_g
    v_d: Voltage = READ_BIASES.v_d
    v_s: Voltage = READ_BIASES.v_s

    @property
    def biases(self) -> TerminalBiases:
        return TerminalBiases(v_g=self.v_g, v_d=self.v_d, v_s=self.v_s)


_ROUTING_DEFAULTS: Dict[RoutingVariant, Dict[str, dict]] = {
    RoutingVariant.ORIGINAL: {"program": {"v_g_unsel": 0.0}, "erase": {"v_d_sel": 0.0}},
    RoutingVariant.MODIFIED: {"program": {"v_g_unsel": -1.0}, "erase": {"v_d_sel": 2.7}},
}


class BiasProtocol(BaseModel):
    """
    Named role voltages for program, erase and read.

    Use for_routing() to get the defaults of a routing with optional
    per-role overrides.

    Example:
        >>> protocol = BiasProtocol.for_routing("original", {"erase": {"v_d_inhibit": 3.0}})
        >>> protocol.erase.v_d_inhibit
        3.0
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    program: ProgramRoles = Field(default_factory=ProgramRoles)
    erase: EraseRoles = Field(default_factory=EraseRoles)
    read: ReadRoles = Field(default_factory=ReadRoles)

    @classmethod
    def for_routing(
        cls, routing: RoutingVariant, overrides: Optional[Dict[str, dict]] = None
    ) -> "BiasProtocol":
        routing = RoutingVariant(routing)
        overrides = overrides or {}
        unknown = set(overrides) - {"program", "erase", "read"}
        if unknown:
            raise ValueError(f"unknown protocol roles: {sorted(unknown)}")
        merged = {}
        for role in ("program", "erase", "read"):
            merged[role] = {
                **_ROUTING_DEFAULTS[routing].get(role, {}),
                **(overrides.get(role) or {}),
            }
        return cls.model_validate(merged)

    def with_roles(self, role: str, **values: float) -> "BiasProtocol":
        """Copy with some voltages of one role replaced (validated)."""
        current = getattr(self, role).model_dump()
        roles = type(getattr(self, role)).model_validate({**current, **values})
        return self.model_copy(update={role: roles})


# ============================================================================
# Classification and bias maps
# ============================================================================

def classify(topology: ArrayTopology, op_kind: OpKind, selected: Cell, cell: Cell) -> CellClass:
    """
    Half-select class of `cell` while `selected` is programmed, erased or read.

    Classes follow line sharing with the selected cell:
        Program/Original: same gate row -> A; same source line only -> B
        Program/Modified: same source line -> B; same gate line -> D
        Erase/Original:   same gate row (gate and source shared) -> C
        Erase/Modified:   same gate line -> E
    """
    op_kind = OpKind(op_kind)
    sel = topology.lines(selected)
    other = topology.lines(cell)
    if topology.check_cell(selected) == topology.check_cell(cell):
        return CellClass.SELECTED

    same_gate = other.gate == sel.gate
    same_source = other.source == sel.source
    original = topology.routing is RoutingVariant.ORIGINAL

    if op_kind is OpKind.PROGRAM:
        if original:
            if same_gate:
                return CellClass.HALF_A
            if same_source:
                return CellClass.HALF_B
        else:
            if same_source:
                return CellClass.HALF_B
            if same_gate:
                return CellClass.HALF_D
    elif op_kind is OpKind.ERASE:
        if same_gate:
            return CellClass.HALF_C if original else CellClass.HALF_E
    return CellClass.UNSELECTED


def class_grid(topology: ArrayTopology, op_kind: OpKind, selected: Cell) -> List[List[CellClass]]:
    return [
        [classify(topology, op_kind, selected, (row, col)) for col in range(topology.cols)]
        for row in range(topology.rows)
    ]


def _line_voltages(
    op_kind: OpKind, protocol: BiasProtocol, amplitude: Optional[float]
) -> Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]]:
    """(selected, other) voltage pairs for gate, source and bit lines."""
    if op_kind is OpKind.PROGRAM:
        roles = protocol.program
        amp = roles.check_amplitude(amplitude)
        return (
            (roles.v_g_sel, roles.v_g_unsel),
            (amp, roles.v_s_unsel),
            (roles.v_d_sel, roles.v_d_inhibit),
        )
    if op_kind is OpKind.ERASE:
        roles = protocol.erase
        amp = roles.check_amplitude(amplitude)
        return (
            (amp, roles.v_g_unsel),
            (roles.v_s_sel, roles.v_s_unsel),
            (roles.v_d_sel, roles.v_d_inhibit),
        )
    read = protocol.read
    return ((read.v_g, 0.0), (read.v_s, 0.0), (read.v_d, 0.0))


def bias_map(
    topology: ArrayTopology,
    op_kind: OpKind,
    selected: Cell,
    protocol: BiasProtocol,
    pulse_amplitude: Optional[float] = None,
) -> List[List[TerminalBiases]]:
    """
    Per-cell terminal biases for one operation on `selected`.

    Voltages are assigned per line, so every cell on a shared line sees the
    same line voltage. The pulse amplitude goes on the selected source line
    (program) or gate line (erase) and is ignored for reads.

    Raises:
        RangeError: Amplitude outside the role's ramp and not its initial-pulse value
    """
    op_kind = OpKind(op_kind)
    if op_kind is not OpKind.READ and pulse_amplitude is None:
        raise RangeError(f"{op_kind.value} needs a pulse amplitude")
    sel = topology.lines(selected)
    gate_v, source_v, bit_v = _line_voltages(op_kind, protocol, pulse_amplitude)

    grid = []
    for row in range(topology.rows):
        grid_row = []
        for col in range(topology.cols):
            lines = topology.lines((row, col))
            grid_row.append(
                TerminalBiases(
                    v_g=gate_v[0] if lines.gate == sel.gate else gate_v[1],
                    v_d=bit_v[0] if lines.bit == sel.bit else bit_v[1],
                    v_s=source_v[0] if lines.source == sel.source else source_v[1],
                )
            )
        grid.append(grid_row)
    return grid


# ============================================================================
# Array state
# ============================================================================

@dataclass
class ArrayState:
    """
    Grid of cell states over a topology.

    Cells are immutable; the grid itself is replaced wholesale by the tuning
    routines. `seed` records where a drawn array came from, for snapshots.
    """

    topology: ArrayTopology
    cells: List[List[CellState]]
    seed: Optional[int] = field(default=None)

    def __post_init__(self):
        if len(self.cells) != self.topology.rows or any(
            len(row) != self.topology.cols for row in self.cells
        ):
            raise RangeError(f"cell grid does not match {self.topology.rows}x{self.topology.cols}")

    @classmethod
    def uniform(
        cls, topology: ArrayTopology, params: DeviceParams, q: Optional[float] = None
    ) -> "ArrayState":
        """All cells share `params`; q defaults to the fully erased q_max."""
        state = CellState(q=params.q_max if q is None else q, params=params)
        return cls(topology, [[state] * topology.cols for _ in range(topology.rows)])

    @classmethod
    def drawn(
        cls,
        topology: ArrayTopology,
        params: DeviceParams,
        rng: np.random.Generator,
        seed: Optional[int] = None,
    ) -> "ArrayState":
        """Per-cell parameter draws (row-major order), all fully erased."""
        cells = [
            [draw_cell(params, rng) for _ in range(topology.cols)] for _ in range(topology.rows)
        ]
        return cls(topology, cells, seed=seed)

    def cell(self, cell: Cell) -> CellState:
        row, col = self.topology.check_cell(cell)
        return self.cells[row][col]

    def set_cell(self, cell: Cell, state: CellState) -> None:
        row, col = self.topology.check_cell(cell)
        self.cells[row][col] = state

    def copy(self) -> "ArrayState":
        return ArrayState(self.topology, [list(row) for row in self.cells], seed=self.seed)

    def charges(self) -> np.ndarray:
        return np.array([[c.q for c in row] for row in self.cells])

    def read_currents(self, biases: TerminalBiases = READ_BIASES) -> np.ndarray:
        """Noise-free readout of every cell as if each were the selected one."""
        return np.array([[read_current(c, biases) for c in row] for row in self.cells])


def apply_array_pulse(
    state: ArrayState, bias_grid: List[List[TerminalBiases]], duration: float
) -> Tuple[ArrayState, List[List[UpdateReport]]]:
    """
    Apply one pulse to every cell with its own biases.

    Returns:
        (new ArrayState, grid of UpdateReport); the input state is untouched
    """
    topology = state.topology
    if len(bias_grid) != topology.rows or any(len(row) != topology.cols for row in bias_grid):
        raise RangeError("bias grid does not match the array")

    cells, reports = [], []
    for row in range(topology.rows):
        cell_row, report_row = [], []
        for col in range(topology.cols):
            updated, report = pulse_update(
                state.cells[row][col], Pulse(biases=bias_grid[row][col], duration=duration)
            )
            cell_row.append(updated)
            report_row.append(report)
        cells.append(cell_row)
        reports.append(report_row)
    return ArrayState(topology, cells, seed=state.seed), reports


def read_cell(
    state: ArrayState,
    cell: Cell,
    window: float,
    rng: np.random.Generator,
    protocol: Optional[BiasProtocol] = None,
) -> float:
    """Averaged noisy readout of one cell; other lines grounded."""
    protocol = protocol or BiasProtocol.for_routing(state.topology.routing)
    row, col = state.topology.check_cell(cell)
    biases = bias_map(state.topology, OpKind.READ, cell, protocol)[row][col]
    return sample_readout(state.cells[row][col], biases, window, rng)


def disturb_summary(
    before: ArrayState, after: ArrayState, classes: List[List[CellClass]]
) -> Dict[CellClass, float]:
    """
    Maximum relative change of the noise-free readout per cell class.

    Classes that do not occur in `classes` are absent from the result.
    """
    i_before = before.read_currents()
    i_after = after.read_currents()
    rel = np.abs(i_after - i_before) / i_before

    summary: Dict[CellClass, float] = {}
    for row, col in before.topology.cells():
        cls = classes[row][col]
        summary[cls] = max(summary.get(cls, 0.0), float(rel[row, col]))

    disturbed = [c.value for c in summary if c is not CellClass.SELECTED and summary[c] > 0.1]
    if disturbed:
        logger.debug(f"Disturb above 10% on classes {disturbed}")
    return summary
