"""
Gate-coupled four-quadrant vector-by-matrix multiplier.

Each input current drives a diode-connected peripheral cell whose settled gate
voltage is shared by one gate line of the array. Cells on that line then
output their stored current scaled by input / i_ref (both devices follow the
same exponential law), and the output lines sum them.

Layout for a weight matrix W of shape (n_out, n_in): input j drives gate lines
2j (x+) and 2j+1 (x-); output k reads output lines 2k (I+) and 2k+1 (I-).
Output lines are bit lines under Original routing and source lines under
Modified routing.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.optimize import brentq

from .array import ArrayState, ArrayTopology, BiasProtocol, Cell, RoutingVariant
from .device import (
    READ_BIASES,
    SAFE_V_MAX,
    SAFE_V_MIN,
    CellState,
    DeviceParams,
    TerminalBiases,
    draw_cell,
    read_current,
    state_for_current,
)
from .errors import RangeError
from .tuning import TuningPolicy, TuningTrace, tune_sequence

RAIL_V_D = READ_BIASES.v_d
RAIL_V_S = READ_BIASES.v_s

# Residual of the log-current solve
SOLVER_XTOL = 1e-13


# ============================================================================
# Program and input
# ============================================================================

@dataclass
class VmmProgram:
    """Differential weights and the cell currents that encode them."""

    weights: np.ndarray
    i_ref: float = 0.5e-6
    i_floor: float = 2e-9
    achieved: Optional[np.ndarray] = None
    unconverged: List[Cell] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        if not np.all(np.isfinite(self.weights)) or np.any(np.abs(self.weights) > 1.0):
            raise RangeError("weights must lie in [-1, 1]")
        if not (self.i_ref > 0 and self.i_floor > 0):
            raise RangeError("i_ref and i_floor must be positive")

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def cell_targets(self) -> np.ndarray:
        """Shape (n_out, n_in, 2): (I+, I-) per weight."""
        w = self.weights
        return np.stack(
            [
                self.i_floor + self.i_ref * (1.0 + w) / 2.0,
                self.i_floor + self.i_ref * (1.0 - w) / 2.0,
            ],
            axis=-1,
        )

    def reconstructed_weights(self) -> np.ndarray:
        currents = self.cell_targets if self.achieved is None else self.achieved
        return (currents[..., 0] - currents[..., 1]) / self.i_ref


@dataclass(frozen=True)
class VmmInput:
    """Differential input currents (x+, x-), one pair per input line."""

    x_plus: Tuple[float, ...]
    x_minus: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "x_plus", tuple(float(x) for x in self.x_plus))
        object.__setattr__(self, "x_minus", tuple(float(x) for x in self.x_minus))
        if len(self.x_plus) != len(self.x_minus):
            raise RangeError("x_plus and x_minus must have the same length")

    def check(self, program: VmmProgram) -> None:
        if len(self.x_plus) != program.n_in:
            raise RangeError(f"expected {program.n_in} inputs, got {len(self.x_plus)}")
        for x in self.x_plus + self.x_minus:
            if not program.i_floor <= x <= program.i_ref:
                raise RangeError(
                    f"input {x} A outside [{program.i_floor}, {program.i_ref}] A"
                )

    def gate_currents(self) -> List[float]:
        """Input current per used gate line (2j -> x+, 2j+1 -> x-)."""
        out = []
        for plus, minus in zip(self.x_plus, self.x_minus):
            out.extend((plus, minus))
        return out


# ============================================================================
# Layout
# ============================================================================

def intersection_cell(topology: ArrayTopology, gate_line: int, output_line: int) -> Cell:
    """Cell at the crossing of one gate line and one output line."""
    if topology.routing is RoutingVariant.ORIGINAL:
        cell = (gate_line, output_line)
    else:
        cell = (2 * output_line + gate_line % 2, gate_line // 2)
    return topology.check_cell(cell)


def check_fits(topology: ArrayTopology, n_out: int, n_in: int) -> None:
    if topology.routing is RoutingVariant.ORIGINAL:
        fits = topology.rows >= 2 * n_in and topology.cols >= 2 * n_out
    else:
        fits = topology.cols >= n_in and topology.rows >= 4 * n_out
    if not fits:
        raise RangeError(
            f"{topology.rows}x{topology.cols} {topology.routing.value} array cannot hold "
            f"a {n_out}x{n_in} differential weight matrix"
        )


def weight_cells(topology: ArrayTopology, k: int, j: int) -> Dict[Cell, int]:
    """
    The four cells of weight (k, j) mapped to their sign.

    Sign 0 cells carry I+, sign 1 cells carry I-.
    """
    return {
        intersection_cell(topology, 2 * j, 2 * k): 0,
        intersection_cell(topology, 2 * j + 1, 2 * k + 1): 0,
        intersection_cell(topology, 2 * j + 1, 2 * k): 1,
        intersection_cell(topology, 2 * j, 2 * k + 1): 1,
    }


def output_line_of(topology: ArrayTopology, cell: Cell) -> int:
    lines = topology.lines(cell)
    return lines.bit if topology.routing is RoutingVariant.ORIGINAL else lines.source


# ============================================================================
# Peripherals and gate settling
# ============================================================================

def make_peripherals(
    n: int,
    params: DeviceParams,
    i_ref: float,
    rng: Optional[np.random.Generator] = None,
) -> List[CellState]:
    """
    Diode-connected peripheral cells, each passing i_ref at the read biases.

    With an rng each peripheral gets its own parameter draw.
    """
    periphs = []
    for _ in range(n):
        cell_params = draw_cell(params, rng).params if rng is not None else params
        periphs.append(state_for_current(i_ref, READ_BIASES, cell_params))
    return periphs


def settle_gate(periph: CellState, i_in: float) -> float:
    """
    Gate voltage at which the peripheral passes i_in at the read rails.

    Solved with brentq on log(current) over the safe gate range.

    Raises:
        RangeError: i_in not reachable within the safe gate range

    Example:
        >>> periph = make_peripherals(1, DeviceParams(), 0.5e-6)[0]
        >>> settle_gate(periph, 0.5e-6)  # ~2.5
    """
    if not math.isfinite(i_in) or i_in <= 0.0:
        raise RangeError(f"input current {i_in} A must be positive")
    log_target = math.log(i_in)

    def residual(v_g: float) -> float:
        current = read_current(periph, TerminalBiases(v_g=v_g, v_d=RAIL_V_D, v_s=RAIL_V_S))
        if current <= 0.0:
            return -math.inf
        return math.log(current) - log_target

    lo, hi = SAFE_V_MIN, SAFE_V_MAX
    if not residual(lo) < 0.0 < residual(hi) or i_in >= periph.params.i_max:
        raise RangeError(f"input current {i_in} A not reachable for v_g in [{lo}, {hi}] V")
    return brentq(residual, lo, hi, xtol=SOLVER_XTOL, maxiter=200)


# ============================================================================
# Evaluation
# ============================================================================

def output_currents(
    array: ArrayState, program: VmmProgram, periphs: Sequence[CellState], inp: VmmInput
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Summed (I_out+, I_out-) per output.

    Unused gate lines are grounded; their cells still add their current to
    the output lines they sit on.
    """
    topology = array.topology
    check_fits(topology, program.n_out, program.n_in)
    inp.check(program)
    currents = inp.gate_currents()
    if len(periphs) < len(currents):
        raise RangeError(f"need {len(currents)} peripherals, got {len(periphs)}")

    gate_voltage = {g: settle_gate(periphs[g], x) for g, x in enumerate(currents)}
    n_lines = 2 * program.n_out
    sums = np.zeros(n_lines)
    for cell in topology.cells():
        line = output_line_of(topology, cell)
        if line >= n_lines:
            continue
        v_g = gate_voltage.get(topology.lines(cell).gate, 0.0)
        sums[line] += read_current(
            array.cell(cell), TerminalBiases(v_g=v_g, v_d=RAIL_V_D, v_s=RAIL_V_S)
        )
    return sums[0::2], sums[1::2]


def vmm_output(
    array: ArrayState, program: VmmProgram, periphs: Sequence[CellState], inp: VmmInput
) -> np.ndarray:
    """Differential output y = I_out+ - I_out- per output (A)."""
    i_plus, i_minus = output_currents(array, program, periphs, inp)
    return i_plus - i_minus


# ============================================================================
# Weight programming
# ============================================================================

def _assignments(topology: ArrayTopology, program: VmmProgram) -> List[Tuple[Cell, float]]:
    check_fits(topology, program.n_out, program.n_in)
    targets = program.cell_targets
    out = []
    for k in range(program.n_out):
        for j in range(program.n_in):
            for cell, sign in weight_cells(topology, k, j).items():
                out.append((cell, float(targets[k, j, sign])))
    return out


def _record_achieved(array: ArrayState, program: VmmProgram) -> None:
    achieved = np.zeros((program.n_out, program.n_in, 2))
    counts = np.zeros_like(achieved)
    for k in range(program.n_out):
        for j in range(program.n_in):
            for cell, sign in weight_cells(array.topology, k, j).items():
                achieved[k, j, sign] += read_current(array.cell(cell), READ_BIASES)
                counts[k, j, sign] += 1
    program.achieved = achieved / counts


def place_weights(array: ArrayState, program: VmmProgram) -> VmmProgram:
    """Set every weight cell exactly to its target (ideal programming)."""
    for cell, target in _assignments(array.topology, program):
        array.set_cell(cell, state_for_current(target, READ_BIASES, array.cell(cell).params))
    _record_achieved(array, program)
    return program


def program_weights(
    array: ArrayState,
    weights,
    i_ref: float,
    i_floor: float,
    policy: TuningPolicy,
    rng: np.random.Generator,
    protocol: Optional[BiasProtocol] = None,
) -> Tuple[VmmProgram, List[TuningTrace]]:
    """
    Tune every weight cell with closed-loop tuning.

    Returns:
        (program with achieved currents and unconverged cells, tuning traces)
    """
    program = VmmProgram(weights=weights, i_ref=i_ref, i_floor=i_floor)
    assignments = _assignments(array.topology, program)
    traces, report = tune_sequence(array, assignments, policy, rng, protocol)
    program.unconverged = [t.cell for t in traces if not t.converged]
    if program.unconverged:
        logger.warning(f"Weight cells not converged: {program.unconverged}")
    logger.debug(f"Weight programming drift: {report.max_drift:.3%}")
    _record_achieved(array, program)
    return program, traces


# ============================================================================
# Transfer characteristics
# ============================================================================

@dataclass(frozen=True)
class TransferRecord:
    x_plus: float
    x_minus: float
    i_plus: Tuple[float, ...]
    i_minus: Tuple[float, ...]

    @property
    def y(self) -> Tuple[float, ...]:
        return tuple(p - m for p, m in zip(self.i_plus, self.i_minus))


def transfer_sweep(
    array: ArrayState,
    program: VmmProgram,
    periphs: Sequence[CellState],
    input_index: int,
    x_values: Sequence[float],
    x_fixed: Optional[float] = None,
) -> List[TransferRecord]:
    """
    Sweep x+ of one input; every other input current sits at x_fixed.

    x_fixed defaults to i_floor.
    """
    if not 0 <= input_index < program.n_in:
        raise RangeError(f"input index {input_index} outside 0..{program.n_in - 1}")
    x_fixed = program.i_floor if x_fixed is None else x_fixed
    records = []
    for x in x_values:
        x_plus = [x_fixed] * program.n_in
        x_plus[input_index] = float(x)
        inp = VmmInput(x_plus=tuple(x_plus), x_minus=(x_fixed,) * program.n_in)
        i_plus, i_minus = output_currents(array, program, periphs, inp)
        records.append(
            TransferRecord(
                x_plus=float(x),
                x_minus=x_fixed,
                i_plus=tuple(float(v) for v in i_plus),
                i_minus=tuple(float(v) for v in i_minus),
            )
        )
    return records


def linearity_metric(xs: Sequence[float], ys: Sequence[float]) -> float:
    """
    Spread of the centered finite-difference slope, relative to its median.

    (max d - min d) / median d with d_i = (y[i+1] - y[i-1]) / (x[i+1] - x[i-1]).

    Raises:
        RangeError: Fewer than 10 samples, or x not strictly increasing

    Example:
        >>> linearity_metric(range(10), [3 * x for x in range(10)])
        0.0
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise RangeError("x and y must be 1-D sequences of equal length")
    if len(x) < 10:
        raise RangeError(f"need at least 10 samples, got {len(x)}")
    if np.any(np.diff(x) <= 0):
        raise RangeError("x samples must be strictly increasing")

    slopes = (y[2:] - y[:-2]) / (x[2:] - x[:-2])
    median = float(np.median(slopes))
    if median == 0.0:
        logger.warning("Zero median slope; linearity is undefined")
        return math.inf
    return float((slopes.max() - slopes.min()) / abs(median))
