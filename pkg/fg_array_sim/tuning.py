"""
Closed-loop write-verify tuning of individual cells.

The controller alternates averaged reads with single program or erase pulses.
Each direction has its own amplitude ramp addressed by an integer step index;
on a polarity change the new direction restarts a few steps below where it
last stopped.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .array import (
    ArrayState,
    BiasProtocol,
    Cell,
    CellClass,
    OpKind,
    apply_array_pulse,
    bias_map,
    classify,
    read_cell,
)
from .device import UpdateReport, read_current, state_for_current
from .errors import RangeError

TARGET_MIN = 0.5e-9
TARGET_MAX = 2e-6


# ============================================================================
# Configuration
# ============================================================================

class RampSchedule(BaseModel):
    """Pulse amplitude ramp: start + k*step for k = 0, 1, ..., capped at max."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    start_amplitude: float
    step: float = Field(gt=0)
    max_amplitude: float
    pulse_duration: float = Field(gt=0, le=1.0)

    @model_validator(mode="after")
    def _check_bounds(self) -> "RampSchedule":
        if self.start_amplitude > self.max_amplitude:
            raise ValueError("start_amplitude must not exceed max_amplitude")
        return self

    @property
    def max_index(self) -> int:
        """First step index whose amplitude reaches the cap."""
        return math.ceil((self.max_amplitude - self.start_amplitude) / self.step - 1e-9)

    def amplitude(self, index: int) -> float:
        if index < 0:
            raise RangeError(f"ramp index {index} is negative")
        return min(round(self.start_amplitude + index * self.step, 9), self.max_amplitude)


DEFAULT_PROGRAM_RAMP = RampSchedule(
    start_amplitude=4.5, step=0.05, max_amplitude=8.0, pulse_duration=5e-6
)
DEFAULT_ERASE_RAMP = RampSchedule(
    start_amplitude=5.0, step=0.05, max_amplitude=8.5, pulse_duration=0.6e-3
)


class TuningPolicy(BaseModel):
    """Everything about a tuning run except its target."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    rel_tolerance: float = Field(0.01, gt=0, lt=1)
    read_window: float = Field(10e-3, gt=0)
    program_ramp: RampSchedule = DEFAULT_PROGRAM_RAMP
    erase_ramp: RampSchedule = DEFAULT_ERASE_RAMP
    max_pulses: int = Field(1000, ge=1)
    # Likely suboptimal; exposed for experiments
    backoff_steps: int = Field(4, ge=0)

    def for_target(self, target: float) -> "TuningConfig":
        return TuningConfig(**self.model_dump(exclude={"target"}), target=target)


class TuningConfig(TuningPolicy):
    """A TuningPolicy bound to one target readout current (A)."""

    target: float = Field(ge=TARGET_MIN, le=TARGET_MAX)


# ============================================================================
# Traces
# ============================================================================

class EventKind(str, Enum):
    READ = "read"
    PROGRAM = "program"
    ERASE = "erase"


@dataclass(frozen=True)
class TuningEvent:
    index: int
    kind: EventKind
    amplitude: Optional[float]
    measured: Optional[float]
    q_after: float

    def to_record(self) -> Dict:
        return {
            "index": self.index,
            "kind": self.kind.value,
            "amplitude": self.amplitude,
            "measured": self.measured,
            "q_after": self.q_after,
        }


@dataclass
class TuningTrace:
    """Pulse-by-pulse history of one tuning run."""

    cell: Cell
    target: float
    events: List[TuningEvent] = field(default_factory=list)
    converged: bool = False
    pulses_used: int = 0
    final_current: float = float("nan")

    @property
    def reads(self) -> List[TuningEvent]:
        return [e for e in self.events if e.kind is EventKind.READ]

    def tune_events(self, kind: Optional[EventKind] = None) -> List[TuningEvent]:
        return [
            e
            for e in self.events
            if e.kind is not EventKind.READ and (kind is None or e.kind is kind)
        ]

    @property
    def rel_error(self) -> float:
        return abs(self.final_current - self.target) / self.target

    def write_jsonl(self, path: Union[str, Path]) -> Path:
        """One JSON object per event, in order."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for event in self.events:
                fh.write(json.dumps(event.to_record()) + "\n")
        return path


@dataclass(frozen=True)
class DriftRecord:
    """Worst drift seen by one previously tuned cell."""

    cell: Cell
    reference_current: float
    drift: float
    caused_by: Optional[Cell] = None
    cell_class: Optional[CellClass] = None


@dataclass
class DisturbReport:
    records: List[DriftRecord] = field(default_factory=list)

    @property
    def worst(self) -> Optional[DriftRecord]:
        if not self.records:
            return None
        return max(self.records, key=lambda r: r.drift)

    @property
    def max_drift(self) -> float:
        worst = self.worst
        return worst.drift if worst else 0.0

    def drift_by_class(self) -> Dict[CellClass, float]:
        out: Dict[CellClass, float] = {}
        for record in self.records:
            if record.cell_class is not None:
                out[record.cell_class] = max(out.get(record.cell_class, 0.0), record.drift)
        return out


# ============================================================================
# Initial erase / program
# ============================================================================

def _commit(array: ArrayState, bias_grid, duration: float) -> List[List[UpdateReport]]:
    updated, reports = apply_array_pulse(array, bias_grid, duration)
    array.cells = updated.cells
    return reports


def initial_erase(
    array: ArrayState, cell: Cell, protocol: Optional[BiasProtocol] = None
) -> List[List[UpdateReport]]:
    """
    Full erase of one cell with the long high-voltage gate pulse.

    The selected drain and source sit at 0 V; every other line follows the
    routing's erase map. Cells on the selected gate line are protected only by
    the raised source/drain rails, so they are recharged unless already erased.
    """
    protocol = protocol or BiasProtocol.for_routing(array.topology.routing)
    protocol = protocol.with_roles("erase", v_d_sel=0.0, v_s_sel=0.0)
    roles = protocol.erase
    grid = bias_map(array.topology, OpKind.ERASE, cell, protocol, roles.initial_amplitude)
    reports = _commit(array, grid, roles.initial_duration)
    logger.debug(f"Initial erase of {cell}: q={array.cell(cell).q:.4f} V")
    return reports


def initial_program(
    array: ArrayState, cell: Cell, protocol: Optional[BiasProtocol] = None
) -> List[List[UpdateReport]]:
    """Full program of one cell with a single high source pulse."""
    protocol = protocol or BiasProtocol.for_routing(array.topology.routing)
    roles = protocol.program
    grid = bias_map(array.topology, OpKind.PROGRAM, cell, protocol, roles.initial_amplitude)
    reports = _commit(array, grid, roles.initial_duration)
    logger.debug(f"Initial program of {cell}: q={array.cell(cell).q:.4f} V")
    return reports


# ============================================================================
# Controller
# ============================================================================

def tune_cell(
    array: ArrayState,
    cell: Cell,
    config: TuningConfig,
    rng: np.random.Generator,
    protocol: Optional[BiasProtocol] = None,
) -> TuningTrace:
    """
    Tune one cell to config.target by alternating reads and single pulses.

    Each iteration reads the averaged current. Within tolerance the run
    converges. Above target a program pulse follows, below target an erase
    pulse, at that direction's next ramp amplitude. The array is updated in
    place, so every other cell sees the mapped biases of each pulse.

    The run stops unconverged when max_pulses is used up, or when the next
    pulse would hit one ramp's cap right after a pulse at the other ramp's cap.

    Args:
        array: Array to tune (mutated)
        cell: Selected cell (row, col)
        config: Target, tolerance, ramps and limits
        rng: Stream for readout noise; one draw per read
        protocol: Bias protocol; defaults to the routing's protocol

    Returns:
        TuningTrace starting and ending with a read

    Raises:
        RangeError: Target not reachable within the cell's q range

    Example:
        >>> trace = tune_cell(array, (0, 0), TuningPolicy().for_target(1e-6), rng)
        >>> trace.converged
        True
    """
    protocol = protocol or BiasProtocol.for_routing(array.topology.routing)
    cell = array.topology.check_cell(cell)
    state_for_current(config.target, protocol.read.biases, array.cell(cell).params)

    ramps = {EventKind.PROGRAM: config.program_ramp, EventKind.ERASE: config.erase_ramp}
    last_index: Dict[EventKind, Optional[int]] = {EventKind.PROGRAM: None, EventKind.ERASE: None}
    previous: Optional[EventKind] = None
    previous_capped = False

    trace = TuningTrace(cell=cell, target=config.target)
    while True:
        measured = read_cell(array, cell, config.read_window, rng, protocol)
        trace.events.append(
            TuningEvent(len(trace.events), EventKind.READ, None, measured, array.cell(cell).q)
        )
        trace.final_current = measured

        if abs(measured - config.target) / config.target <= config.rel_tolerance:
            trace.converged = True
            break
        if trace.pulses_used >= config.max_pulses:
            break

        direction = EventKind.PROGRAM if measured > config.target else EventKind.ERASE
        ramp = ramps[direction]
        last = last_index[direction]
        if last is None:
            index = 0
        elif direction is previous:
            index = min(last + 1, ramp.max_index)
        else:
            index = max(0, last - config.backoff_steps)
        capped = index >= ramp.max_index

        if capped and previous_capped and direction is not previous:
            logger.debug(f"{cell}: both ramps capped at pulse {trace.pulses_used}")
            break

        amplitude = ramp.amplitude(index)
        op_kind = OpKind.PROGRAM if direction is EventKind.PROGRAM else OpKind.ERASE
        grid = bias_map(array.topology, op_kind, cell, protocol, amplitude)
        _commit(array, grid, ramp.pulse_duration)

        trace.pulses_used += 1
        trace.events.append(
            TuningEvent(len(trace.events), direction, amplitude, None, array.cell(cell).q)
        )
        logger.debug(
            f"{cell}: read {measured:.4e} A -> {direction.value} at {amplitude:.2f} V, "
            f"q={array.cell(cell).q:.5f} V"
        )
        last_index[direction] = index
        previous = direction
        previous_capped = capped

    if not trace.converged:
        logger.warning(
            f"Cell {cell} did not converge to {config.target:.3e} A after "
            f"{trace.pulses_used} pulses (last read {trace.final_current:.3e} A)"
        )
    return trace


def tune_sequence(
    array: ArrayState,
    assignments: Sequence[Tuple[Cell, float]],
    policy: TuningPolicy,
    rng: np.random.Generator,
    protocol: Optional[BiasProtocol] = None,
    initial: Optional[str] = None,
) -> Tuple[List[TuningTrace], DisturbReport]:
    """
    Tune cells one after another and track disturb of finished cells.

    After each tuning every previously tuned cell is re-read noise-free and
    compared with its own reading right after it was tuned.

    Args:
        array: Array to tune (mutated)
        assignments: (cell, target) pairs; cells must be distinct
        policy: Tuning policy shared by all cells
        rng: Shared noise stream, consumed in assignment order
        protocol: Bias protocol; defaults to the routing's protocol
        initial: None, "erase" or "program": full pulse applied to each cell
            right before its tuning

    Returns:
        (one TuningTrace per assignment, DisturbReport)
    """
    if initial not in (None, "erase", "program"):
        raise RangeError(f"initial must be None, 'erase' or 'program', got {initial!r}")
    cells = [array.topology.check_cell(cell) for cell, _ in assignments]
    if len(set(cells)) != len(cells):
        raise RangeError("cells in one tuning sequence must be distinct")

    protocol = protocol or BiasProtocol.for_routing(array.topology.routing)
    read_biases = protocol.read.biases
    traces: List[TuningTrace] = []
    references: Dict[Cell, float] = {}
    worst: Dict[Cell, DriftRecord] = {}

    for cell, (_, target) in zip(cells, assignments):
        if initial == "erase":
            initial_erase(array, cell, protocol)
        elif initial == "program":
            initial_program(array, cell, protocol)

        trace = tune_cell(array, cell, policy.for_target(target), rng, protocol)
        traces.append(trace)
        logger.info(
            f"Tuned {cell} to {trace.final_current:.4e} A (target {target:.3e} A, "
            f"{trace.pulses_used} pulses, converged={trace.converged})"
        )

        erased = bool(trace.tune_events(EventKind.ERASE)) or initial == "erase"
        op_kind = OpKind.ERASE if erased else OpKind.PROGRAM
        for other, reference in references.items():
            drift = abs(read_current(array.cell(other), read_biases) - reference) / reference
            if other not in worst or drift > worst[other].drift:
                worst[other] = DriftRecord(
                    cell=other,
                    reference_current=reference,
                    drift=drift,
                    caused_by=cell,
                    cell_class=classify(array.topology, op_kind, cell, other),
                )
        references[cell] = read_current(array.cell(cell), read_biases)
        worst.setdefault(
            cell, DriftRecord(cell=cell, reference_current=references[cell], drift=0.0)
        )

    report = DisturbReport(records=[worst[cell] for cell in cells])
    if report.max_drift > policy.rel_tolerance:
        logger.warning(
            f"Previously tuned cell {report.worst.cell} drifted by {report.max_drift:.2%}"
        )
    return traces, report
