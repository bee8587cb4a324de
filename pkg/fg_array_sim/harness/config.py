"""
Experiment configuration schema.

One JSON document configures every subcommand. Unknown keys are rejected at
every level; missing keys take the defaults declared here.
"""

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..array import ArrayTopology, BiasProtocol, RoutingVariant
from ..device import DeviceParams
from ..errors import ConfigError, RangeError
from ..tuning import TARGET_MAX, TARGET_MIN, RampSchedule, TuningPolicy


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _check_target_range(targets: List[float]) -> None:
    for target in targets:
        if not TARGET_MIN <= target <= TARGET_MAX:
            raise ValueError(f"target {target} A outside [{TARGET_MIN}, {TARGET_MAX}] A")


def _check_ramp(name: str, ramp: RampSchedule, roles) -> None:
    if ramp.start_amplitude < roles.ramp_lo or ramp.max_amplitude > roles.ramp_hi:
        raise ValueError(
            f"tuning.{name}_ramp [{ramp.start_amplitude}, {ramp.max_amplitude}] V outside "
            f"the protocol's {name} ramp [{roles.ramp_lo}, {roles.ramp_hi}] V"
        )


# ============================================================================
# Shared sections
# ============================================================================

class TopologySection(_Section):
    rows: int = Field(4, ge=2)
    cols: int = Field(2, ge=2)
    routing: RoutingVariant = RoutingVariant.MODIFIED

    def build(self, routing: Optional[RoutingVariant] = None) -> ArrayTopology:
        return ArrayTopology(self.rows, self.cols, routing or self.routing)


class ProtocolSection(_Section):
    """Per-role overrides; anything unset takes the routing's defaults."""

    program: Dict[str, float] = Field(default_factory=dict)
    erase: Dict[str, float] = Field(default_factory=dict)
    read: Dict[str, float] = Field(default_factory=dict)

    def build(self, routing: RoutingVariant) -> BiasProtocol:
        return BiasProtocol.for_routing(
            routing, {"program": self.program, "erase": self.erase, "read": self.read}
        )


# ============================================================================
# Experiment sections
# ============================================================================

class SweepSection(_Section):
    # States are built from these readout currents plus both endpoints
    currents: List[float] = Field(default_factory=lambda: [1e-9, 1e-8, 1e-7, 1e-6])
    include_endpoints: bool = True
    gate_start: float = 0.0
    gate_stop: float = 4.0
    gate_points: int = Field(81, ge=0)
    gate_v_ds: float = 1.0
    drain_start: float = 0.0
    drain_stop: float = 2.0
    drain_points: int = Field(41, ge=0)
    drain_v_g: float = 2.5


class DynamicsSection(_Section):
    program_amplitudes: List[float] = Field(default_factory=lambda: [7.6, 7.8, 8.0, 8.2])
    program_duration: float = Field(5e-6, gt=0, le=1.0)
    program_start_current: float = 1e-6
    erase_amplitudes: List[float] = Field(default_factory=lambda: [6.5, 7.0, 7.5])
    erase_durations: List[float] = Field(default_factory=lambda: [0.6e-3, 6e-3])
    erase_start_current: float = 1e-9
    n_pulses: int = Field(20, ge=0)


class TuneSection(_Section):
    # None tunes every cell in row-major order
    cells: Optional[List[Tuple[int, int]]] = None
    targets: List[float] = Field(default_factory=lambda: [1e-6, 1e-7, 1e-8, 1e-9])
    initial: Optional[Literal["erase", "program"]] = None

    @model_validator(mode="after")
    def _check_targets(self) -> "TuneSection":
        _check_target_range(self.targets)
        if self.cells and len(set(map(tuple, self.cells))) != len(self.cells):
            raise ValueError("tune.cells must be distinct")
        return self


class DisturbSection(_Section):
    selected: Tuple[int, int] = (0, 0)
    start_current: float = 1e-8
    amplitude: float = 8.5
    n_pulses: int = Field(3, ge=1)
    inhibit_start: float = 0.0
    inhibit_stop: float = 3.0
    inhibit_step: float = Field(0.1, gt=0)

    def inhibit_values(self) -> List[float]:
        count = int(round((self.inhibit_stop - self.inhibit_start) / self.inhibit_step)) + 1
        return [round(self.inhibit_start + i * self.inhibit_step, 10) for i in range(count)]


class VmmSection(_Section):
    weight_sets: List[List[List[float]]] = Field(
        default_factory=lambda: [[[0.8]], [[0.6, -0.4], [-0.3, 0.9]]]
    )
    i_ref: float = Field(0.5e-6, gt=0)
    i_floor: float = Field(2e-9, gt=0)
    x_min: float = 5e-9
    x_max: float = 5e-7
    points: int = Field(21, ge=10)
    input_index: int = Field(0, ge=0)
    mode: Literal["ideal", "tuned"] = "tuned"

    @model_validator(mode="after")
    def _check_sweep(self) -> "VmmSection":
        if not self.i_floor <= self.x_min < self.x_max <= self.i_ref:
            raise ValueError("need i_floor <= x_min < x_max <= i_ref")
        for weights in self.weight_sets:
            if not weights or any(len(row) != len(weights[0]) for row in weights):
                raise ValueError("each weight set must be a non-empty rectangular matrix")
            if self.input_index >= len(weights[0]):
                raise ValueError(
                    f"input_index {self.input_index} outside a weight set with "
                    f"{len(weights[0])} input(s)"
                )
        return self


class MonteCarloSection(_Section):
    sigmas: List[float] = Field(default_factory=lambda: [0.0, 0.02, 0.05, 0.1], min_length=1)
    n_seeds: int = Field(30, ge=1)
    targets: List[float] = Field(default_factory=lambda: [1e-6], min_length=1)
    # None falls back to FGSIM_WORKERS
    workers: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _check_ladder(self) -> "MonteCarloSection":
        _check_target_range(self.targets)
        if any(sigma < 0.0 for sigma in self.sigmas):
            raise ValueError("sigmas must not be negative")
        return self


# ============================================================================
# Top level
# ============================================================================

class ExperimentConfig(_Section):
    """
    Fully resolved experiment configuration.

    Example:
        >>> config = ExperimentConfig.model_validate({"seed": 7, "tune": {"targets": [1e-6]}})
        >>> config.topology.routing
        <RoutingVariant.MODIFIED: 'modified'>
    """

    seed: Optional[int] = Field(None, ge=0)
    output_dir: Optional[Path] = None
    device: DeviceParams = Field(default_factory=DeviceParams)
    topology: TopologySection = Field(default_factory=TopologySection)
    protocol: ProtocolSection = Field(default_factory=ProtocolSection)
    tuning: TuningPolicy = Field(default_factory=TuningPolicy)
    sweep: SweepSection = Field(default_factory=SweepSection)
    dynamics: DynamicsSection = Field(default_factory=DynamicsSection)
    tune: TuneSection = Field(default_factory=TuneSection)
    disturb: DisturbSection = Field(default_factory=DisturbSection)
    vmm: VmmSection = Field(default_factory=VmmSection)
    montecarlo: MonteCarloSection = Field(default_factory=MonteCarloSection)

    @model_validator(mode="after")
    def _check_protocols(self) -> "ExperimentConfig":
        # Overrides, ramps and the disturb amplitude must fit both routings
        for routing in RoutingVariant:
            protocol = self.protocol.build(routing)
            _check_ramp("program", self.tuning.program_ramp, protocol.program)
            _check_ramp("erase", self.tuning.erase_ramp, protocol.erase)
            try:
                protocol.erase.check_amplitude(self.disturb.amplitude)
            except RangeError as e:
                raise ValueError(f"disturb.amplitude: {e}") from e
        return self

    @model_validator(mode="after")
    def _check_cells(self) -> "ExperimentConfig":
        try:
            topology = self.topology.build()
            for cell in self.tune.cells or []:
                topology.check_cell(tuple(cell))
            topology.check_cell(tuple(self.disturb.selected))
        except RangeError as e:
            raise ValueError(str(e)) from e
        return self

    def protocol_for(self, routing: Optional[RoutingVariant] = None) -> BiasProtocol:
        return self.protocol.build(routing or self.topology.routing)

    def require_seed(self, experiment: str) -> int:
        if self.seed is None:
            raise ConfigError(f"experiment '{experiment}' is noisy and needs a seed")
        return self.seed


# ============================================================================
# Load / dump / hash
# ============================================================================

def parse_config(data: dict) -> ExperimentConfig:
    """Validate a raw mapping; pydantic errors become ConfigError."""
    try:
        return ExperimentConfig.model_validate(data)
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid config JSON in {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be an object: {path}")
    # Template files wrap the config next to their metadata
    if isinstance(data.get("config"), dict):
        data = data["config"]
    return parse_config(data)


def dump_config(config: ExperimentConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def config_hash(config: ExperimentConfig) -> str:
    """First 16 hex digits of SHA-256 over the canonical dump (output_dir excluded)."""
    canonical = json.dumps(
        config.model_dump(mode="json", exclude={"output_dir"}),
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
