"""
Behavioral model of a single asymmetric floating-gate cell.

The floating-gate potential is a capacitive divider over the three terminal
voltages plus a charge-induced offset q. Readout is a subthreshold exponential
with a saturation clamp; programming (hot-electron injection from the source
side) and erasure (Fowler-Nordheim tunneling to the control gate) are two
exponential rate laws integrated over a pulse.

All functions are pure: states are immutable and every random draw comes from
an explicit numpy Generator.
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import RangeError, UnsupportedRegimeError

SAFE_V_MIN = -2.0
SAFE_V_MAX = 12.0

MAX_PULSE_DURATION = 1.0

# Noise law reference points
NOISE_REF_CURRENT = 1e-9
NOISE_REF_WINDOW = 10e-3


# ============================================================================
# Domain types
# ============================================================================

@dataclass(frozen=True)
class TerminalBiases:
    """Control-gate, drain and source voltages (V) applied to one cell."""

    v_g: float
    v_d: float
    v_s: float

    def __post_init__(self):
        for name in ("v_g", "v_d", "v_s"):
            value = getattr(self, name)
            if not math.isfinite(value) or not SAFE_V_MIN <= value <= SAFE_V_MAX:
                raise RangeError(
                    f"{name}={value} V outside safe range [{SAFE_V_MIN}, {SAFE_V_MAX}] V"
                )


READ_BIASES = TerminalBiases(v_g=2.5, v_d=1.0, v_s=0.0)
GROUNDED = TerminalBiases(v_g=0.0, v_d=0.0, v_s=0.0)


@dataclass(frozen=True)
class Pulse:
    """A rectangular bias pulse of the given duration (s)."""

    biases: TerminalBiases
    duration: float

    def __post_init__(self):
        if not math.isfinite(self.duration) or not 0.0 < self.duration <= MAX_PULSE_DURATION:
            raise RangeError(
                f"pulse duration {self.duration} s outside (0, {MAX_PULSE_DURATION}] s"
            )


class DeviceParams(BaseModel):
    """
    Parameters of the behavioral cell model.

    Defaults are the calibrated set: 1 nA - 1 uA readout at (2.5, 1, 0) V sits
    strictly inside [q_min, q_max], readout never recharges the cell, and the
    inhibit rails of both bias protocols suppress the rate laws as required.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    # Readout
    i_s0: float = Field(1e-11, gt=0)
    n_slope: float = Field(1.5, ge=1.0)
    u_t: float = Field(0.02585, gt=0)
    v_th0: float = 0.85
    # A 2.7 V source rail suppresses tunneling by exp(kappa_s * 2.7 / tun_slope) ~ 5.8e3
    kappa_cg: float = Field(0.60, ge=0)
    kappa_d: float = Field(0.01, ge=0)
    kappa_s: float = Field(0.385, ge=0)
    i_max: float = 1e-5

    # Hot-electron injection
    inj_rate0: float = Field(2.7e-12, ge=0)
    inj_slope: float = Field(0.15, gt=0)
    inj_vmin: float = 3.0
    inj_gate_lo: float = 1.0
    inj_gate_hi: float = 2.2

    # Fowler-Nordheim tunneling
    tun_rate0: float = Field(1.2e-5, ge=0)
    tun_slope: float = Field(0.12, gt=0)
    tun_vmin: float = 2.0

    q_min: float = -0.9
    q_max: float = 0.3

    noise_a: float = Field(0.002, ge=0)
    noise_b: float = Field(0.02, ge=0)

    variability_sigma: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "DeviceParams":
        if self.kappa_cg + self.kappa_d + self.kappa_s > 1.0 + 1e-12:
            raise ValueError("kappa_cg + kappa_d + kappa_s must not exceed 1")
        if not self.i_max > self.i_s0:
            raise ValueError("i_max must exceed i_s0")
        if not self.q_min < self.q_max:
            raise ValueError("q_min must be below q_max")
        if not self.inj_gate_lo <= self.inj_gate_hi:
            raise ValueError("inj_gate_lo must not exceed inj_gate_hi")
        if not math.isfinite(self.variability_sigma):
            raise ValueError("variability_sigma must be finite")
        return self

    @property
    def n_ut(self) -> float:
        """Subthreshold voltage scale n_slope * u_t (V)."""
        return self.n_slope * self.u_t

    @property
    def decade_shift(self) -> float:
        """Charge offset change that scales the readout current by 10x."""
        return self.n_ut * math.log(10.0)


@dataclass(frozen=True)
class CellState:
    """Charge offset q (V) of one cell together with its own parameter draw."""

    q: float
    params: DeviceParams

    def __post_init__(self):
        if not self.params.q_min <= self.q <= self.params.q_max:
            raise RangeError(
                f"q={self.q} V outside [{self.params.q_min}, {self.params.q_max}] V"
            )

    @classmethod
    def erased(cls, params: DeviceParams) -> "CellState":
        return cls(q=params.q_max, params=params)

    @classmethod
    def programmed(cls, params: DeviceParams) -> "CellState":
        return cls(q=params.q_min, params=params)


@dataclass(frozen=True)
class UpdateReport:
    """What one pulse did to one cell."""

    r_inj: float
    r_tun: float
    clamped: bool
    delta_q: float


# ============================================================================
# Readout
# ============================================================================

def fg_potential(state: CellState, biases: TerminalBiases) -> float:
    """
    Floating-gate potential from the capacitive divider.

    Args:
        state: Cell state (charge offset and coupling coefficients)
        biases: Terminal voltages, already range-checked by TerminalBiases

    Returns:
        kappa_cg*v_g + kappa_d*v_d + kappa_s*v_s + q (V)
    """
    p = state.params
    return p.kappa_cg * biases.v_g + p.kappa_d * biases.v_d + p.kappa_s * biases.v_s + state.q


def _drain_factor(biases: TerminalBiases, u_t: float) -> float:
    return -math.expm1(-(biases.v_d - biases.v_s) / u_t)


def read_current(state: CellState, biases: TerminalBiases) -> float:
    """
    Noise-free forward readout current (A).

    Raises:
        UnsupportedRegimeError: If v_d < v_s (reverse conduction is not modeled)

    Example:
        >>> cell = state_for_current(1e-6, READ_BIASES, DeviceParams())
        >>> read_current(cell, READ_BIASES)  # ~1e-6
    """
    if biases.v_d < biases.v_s:
        raise UnsupportedRegimeError(
            f"reverse readout (v_d={biases.v_d} V < v_s={biases.v_s} V) is not modeled"
        )
    p = state.params
    exponent = (fg_potential(state, biases) - p.v_th0) / p.n_ut
    current = p.i_s0 * math.exp(exponent) * _drain_factor(biases, p.u_t)
    return min(p.i_max, current)


def state_for_current(
    target: float, biases: TerminalBiases, params: DeviceParams
) -> CellState:
    """
    Analytic inverse of read_current: the state that reads `target` at `biases`.

    Raises:
        RangeError: If target is not in (0, i_max), the drain-source bias is
            zero, or the required q falls outside [q_min, q_max]
        UnsupportedRegimeError: For reverse biases
    """
    if not math.isfinite(target) or not 0.0 < target < params.i_max:
        raise RangeError(f"target current {target} A outside (0, {params.i_max}) A")
    if biases.v_d < biases.v_s:
        raise UnsupportedRegimeError("state_for_current needs forward biases")
    if biases.v_d == biases.v_s:
        raise RangeError("no current flows at zero drain-source bias")

    coupled = (
        params.kappa_cg * biases.v_g + params.kappa_d * biases.v_d + params.kappa_s * biases.v_s
    )
    q = params.v_th0 + params.n_ut * math.log(
        target / (params.i_s0 * _drain_factor(biases, params.u_t))
    ) - coupled
    if not params.q_min <= q <= params.q_max:
        raise RangeError(
            f"target {target} A needs q={q:.4f} V outside [{params.q_min}, {params.q_max}] V"
        )
    return CellState(q=q, params=params)


def sample_readout(
    state: CellState, biases: TerminalBiases, window: float, rng: np.random.Generator
) -> float:
    """
    Window-averaged noisy readout.

    The relative noise is noise_a + noise_b*sqrt(1 nA / I), scaled by
    1/sqrt(window / 10 ms). Exactly one normal draw is consumed per call.
    """
    if not math.isfinite(window) or window <= 0.0:
        raise RangeError(f"readout window {window} s must be positive")
    current = read_current(state, biases)
    eps = float(rng.standard_normal())
    if current <= 0.0:
        return 0.0
    p = state.params
    sigma = (p.noise_a + p.noise_b * math.sqrt(NOISE_REF_CURRENT / current)) / math.sqrt(
        window / NOISE_REF_WINDOW
    )
    return max(0.0, current * (1.0 + sigma * eps))


# ============================================================================
# Charge updates
# ============================================================================

def injection_rate(params: DeviceParams, biases: TerminalBiases) -> float:
    """Hot-electron injection rate (V/s); lowers q."""
    v_sd = biases.v_s - biases.v_d
    if v_sd <= params.inj_vmin:
        return 0.0
    if not params.inj_gate_lo <= biases.v_g <= params.inj_gate_hi:
        return 0.0
    return params.inj_rate0 * math.exp((v_sd - params.inj_vmin) / params.inj_slope)


def tunneling_rate(state: CellState, biases: TerminalBiases) -> float:
    """Fowler-Nordheim rate (V/s) through the gate oxide; raises q."""
    p = state.params
    v_ox = biases.v_g - fg_potential(state, biases)
    if v_ox <= p.tun_vmin:
        return 0.0
    return p.tun_rate0 * math.exp((v_ox - p.tun_vmin) / p.tun_slope)


def pulse_update(state: CellState, pulse: Pulse) -> Tuple[CellState, UpdateReport]:
    """
    Apply one pulse: q' = clamp(q - r_inj*dt + r_tun*dt, q_min, q_max).

    Both rates are evaluated at the state before the pulse.

    Returns:
        (new state, UpdateReport with both rates and the clamp flag)
    """
    p = state.params
    r_inj = injection_rate(p, pulse.biases)
    r_tun = tunneling_rate(state, pulse.biases)
    if r_inj == 0.0 and r_tun == 0.0:
        return state, UpdateReport(r_inj=0.0, r_tun=0.0, clamped=False, delta_q=0.0)

    q_raw = state.q - r_inj * pulse.duration + r_tun * pulse.duration
    q_new = min(max(q_raw, p.q_min), p.q_max)
    report = UpdateReport(
        r_inj=r_inj, r_tun=r_tun, clamped=q_new != q_raw, delta_q=q_new - state.q
    )
    return CellState(q=q_new, params=p), report


# ============================================================================
# Device-to-device variability
# ============================================================================

VARIED_FIELDS = (
    "i_s0",
    "n_slope",
    "v_th0",
    "kappa_cg",
    "kappa_d",
    "kappa_s",
    "inj_rate0",
    "tun_rate0",
)


def draw_cell(params: DeviceParams, rng: np.random.Generator) -> CellState:
    """
    Draw one cell: lognormal spread on VARIED_FIELDS, fully erased charge.

    The three coupling coefficients are rescaled after the draw so their sum
    matches the nominal sum. A fixed number of normals is drawn whatever the
    sigma, so the stream position does not depend on it.
    """
    sigma = params.variability_sigma
    factors = np.exp(sigma * rng.standard_normal(len(VARIED_FIELDS)))
    drawn = {
        name: getattr(params, name) * float(factor)
        for name, factor in zip(VARIED_FIELDS, factors)
    }
    drawn["n_slope"] = max(1.0, drawn["n_slope"])

    nominal_sum = params.kappa_cg + params.kappa_d + params.kappa_s
    drawn_sum = drawn["kappa_cg"] + drawn["kappa_d"] + drawn["kappa_s"]
    scale = nominal_sum / drawn_sum
    for name in ("kappa_cg", "kappa_d", "kappa_s"):
        drawn[name] *= scale

    cell_params = DeviceParams.model_validate({**params.model_dump(), **drawn})
    return CellState(q=cell_params.q_max, params=cell_params)
