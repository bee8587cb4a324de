"""
Experiment runners, one per subcommand.

Each runner takes a resolved ExperimentConfig and an OutputDir, writes its
tables (and traces), and returns an ExperimentResult whose `checks` hold the
acceptance assertions that apply to it.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from ..array import (
    ArrayState,
    ArrayTopology,
    CellClass,
    OpKind,
    RoutingVariant,
    apply_array_pulse,
    bias_map,
    class_grid,
)
from ..device import (
    READ_BIASES,
    CellState,
    DeviceParams,
    Pulse,
    TerminalBiases,
    pulse_update,
    read_current,
    state_for_current,
)
from ..errors import AcceptanceError, ConfigError, RangeError
from ..settings import get_settings
from ..tuning import tune_sequence
from ..vmm import (
    VmmProgram,
    linearity_metric,
    make_peripherals,
    place_weights,
    program_weights,
    transfer_sweep,
)
from .config import ExperimentConfig
from .output import OutputDir


@dataclass
class ExperimentResult:
    name: str
    files: List[Path] = field(default_factory=list)
    checks: Dict[str, bool] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)

    @property
    def failed(self) -> List[str]:
        return [name for name, ok in self.checks.items() if not ok]


def _rng_streams(seed: int, n: int) -> List[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _make_array(
    topology: ArrayTopology, params: DeviceParams, rng: Optional[np.random.Generator]
) -> ArrayState:
    if params.variability_sigma > 0.0:
        if rng is None:
            raise ConfigError("variability_sigma > 0 needs a seed")
        return ArrayState.drawn(topology, params, rng)
    return ArrayState.uniform(topology, params)


# ============================================================================
# sweep
# ============================================================================

def cmd_sweep(config: ExperimentConfig, out: OutputDir) -> ExperimentResult:
    """Readout characteristics: gate and drain sweeps over a set of states."""
    params = config.device
    sweep = config.sweep
    states: List[Tuple[str, CellState]] = [
        (f"i={current:g}", state_for_current(current, READ_BIASES, params))
        for current in sweep.currents
    ]
    if sweep.include_endpoints:
        states.append(("programmed", CellState.programmed(params)))
        states.append(("erased", CellState.erased(params)))

    rows = []
    curves: Dict[Tuple[str, float], List[Tuple[float, float]]] = {}
    grids = (
        ("gate", np.linspace(sweep.gate_start, sweep.gate_stop, sweep.gate_points)),
        ("drain", np.linspace(sweep.drain_start, sweep.drain_stop, sweep.drain_points)),
    )
    for sweep_var, values in grids:
        for value in values:
            value = float(value)
            if sweep_var == "gate":
                biases = TerminalBiases(v_g=value, v_d=sweep.gate_v_ds, v_s=0.0)
            else:
                biases = TerminalBiases(v_g=sweep.drain_v_g, v_d=value, v_s=0.0)
            for state_id, state in states:
                current = read_current(state, biases)
                rows.append([sweep_var, value, state_id, state.q, current])
                curves.setdefault((sweep_var, value), []).append((state.q, current))

    readout = [[sid, s.q, read_current(s, READ_BIASES)] for sid, s in states]
    out.table("sweep", ["sweep", "sweep_value", "state_id", "q", "current"], rows)
    out.table("readout", ["state_id", "q", "current"], readout)

    ordered = all(
        all(a[1] <= b[1] for a, b in zip(points, points[1:]))
        for points in (sorted(p) for p in curves.values())
    )
    round_trip = all(
        abs(current - target) / target < 1e-9
        for (_, _, current), target in zip(readout, sweep.currents)
    )
    return ExperimentResult(
        "sweep", out.files, {"curves_do_not_cross": ordered, "readout_round_trip": round_trip}
    )


# ============================================================================
# dynamics
# ============================================================================

def cmd_dynamics(config: ExperimentConfig, out: OutputDir) -> ExperimentResult:
    """Gradual programming and erasure of a single cell under pulse trains."""
    params = config.device
    dyn = config.dynamics
    program_roles = config.protocol_for().program

    families = []
    start = state_for_current(dyn.program_start_current, READ_BIASES, params)
    for amplitude in dyn.program_amplitudes:
        biases = TerminalBiases(v_g=program_roles.v_g_sel, v_d=program_roles.v_d_sel, v_s=amplitude)
        families.append(("program", amplitude, dyn.program_duration, start, biases))
    start = state_for_current(dyn.erase_start_current, READ_BIASES, params)
    for duration in dyn.erase_durations:
        for amplitude in dyn.erase_amplitudes:
            biases = TerminalBiases(v_g=amplitude, v_d=0.0, v_s=0.0)
            families.append(("erase", amplitude, duration, start, biases))

    rows = []
    curves: Dict[Tuple[str, float, float], List[float]] = {}
    for family, amplitude, duration, state, biases in families:
        currents = [read_current(state, READ_BIASES)]
        rows.append([family, amplitude, duration, 0, state.q, currents[0]])
        for index in range(1, dyn.n_pulses + 1):
            state, _ = pulse_update(state, Pulse(biases=biases, duration=duration))
            currents.append(read_current(state, READ_BIASES))
            rows.append([family, amplitude, duration, index, state.q, currents[-1]])
        curves[(family, amplitude, duration)] = currents

    out.table(
        "dynamics", ["family", "amplitude", "duration", "pulse_index", "q", "readout_current"], rows
    )

    def monotone(family: str) -> bool:
        sign = -1.0 if family == "program" else 1.0
        return all(
            all(sign * (b - a) > 0 for a, b in zip(c, c[1:]))
            for (f, _, _), c in curves.items()
            if f == family
        )

    def amplitude_ordered(family: str, duration: float) -> bool:
        finals = [c[-1] for (f, _, d), c in sorted(curves.items()) if f == family and d == duration]
        sign = -1.0 if family == "program" else 1.0
        return all(sign * (b - a) > 0 for a, b in zip(finals, finals[1:]))

    checks = {}
    if dyn.n_pulses > 0:
        checks["program_strictly_decreasing"] = monotone("program")
        checks["erase_strictly_increasing"] = monotone("erase")
        checks["program_amplitude_ordering"] = amplitude_ordered("program", dyn.program_duration)
        checks["erase_amplitude_ordering"] = all(
            amplitude_ordered("erase", d) for d in dyn.erase_durations
        )
        durations = sorted(dyn.erase_durations)
        checks["erase_duration_ordering"] = all(
            curves[("erase", a, longer)][1] > curves[("erase", a, shorter)][1]
            for a in dyn.erase_amplitudes
            for shorter, longer in zip(durations, durations[1:])
        )
    return ExperimentResult("dynamics", out.files, checks)


# ============================================================================
# tune
# ============================================================================

def cmd_tune(config: ExperimentConfig, out: OutputDir) -> ExperimentResult:
    """Sequential tuning of cells through a list of targets."""
    seed = config.require_seed("tune")
    draw_rng, noise_rng = _rng_streams(seed, 2)
    topology = config.topology.build()
    protocol = config.protocol_for()
    array = _make_array(topology, config.device, draw_rng)
    cells = [tuple(c) for c in config.tune.cells] if config.tune.cells else list(topology.cells())

    summary_rows, drift_rows = [], []
    converged = total = 0
    worst_drift = 0.0
    for step, target in enumerate(config.tune.targets):
        logger.info(f"Tuning step {step}: {len(cells)} cells to {target:.3e} A")
        traces, report = tune_sequence(
            array, [(c, target) for c in cells], config.tuning, noise_rng, protocol,
            initial=config.tune.initial,
        )
        drifts = {r.cell: r for r in report.records}
        for trace in traces:
            row, col = trace.cell
            out.trace(f"{step}_r{row}c{col}", trace)
            true_current = read_current(array.cell(trace.cell), READ_BIASES)
            summary_rows.append([
                step, target, row, col, trace.converged, trace.pulses_used,
                trace.final_current, trace.rel_error, true_current,
                drifts[trace.cell].drift,
            ])
            converged += trace.converged
            total += 1
        for record in report.records:
            caused = record.caused_by or (None, None)
            drift_rows.append([
                step, record.cell[0], record.cell[1], record.reference_current, record.drift,
                caused[0], caused[1], record.cell_class,
            ])
        worst_drift = max(worst_drift, report.max_drift)

    out.table(
        "summary",
        ["step", "target", "row", "col", "converged", "pulses_used", "final_current",
         "rel_error", "true_current", "drift"],
        summary_rows,
    )
    out.table(
        "drift",
        ["step", "row", "col", "reference_current", "drift", "caused_by_row", "caused_by_col",
         "class"],
        drift_rows,
    )

    rate = converged / total if total else 1.0
    checks = {
        "convergence_rate_at_least_95pct": rate >= 0.95,
        "previously_tuned_drift_below_1pct": worst_drift < 0.01,
    }
    return ExperimentResult(
        "tune", out.files, checks, {"convergence_rate": rate, "max_drift": worst_drift}
    )


# ============================================================================
# disturb
# ============================================================================

def _erase_disturb_rows(
    topology: ArrayTopology, config: ExperimentConfig, v_d_inhibit: Optional[float]
) -> List[list]:
    dist = config.disturb
    protocol = config.protocol_for(topology.routing)
    if v_d_inhibit is not None:
        protocol = protocol.with_roles("erase", v_d_inhibit=v_d_inhibit)
    start = state_for_current(dist.start_current, READ_BIASES, config.device)
    array = ArrayState.uniform(topology, config.device, start.q)
    before = array.read_currents()

    grid = bias_map(topology, OpKind.ERASE, dist.selected, protocol, dist.amplitude)
    for _ in range(dist.n_pulses):
        array, reports = apply_array_pulse(array, grid, config.tuning.erase_ramp.pulse_duration)
        if any(r.clamped for row in reports for r in row):
            logger.warning(f"Clamped update during {topology.routing.value} erase disturb run")
    after = array.read_currents()

    classes = class_grid(topology, OpKind.ERASE, dist.selected)
    rows = []
    for row, col in topology.cells():
        rel = (after[row, col] - before[row, col]) / before[row, col]
        rows.append([
            topology.routing, protocol.erase.v_d_inhibit, row, col, classes[row][col],
            float(before[row, col]), float(after[row, col]), float(rel),
        ])
    return rows


def cmd_disturb(config: ExperimentConfig, out: OutputDir) -> ExperimentResult:
    """Matched erase sequences under both routings, with an inhibit sweep for Original."""
    section = config.topology
    rows = _erase_disturb_rows(section.build(RoutingVariant.MODIFIED), config, None)
    original = section.build(RoutingVariant.ORIGINAL)
    for v_inh in config.disturb.inhibit_values():
        rows.extend(_erase_disturb_rows(original, config, v_inh))

    out.table(
        "disturb",
        ["routing", "v_d_inhibit", "row", "col", "class", "i_before", "i_after", "rel_change"],
        rows,
    )

    def changes(routing: RoutingVariant, cls: CellClass) -> List[float]:
        return [abs(r[7]) for r in rows if r[0] is routing and r[4] is cls]

    modified_other = [
        abs(r[7])
        for r in rows
        if r[0] is RoutingVariant.MODIFIED and r[4] is not CellClass.SELECTED
    ]
    per_inhibit: Dict[float, float] = {}
    for r in rows:
        if r[0] is RoutingVariant.ORIGINAL and r[4] is CellClass.HALF_C:
            per_inhibit[r[1]] = max(per_inhibit.get(r[1], 0.0), abs(r[7]))

    checks = {
        "modified_nonselected_below_0.5pct": max(modified_other, default=0.0) < 0.005,
        "original_halfC_at_least_10pct": bool(per_inhibit) and min(per_inhibit.values()) >= 0.10,
        "selected_changes_both_routings": all(
            changes(routing, CellClass.SELECTED) and min(changes(routing, CellClass.SELECTED)) > 0
            for routing in RoutingVariant
        ),
    }
    summary = {
        "modified_max_nonselected": max(modified_other, default=0.0),
        "original_min_halfC": min(per_inhibit.values(), default=math.nan),
    }
    return ExperimentResult("disturb", out.files, checks, summary)


# ============================================================================
# vmm
# ============================================================================

def vmm_topology(routing: RoutingVariant, n_out: int, n_in: int) -> ArrayTopology:
    """Smallest array that holds an (n_out, n_in) differential weight matrix."""
    if routing is RoutingVariant.ORIGINAL:
        rows, cols = 2 * n_in, 2 * n_out
    else:
        rows, cols = 4 * n_out, max(2, n_in)
    return ArrayTopology(max(2, rows + rows % 2), max(2, cols), routing)


def cmd_vmm(config: ExperimentConfig, out: OutputDir) -> ExperimentResult:
    """Program weight sets and record transfer characteristics and linearity."""
    vmm = config.vmm
    noisy = vmm.mode == "tuned" or config.device.variability_sigma > 0.0
    seed = config.require_seed("vmm") if noisy else (config.seed or 0)
    streams = _rng_streams(seed, 3 * len(vmm.weight_sets))
    routing = config.topology.routing
    xs = np.geomspace(vmm.x_min, vmm.x_max, vmm.points)

    transfer_rows, linearity_rows = [], []
    metrics = []
    for index, weights in enumerate(vmm.weight_sets):
        draw_rng, noise_rng, periph_rng = streams[3 * index: 3 * index + 3]
        program = VmmProgram(weights=weights, i_ref=vmm.i_ref, i_floor=vmm.i_floor)
        topology = vmm_topology(routing, program.n_out, program.n_in)
        array = _make_array(topology, config.device, draw_rng)
        if vmm.mode == "tuned":
            program, _ = program_weights(
                array, weights, vmm.i_ref, vmm.i_floor, config.tuning, noise_rng,
                config.protocol_for(routing),
            )
        else:
            place_weights(array, program)
        periphs = make_peripherals(
            2 * program.n_in, config.device, vmm.i_ref,
            periph_rng if config.device.variability_sigma > 0.0 else None,
        )
        input_index = min(vmm.input_index, program.n_in - 1)
        records = transfer_sweep(array, program, periphs, input_index, xs)
        for record in records:
            for k, (i_plus, i_minus, y) in enumerate(zip(record.i_plus, record.i_minus, record.y)):
                transfer_rows.append(
                    [index, record.x_plus, record.x_minus, k, i_plus, i_minus, y]
                )
        reconstructed = program.reconstructed_weights()
        for k in range(program.n_out):
            metric = linearity_metric(xs, [r.y[k] for r in records])
            w = float(program.weights[k, input_index])
            linearity_rows.append([index, k, w, float(reconstructed[k, input_index]), metric])
            if w != 0.0:
                metrics.append(metric)
            logger.info(f"Weight set {index} output {k}: w={w:+.3f}, linearity={metric:.3e}")

    out.table(
        "transfer", ["weight_set", "x_plus", "x_minus", "output", "i_plus", "i_minus", "y"],
        transfer_rows,
    )
    out.table(
        "linearity", ["weight_set", "output", "weight", "achieved_weight", "linearity"],
        linearity_rows,
    )
    bound = 0.02 if noisy else 0.01
    worst = max(metrics, default=0.0)
    return ExperimentResult(
        "vmm", out.files, {f"linearity_below_{bound:g}": worst < bound}, {"max_linearity": worst}
    )


# ============================================================================
# montecarlo
# ============================================================================

def montecarlo_run(job: Dict) -> Dict:
    """
    One Monte Carlo run: draw an array, tune every cell through the targets.

    Module level so that a process pool can pickle it.
    """
    config = ExperimentConfig.model_validate(job["config"])
    params = config.device.model_copy(update={"variability_sigma": job["sigma"]})
    sequence = np.random.SeedSequence(job["seed"], spawn_key=(job["rung"], job["run"]))
    draw_rng, noise_rng = [np.random.default_rng(s) for s in sequence.spawn(2)]

    topology = config.topology.build()
    array = ArrayState.drawn(topology, params, draw_rng)
    protocol = config.protocol_for()
    converged = total = 0
    errors: List[float] = []
    pulses: List[int] = []
    for target in config.montecarlo.targets:
        assignments = []
        for cell in topology.cells():
            total += 1
            try:
                state_for_current(target, READ_BIASES, array.cell(cell).params)
            except RangeError:
                continue
            assignments.append((cell, target))
        traces, _ = tune_sequence(array, assignments, config.tuning, noise_rng, protocol)
        for trace in traces:
            pulses.append(trace.pulses_used)
            if trace.converged:
                converged += 1
                true_current = read_current(array.cell(trace.cell), READ_BIASES)
                errors.append(abs(true_current - target) / target)
    return {
        "sigma": job["sigma"],
        "run": job["run"],
        "converged": converged,
        "total": total,
        "errors": errors,
        "mean_pulses": float(np.mean(pulses)) if pulses else 0.0,
    }


def cmd_montecarlo(
    config: ExperimentConfig, out: OutputDir, workers: Optional[int] = None
) -> ExperimentResult:
    """Tuning success and precision over a ladder of device variability."""
    seed = config.require_seed("montecarlo")
    mc = config.montecarlo
    workers = workers or mc.workers or get_settings().workers
    dumped = config.model_dump(mode="json")
    jobs = [
        {"config": dumped, "sigma": sigma, "seed": seed, "rung": rung, "run": run}
        for rung, sigma in enumerate(mc.sigmas)
        for run in range(mc.n_seeds)
    ]
    logger.info(f"Monte Carlo: {len(jobs)} runs on {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(montecarlo_run, jobs))
    else:
        results = [montecarlo_run(job) for job in jobs]

    run_rows, summary_rows = [], []
    rates = []
    for sigma in mc.sigmas:
        runs = [r for r in results if r["sigma"] == sigma]
        for r in runs:
            errs = r["errors"]
            run_rows.append([
                sigma, r["run"], r["converged"], r["total"], r["converged"] / r["total"],
                float(np.median(errs)) if errs else math.nan,
                float(np.max(errs)) if errs else math.nan,
                r["mean_pulses"],
            ])
        converged = sum(r["converged"] for r in runs)
        total = sum(r["total"] for r in runs)
        errs = [e for r in runs for e in r["errors"]]
        q05, q50, q95 = np.quantile(errs, [0.05, 0.5, 0.95]) if errs else (math.nan,) * 3
        rate = converged / total
        rates.append(rate)
        summary_rows.append([sigma, len(runs), rate, float(q05), float(q50), float(q95)])
        logger.info(f"sigma={sigma}: success {rate:.1%}, median error {q50:.3%}")

    out.table(
        "runs",
        ["sigma", "run", "converged", "total", "success_rate", "err_median", "err_max",
         "mean_pulses"],
        run_rows,
    )
    out.table(
        "summary", ["sigma", "runs", "success_rate", "err_q05", "err_q50", "err_q95"], summary_rows
    )

    # One-run slack between rungs
    slack = 1.0 / mc.n_seeds
    checks = {
        "success_non_increasing_in_sigma": all(b <= a + slack for a, b in zip(rates, rates[1:])),
    }
    if mc.sigmas and mc.sigmas[0] == 0.0:
        checks["nominal_success_at_least_95pct"] = rates[0] >= 0.95
    return ExperimentResult("montecarlo", out.files, checks, {"success_rates": rates})


# ============================================================================
# Dispatch
# ============================================================================

EXPERIMENTS: Dict[str, Callable[..., ExperimentResult]] = {
    "sweep": cmd_sweep,
    "dynamics": cmd_dynamics,
    "tune": cmd_tune,
    "disturb": cmd_disturb,
    "vmm": cmd_vmm,
    "montecarlo": cmd_montecarlo,
}


def run_experiment(
    name: str,
    config: ExperimentConfig,
    out_dir: Optional[Path] = None,
    check: bool = False,
    workers: Optional[int] = None,
) -> ExperimentResult:
    """
    Run one experiment and write its files under out_dir/<name>.

    Raises:
        ConfigError: Unknown experiment or invalid configuration
        AcceptanceError: check=True and an acceptance assertion failed
    """
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment: {name}")
    root = Path(out_dir or config.output_dir or get_settings().output_dir) / name
    out = OutputDir(root, name, config)

    logger.info(f"Running {name} (seed={config.seed}) -> {root}")
    if name == "montecarlo":
        result = cmd_montecarlo(config, out, workers)
    else:
        result = EXPERIMENTS[name](config, out)

    for check_name, ok in result.checks.items():
        if not ok:
            logger.warning(f"Acceptance check failed: {check_name}")
    if check and result.failed:
        raise AcceptanceError(f"{name}: failed checks {result.failed}")
    logger.info(f"{name} finished: {len(result.files)} files")
    return result
